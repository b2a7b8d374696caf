import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tpg import ShapeError
from tpg.codec import decode, encode, latent_shape, resize_mask


def test_shapes():
    x = torch.rand(2, 64, 64, 3)
    z = encode(x)
    assert z.shape == (2, 48, 16, 16)
    assert latent_shape(64) == (48, 16, 16)
    assert encode(x[0], r=2).shape == (12, 32, 32)


def test_gray_is_zero():
    assert torch.equal(encode(torch.full((8, 8, 3), 0.5)), torch.zeros(48, 2, 2))


def test_round_trip_exact_float64():
    x = torch.rand(3, 32, 32, 3, dtype=torch.float64)
    assert torch.equal(decode(encode(x)), x)


def test_round_trip_8bit_values():
    # k/255 is not exactly representable after the affine map; the round trip is
    # within one ulp and re-quantizes to the same 8-bit code.
    k = torch.randint(0, 256, (16, 16, 3))
    for dtype in (torch.float32, torch.float64):
        x = k.to(dtype) / 255
        y = decode(encode(x, r=2), r=2)
        assert (y - x).abs().max() <= torch.finfo(dtype).eps
        assert torch.equal(torch.round(y * 255).long(), k)


def test_round_trip_dyadic_float32():
    x = torch.randint(0, 256, (16, 16, 3)).float() / 256
    assert torch.equal(decode(encode(x)), x)


def test_affine_linearity():
    a, b = torch.rand(16, 16, 3, dtype=torch.float64), torch.rand(16, 16, 3, dtype=torch.float64)
    lhs = encode(0.5 * (a + b))
    rhs = 0.5 * (encode(a) + encode(b))
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        encode(torch.rand(10, 12, 3))
    with pytest.raises(ShapeError):
        encode(torch.rand(16, 16))
    with pytest.raises(ShapeError):
        resize_mask(torch.ones(10, 10), 4)


def test_decode_clamps():
    z = torch.randn(2, 48, 4, 4) * 3
    y = decode(z)
    assert y.min() >= 0 and y.max() <= 1


def test_resize_mask_rules():
    assert torch.equal(resize_mask(torch.ones(8, 8), 4), torch.ones(2, 2))
    checker = (torch.arange(4)[:, None] + torch.arange(4)[None]) % 2
    assert torch.equal(resize_mask(checker.float(), 2), torch.ones(2, 2))
    quarter = torch.zeros(4, 4)
    quarter[0, 0] = 1
    assert torch.equal(resize_mask(quarter, 2), torch.tensor([[0.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=25, deadline=None)
@given(r=st.sampled_from([1, 2, 4]), k=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_round_trip_property(r, k, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(r * k, r * k, 3, generator=g, dtype=torch.float64)
    z = encode(x, r)
    assert z.shape == (3 * r * r, k, k)
    assert torch.equal(decode(z, r), x)
    assert z.min() >= -1 and z.max() <= 1
