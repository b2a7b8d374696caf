import math

import numpy as np
import pytest
import torch

from tpg import ShapeError
from tpg.codec import decode, encode
from tpg.diffusion import (
    ConditioningBundle,
    DenoiserNet,
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    assemble_input,
    cfg_epsilon,
    loss_dp,
    predict_x0,
    sample,
    sample_timesteps,
)

C, H = 12, 4  # latent channels / side for 8x8 images at r=2


def tiny_net(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    net = DenoiserNet(latent_channels=C, content_dim=8, n_tokens=H * H, latent_hw=(H, H),
                      widths=(8, 8, 8), ctx_dim=8, time_dim=16, heads=2, groups=4)
    return net.to(dtype)


def bundle(b, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return ConditioningBundle(
        content_tokens=torch.randn(b, H * H, 8, generator=g).to(dtype),
        structure_tokens=torch.randn(b, H * H, C, generator=g).to(dtype),
        defect_tokens=torch.randn(b, H * H, C, generator=g).to(dtype),
        global_vec=torch.randn(b, 8, generator=g).to(dtype),
    )


def test_schedule_invariants():
    s = NoiseSchedule()
    assert s.alpha_bar[0] == 1.0
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(2e-2)
    with pytest.raises(ValueError):
        add_noise(s, torch.zeros(3), torch.zeros(3), 1001)
    with pytest.raises(ValueError):
        add_noise(s, torch.zeros(3), torch.zeros(3), -1)


def test_add_noise_examples():
    s = NoiseSchedule()
    z0 = torch.randn(2, C, H, H, dtype=torch.float64)
    t = torch.tensor([10, 700])
    out = add_noise(s, z0, torch.zeros_like(z0), t)
    expected = torch.sqrt(torch.tensor(s.alpha_bar[[10, 700]]))[:, None, None, None] * z0
    assert torch.allclose(out, expected, atol=1e-15)
    assert torch.equal(add_noise(s, z0, torch.randn_like(z0), 0), z0)


def test_add_noise_variance():
    s = NoiseSchedule()
    torch.manual_seed(0)
    for t in (50, 400, 1000):
        eps = torch.randn(10_000, dtype=torch.float64)
        zt = add_noise(s, torch.zeros_like(eps), eps, t)
        assert zt.var().item() == pytest.approx(1 - s.alpha_bar[t], rel=0.05)


def test_assemble_input():
    z_t, z_c = torch.randn(2, 48, 16, 16), torch.randn(2, 48, 16, 16)
    m = torch.ones(2, 16, 16)
    phi = assemble_input(z_t, z_c, m)
    assert phi.shape == (2, 97, 16, 16)
    assert torch.equal(phi[:, :48], z_t) and torch.equal(phi[:, 48:96], z_c) and torch.equal(phi[:, 96], m)
    with pytest.raises(ShapeError):
        assemble_input(z_t, z_c, torch.ones(2, 8, 8))


def test_denoiser_shapes_and_determinism():
    net = tiny_net().eval()
    phi = torch.randn(3, 2 * C + 1, H, H)
    b = bundle(3)
    out = net(phi, torch.tensor([1, 500, 1000]), b)
    assert out.shape == (3, C, H, H)
    assert torch.equal(out, net(phi, torch.tensor([1, 500, 1000]), b))
    with pytest.raises(ShapeError):
        net(torch.randn(1, C + 1, H, H), 5, bundle(1))


def test_null_slots_use_learned_tokens():
    net = tiny_net().eval()
    phi = torch.randn(2, 2 * C + 1, H, H)
    full = bundle(2)
    dropped = full.without("content", "structure", "defect", "global")
    flagged = ConditioningBundle(full.content_tokens, full.structure_tokens, full.defect_tokens,
                                 full.global_vec, null={s: torch.ones(2, dtype=torch.bool)
                                                        for s in ("content", "structure", "defect", "global")})
    assert torch.allclose(net(phi, 3, dropped), net(phi, 3, flagged), atol=1e-6)


def test_routing_probes():
    net = tiny_net().eval()
    names = {blk.name: blk for blk in net.attention_blocks()}
    assert names["down_high"].slots == ("structure", "defect")
    assert names["up_high"].slots == ("structure", "defect")
    assert names["mid_low"].slots == ("content", "defect")
    assert "content" not in names["down_mid"].slots and "structure" not in names["down_mid"].slots

    phi = torch.randn(2, 2 * C + 1, H, H)
    b = bundle(2)
    net.set_probe(True)

    def run(bd):
        net(phi, 7, bd)
        return {blk.name: blk.record for blk in net.attention_blocks()}

    base = run(b)
    zero_struct = run(ConditioningBundle(b.content_tokens, torch.zeros_like(b.structure_tokens),
                                         b.defect_tokens, b.global_vec))
    # same block input, changed context -> only structure-reading blocks respond
    for name, blk in names.items():
        ctx = net.contexts(ConditioningBundle(b.content_tokens, torch.zeros_like(b.structure_tokens),
                                              b.defect_tokens, b.global_vec), 2, phi.dtype)
        rec = base[name]
        changed = not torch.allclose(blk.attend(rec["input"], torch.cat([ctx[s] for s in blk.slots], 1)),
                                     rec["output"], atol=1e-7)
        assert changed == ("structure" in blk.slots), name
    # the first attention block sees identical inputs in both runs
    assert torch.equal(base["down_high"]["input"], zero_struct["down_high"]["input"])
    assert not torch.allclose(base["down_high"]["output"], zero_struct["down_high"]["output"])

    zero_content = run(ConditioningBundle(torch.zeros_like(b.content_tokens), b.structure_tokens,
                                          b.defect_tokens, b.global_vec))
    for name in ("down_high", "down_mid"):
        assert torch.equal(base[name]["output"], zero_content[name]["output"])
    assert not torch.allclose(base["mid_low"]["output"], zero_content["mid_low"]["output"])
    net.set_probe(False)


def test_loss_dp_zero_for_perfect_model():
    eps = torch.randn(2, C, H, H)
    perfect = lambda phi, t, b: eps  # noqa: E731
    phi = torch.randn(2, 2 * C + 1, H, H)
    assert loss_dp(perfect, phi, bundle(2), 5, eps).item() == 0.0


def test_predict_x0_oracle():
    s = NoiseSchedule()
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        img = torch.rand(8, 8, 3, generator=g, dtype=torch.float64)
        t = int(torch.randint(1, 1001, (1,), generator=g))
        z0 = encode(img, 2)
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        zt = add_noise(s, z0, eps, t)
        phi = assemble_input(zt, z0, torch.ones(H, H, dtype=torch.float64))
        p_hat = predict_x0(lambda *a: eps, phi, None, t, zt, s, r=2, clamp=False)
        assert (p_hat - img).abs().max().item() <= 1e-5


def test_predict_x0_conventions():
    s = NoiseSchedule()
    z = torch.randn(C, H, H, dtype=torch.float64) * 0.5
    zero = lambda *a: torch.zeros_like(z)  # noqa: E731
    assert torch.equal(predict_x0(zero, None, None, 0, z, s, r=2, clamp=False), decode(z, 2, clamp=False))
    wild = lambda *a: torch.randn_like(z) * 10  # noqa: E731
    out = predict_x0(wild, None, None, 1000, z, s, r=2)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        predict_x0(zero, None, None, 1001, z, s, r=2)


def test_cfg_identities():
    net = tiny_net(dtype=torch.float64).eval()
    phi = torch.randn(2, 2 * C + 1, H, H, dtype=torch.float64)
    b = bundle(2, dtype=torch.float64)
    pos, neg = b.positive(), b.negative()
    assert pos.defect_tokens is None and pos.content_tokens is not None
    assert neg.content_tokens is None and neg.structure_tokens is None and neg.defect_tokens is not None
    assert neg.global_vec is not None
    e1 = cfg_epsilon(net, phi, pos, neg, 1.0, 9)
    e0 = cfg_epsilon(net, phi, pos, neg, 0.0, 9)
    e2 = cfg_epsilon(net, phi, pos, neg, 2.0, 9)
    assert torch.equal(e1, net(phi, 9, pos))
    assert torch.equal(e0, net(phi, 9, neg))
    assert (e2 - e0 - 2 * (e1 - e0)).abs().max().item() <= 1e-6
    with pytest.raises(ValueError):
        cfg_epsilon(net, phi, pos, neg, -0.5, 9)


def test_sampler():
    net = tiny_net().eval()
    s = NoiseSchedule()
    z_c = encode(torch.rand(2, 8, 8, 3), 2)
    m = torch.ones(2, H, H)
    b = bundle(2)
    cfg = SamplerConfig(steps=10, seed=3)
    a = sample(net, z_c, m, b.positive(), b.negative(), cfg, s, r=2)
    assert a.shape == (2, 8, 8, 3)
    assert torch.equal(a, sample(net, z_c, m, b.positive(), b.negative(), cfg, s, r=2))
    assert a.min() >= 0 and a.max() <= 1
    ts = sample_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 1000 and ts[-1] == 1 and all(x > y for x, y in zip(ts, ts[1:]))


def test_denoiser_training_smoke():
    s = NoiseSchedule()
    net = tiny_net(seed=1)
    opt = torch.optim.Adam(net.parameters(), 2e-3)
    g = torch.Generator().manual_seed(0)
    imgs = torch.rand(4, 1, 1, 3, generator=g).expand(4, 8, 8, 3).contiguous()
    z0 = encode(imgs, 2)
    b = bundle(4)
    losses = []
    for _ in range(500):
        t = torch.randint(1, 1001, (4,), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        phi = assemble_input(add_noise(s, z0, eps, t), z0, torch.ones(4, H, H))
        loss = loss_dp(net, phi, b, t, eps, p_drop=0.1, generator=g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert np.mean(losses[-50:]) < 0.8 * np.mean(losses[:50])


def test_blended_output():
    s = NoiseSchedule()
    plain = tiny_net(3)
    torch.manual_seed(3)
    blended = DenoiserNet(latent_channels=C, content_dim=8, n_tokens=H * H, latent_hw=(H, H),
                          widths=(8, 8, 8), ctx_dim=8, time_dim=16, heads=2, groups=4,
                          alpha_bar=s.alpha_bar)
    phi = torch.randn(3, 2 * C + 1, H, H)
    t = torch.tensor([1, 400, 1000])
    b = bundle(3)
    with torch.no_grad():
        f, eps = plain(phi, t, b), blended(phi, t, b)
    ab = torch.tensor(s.alpha_bar[[1, 400, 1000]], dtype=torch.float32)[:, None, None, None]
    assert torch.allclose(eps, ab.sqrt() * f + (1 - ab).sqrt() * phi[:, :C], atol=1e-6)
    # at the last step the prediction is almost exactly the noisy latent
    assert torch.allclose(eps[2], phi[2, :C], atol=0.05)
