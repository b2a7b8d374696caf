import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from tpg import ConfigError, DatasetError
from tpg.data import (
    SyntheticConfig,
    build_dataset,
    degrade_to_clothing,
    generate_pattern,
    load_dataset,
    make_sample,
    quantize,
    read_manifest,
    sample_seed,
)


def masked_ssim(a, b, mask):
    _, smap = structural_similarity(a, b, channel_axis=-1, data_range=1.0, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False, full=True)
    return float(smap.mean(-1)[mask > 0].mean())


@pytest.mark.parametrize("family", ["dots", "stripes", "blobs", "grid", "mixed"])
def test_pattern_tileable(family):
    cfg = SyntheticConfig(motif_family=family)
    for seed in range(5):
        p = generate_pattern(cfg, seed)
        assert p.shape == (64, 64, 3) and p.dtype == np.float32
        assert 0 <= p.min() and p.max() <= 1
        for axis in (0, 1):
            assert np.abs(np.roll(p, cfg.tile_period, axis=axis) - p).max() <= 1e-6


def test_pattern_deterministic():
    cfg = SyntheticConfig()
    assert generate_pattern(cfg, 7).tobytes() == generate_pattern(cfg, 7).tobytes()
    assert generate_pattern(cfg, 7).tobytes() != generate_pattern(cfg, 8).tobytes()


def test_stripes_fft_peak():
    cfg = SyntheticConfig(motif_family="stripes")
    expected = cfg.image_size // cfg.tile_period
    for seed in range(10):
        g = generate_pattern(cfg, seed).mean(-1)
        mag = np.abs(np.fft.fft2(g - g.mean()))
        # the peak lies on a harmonic-1 lattice point of the tile
        ky, kx = np.unravel_index(np.argmax(mag), mag.shape)
        f = np.array([min(ky, 64 - ky), min(kx, 64 - kx)])
        assert f.max() == expected, (seed, f)


def test_invalid_config():
    with pytest.raises(ConfigError):
        SyntheticConfig(image_size=64, tile_period=10)
    with pytest.raises(ConfigError):
        SyntheticConfig(warp_amplitude=8.0)
    with pytest.raises(ConfigError):
        SyntheticConfig(labeled_count=-1)
    with pytest.raises(ConfigError):
        SyntheticConfig(motif_family="paisley")


def test_identity_degradation():
    cfg = SyntheticConfig(warp_amplitude=0, blur_sigma_range=(0, 0), occlusion_count_range=(0, 0),
                          shading_amplitude=0)
    for seed in range(5):
        p = generate_pattern(cfg, seed)
        c, m = degrade_to_clothing(p, cfg, seed)
        inside = m > 0
        assert np.array_equal(c[inside], p[inside])
        assert np.all(c[~inside] == 0.5)


def test_default_degradation_nontrivial():
    cfg = SyntheticConfig()
    for seed in range(10):
        p = generate_pattern(cfg, seed)
        c, m = degrade_to_clothing(p, cfg, seed)
        assert masked_ssim(c, p, m) < 0.9


def test_sample_invariants():
    cfg = SyntheticConfig()
    for i in range(50):
        s = make_sample(cfg, sample_seed(0, i), f"L{i}", True)
        cover = s.mask.mean()
        assert 0.3 <= cover <= 0.9
        inside = s.mask > 0
        diff = np.abs(s.clothing[inside].mean(0) - s.pattern.mean((0, 1))).mean()
        assert diff <= 0.1


def test_warp_monotone():
    base = SyntheticConfig()
    amps = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
    means = []
    for a in amps:
        cfg = SyntheticConfig(warp_amplitude=a)
        vals = []
        for seed in range(20):
            p = generate_pattern(base, seed)
            c, m = degrade_to_clothing(p, cfg, seed)
            vals.append(masked_ssim(c, p, m))
        means.append(np.mean(vals))
    assert all(b <= a + 1e-12 for a, b in zip(means, means[1:])), means


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), period=st.sampled_from([4, 8, 16, 32]))
def test_tileable_property(seed, period):
    cfg = SyntheticConfig(tile_period=period, warp_amplitude=min(1.0, period / 2 - 0.5))
    p = generate_pattern(cfg, seed)
    assert np.abs(np.roll(p, period, axis=0) - p).max() <= 1e-6
    assert np.abs(np.roll(p, period, axis=1) - p).max() <= 1e-6


def test_build_and_load(tmp_path):
    cfg = SyntheticConfig(labeled_count=2, unlabeled_count=3, seed=5)
    manifest = build_dataset(cfg, tmp_path / "a")
    recs = read_manifest(manifest)
    assert len(recs) == 5
    assert sum(r["pattern_path"] is not None for r in recs) == 2
    assert {"sample_id", "clothing_path", "pattern_path", "mask_path", "labeled", "seed"} <= set(recs[0])

    samples = list(load_dataset(manifest))
    for s, r in zip(samples, recs):
        ref = make_sample(cfg, r["seed"], r["sample_id"], r["labeled"])
        assert np.array_equal(s.clothing, quantize(ref.clothing))
        assert np.array_equal(s.mask, ref.mask)
        if r["labeled"]:
            assert np.array_equal(s.pattern, quantize(ref.pattern))

    manifest_b = build_dataset(cfg, tmp_path / "b")
    assert manifest.read_bytes() == manifest_b.read_bytes()


def test_missing_files_reported(tmp_path):
    cfg = SyntheticConfig(labeled_count=2, unlabeled_count=1)
    manifest = build_dataset(cfg, tmp_path)
    rec = read_manifest(manifest)[1]
    (tmp_path / rec["clothing_path"]).unlink()
    with pytest.raises(DatasetError, match=rec["sample_id"]):
        load_dataset(manifest)


def test_manifest_is_jsonl(tmp_path):
    manifest = build_dataset(SyntheticConfig(labeled_count=1, unlabeled_count=1), tmp_path)
    lines = manifest.read_text().strip().splitlines()
    assert [json.loads(x)["labeled"] for x in lines] == [True, False]
