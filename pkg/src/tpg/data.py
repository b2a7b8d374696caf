"""Procedural paired pattern / clothing images standing in for a real garment dataset.

Patterns are built on a single ``tile_period`` tile and tiled, so they are
exactly periodic. Clothing images are produced from a pattern by a fixed chain
of degradations (warp, patchwise blur, dark folds, shading, silhouette mask).
Everything is a pure function of ``(config, seed)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from tpg import ConfigError, DatasetError

MOTIF_FAMILIES = ("dots", "stripes", "blobs", "grid", "mixed")
BACKGROUND = 0.5


@dataclass
class SyntheticConfig:
    image_size: int = 64
    tile_period: int = 16
    motif_family: str = "mixed"
    warp_amplitude: float = 3.0
    blur_sigma_range: tuple[float, float] = (0.3, 1.5)
    occlusion_count_range: tuple[int, int] = (0, 3)
    shading_amplitude: float = 0.1
    labeled_count: int = 500
    unlabeled_count: int = 500
    seed: int = 0

    def __post_init__(self):
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.occlusion_count_range = tuple(int(v) for v in self.occlusion_count_range)
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.tile_period <= 0:
            raise ConfigError("image_size and tile_period must be positive")
        if self.image_size % self.tile_period:
            raise ConfigError(
                f"tile_period {self.tile_period} does not divide image_size {self.image_size}"
            )
        if self.motif_family not in MOTIF_FAMILIES:
            raise ConfigError(f"unknown motif_family {self.motif_family!r}")
        if not 0 <= self.warp_amplitude < self.tile_period / 2:
            raise ConfigError("warp_amplitude must lie in [0, tile_period/2)")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ConfigError("blur_sigma_range must satisfy 0 <= lo <= hi")
        lo, hi = self.occlusion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError("occlusion_count_range must satisfy 0 <= lo <= hi")
        if self.shading_amplitude < 0 or self.shading_amplitude >= 1:
            raise ConfigError("shading_amplitude must lie in [0, 1)")
        if self.labeled_count < 0 or self.unlabeled_count < 0:
            raise ConfigError("sample counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        d["occlusion_count_range"] = list(self.occlusion_count_range)
        return d


@dataclass
class PairedSample:
    clothing: np.ndarray
    pattern: np.ndarray
    mask: np.ndarray
    sample_id: str
    seed: int
    labeled: bool = field(default=True, init=False)


@dataclass
class UnlabeledSample:
    clothing: np.ndarray
    mask: np.ndarray
    sample_id: str
    seed: int = 0
    labeled: bool = field(default=False, init=False)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def _random_palette(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` RGB colours, the first one a background with spread-out lightness."""
    hues = (rng.uniform() + np.arange(n) / n + rng.uniform(-0.08, 0.08, n)) % 1.0
    sats = rng.uniform(0.35, 0.9, n)
    vals = rng.uniform(0.35, 0.95, n)
    vals[0] = rng.choice([rng.uniform(0.15, 0.35), rng.uniform(0.75, 0.95)])
    out = np.empty((n, 3))
    for i, (h, s, v) in enumerate(zip(hues, sats, vals)):
        k = (np.array([5.0, 3.0, 1.0]) + h * 6) % 6
        out[i] = v - v * s * np.clip(np.minimum(k, 4 - k), 0, 1)
    return out


def _soft_step(x: np.ndarray, edge: float) -> np.ndarray:
    return np.clip(x / edge + 0.5, 0.0, 1.0)


def _torus_grid(p: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:p, 0:p].astype(np.float64)
    return y / p, x / p


def _tile_stripes(rng, p, colors):
    y, x = _torus_grid(p)
    coord = x if rng.uniform() < 0.5 else y
    wave = np.cos(2 * np.pi * coord + rng.uniform(0, 2 * np.pi))
    duty = rng.uniform(-0.3, 0.3)
    w = _soft_step(wave - duty, 0.35)[..., None]
    return colors[0] * (1 - w) + colors[1] * w


def _tile_dots(rng, p, colors):
    y, x = _torus_grid(p)
    img = np.broadcast_to(colors[0], (p, p, 3)).copy()
    for i in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, 1, 2)
        radius = rng.uniform(0.12, 0.26)
        dy = np.abs(y - cy)
        dx = np.abs(x - cx)
        d = np.hypot(np.minimum(dy, 1 - dy), np.minimum(dx, 1 - dx))
        w = _soft_step(radius - d, 1.5 / p)[..., None]
        img = img * (1 - w) + colors[1 + i % (len(colors) - 1)] * w
    return img


def _tile_blobs(rng, p, colors):
    y, x = _torus_grid(p)
    field_ = np.zeros((p, p))
    for ky in range(-3, 4):
        for kx in range(0, 4):
            if (kx, ky) == (0, 0) or (kx == 0 and ky < 0):
                continue
            amp = rng.normal() / (1.0 + kx * kx + ky * ky)
            field_ += amp * np.cos(2 * np.pi * (kx * x + ky * y) + rng.uniform(0, 2 * np.pi))
    field_ /= np.abs(field_).max() + 1e-12
    thr = np.quantile(field_, rng.uniform(0.35, 0.65))
    w1 = _soft_step(field_ - thr, 0.15)[..., None]
    img = colors[0] * (1 - w1) + colors[1] * w1
    thr2 = np.quantile(field_, 0.9)
    w2 = _soft_step(field_ - thr2, 0.1)[..., None]
    return img * (1 - w2) + colors[2 % len(colors)] * w2


def _tile_grid(rng, p, colors):
    y, x = _torus_grid(p)
    width = rng.uniform(0.1, 0.25)
    oy, ox = rng.uniform(0, 1, 2)
    dy = np.abs((y - oy + 0.5) % 1.0 - 0.5)
    dx = np.abs((x - ox + 0.5) % 1.0 - 0.5)
    wy = _soft_step(width / 2 - dy, 1.5 / p)[..., None]
    wx = _soft_step(width / 2 - dx, 1.5 / p)[..., None]
    img = colors[0] * (1 - wy) + colors[1] * wy
    return img * (1 - wx) + colors[2 % len(colors)] * wx


_TILE_BUILDERS = {
    "dots": _tile_dots,
    "stripes": _tile_stripes,
    "blobs": _tile_blobs,
    "grid": _tile_grid,
}


def generate_pattern(config: SyntheticConfig, seed: int) -> np.ndarray:
    """Exactly tileable H x W x 3 pattern in [0, 1] (float32)."""
    config.validate()
    rng = _rng(seed, 0x9A77)
    family = config.motif_family
    if family == "mixed":
        family = ("dots", "stripes", "blobs", "grid")[int(rng.integers(0, 4))]
    p = config.tile_period
    colors = _random_palette(rng, 3)
    tile = _TILE_BUILDERS[family](rng, p, colors)
    reps = config.image_size // p
    return np.clip(np.tile(tile, (reps, reps, 1)), 0.0, 1.0).astype(np.float32)


def _smooth_field(rng: np.random.Generator, size: int, modes: int = 3) -> np.ndarray:
    """Random low-frequency field on [0, size)^2, scaled to max |value| = 1."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.zeros((size, size))
    for _ in range(modes):
        fy, fx = rng.uniform(0.3, 1.6, 2) * rng.choice([-1, 1], 2)
        out += rng.normal() * np.cos(2 * np.pi * (fy * y + fx * x) + rng.uniform(0, 2 * np.pi))
    return out / (np.abs(out).max() + 1e-12)


def garment_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary T-shirt-like silhouette: a superellipse torso plus two sleeves."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size - 0.5
    a = rng.uniform(0.28, 0.42)
    b = rng.uniform(0.36, 0.46)
    n = rng.uniform(3.0, 6.0)
    cy = rng.uniform(-0.03, 0.03)
    torso = np.abs(x / a) ** n + np.abs((y - cy) / b) ** n <= 1.0
    sleeve_h = rng.uniform(0.12, 0.2)
    sleeve_w = rng.uniform(0.06, 0.1)
    top = cy - b * 0.9
    sleeves = (
        (y >= top)
        & (y <= top + sleeve_h + 0.3 * (np.abs(x) - a))
        & (np.abs(x) >= a * 0.7)
        & (np.abs(x) <= a + sleeve_w)
    )
    return (torso | sleeves).astype(np.float32)


def degrade_to_clothing(
    pattern: np.ndarray, config: SyntheticConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Turn a flat pattern into a "worn" clothing image and its garment mask.

    Order: smooth displacement warp, patchwise blur, dark folds, multiplicative
    shading, silhouette mask (background 0.5 outside).
    """
    config.validate()
    rng = _rng(seed, 0xC107)
    size = pattern.shape[0]
    img = pattern.astype(np.float64)

    # Draw every random quantity unconditionally so that changing one
    # amplitude leaves the other degradations untouched.
    dy, dx = _smooth_field(rng, size), _smooth_field(rng, size)
    mag = np.hypot(dy, dx).max() + 1e-12
    n_patch = 4
    sigmas = rng.uniform(*config.blur_sigma_range, size=(n_patch, n_patch))
    lo, hi = config.occlusion_count_range
    n_occ = int(rng.integers(lo, hi + 1))
    folds = [
        (rng.uniform(0.15, 0.85, 2) * size, rng.uniform(0, np.pi), rng.uniform(0.3, 0.7) * size,
         rng.uniform(1.0, 2.5), rng.uniform(0.55, 0.8))
        for _ in range(n_occ)
    ]
    shade = _smooth_field(rng, size, modes=2)
    mask = garment_mask(size, rng)

    if config.warp_amplitude > 0:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        scale = config.warp_amplitude / mag
        coords = [yy + scale * dy, xx + scale * dx]
        img = np.stack(
            [ndimage.map_coordinates(img[..., ch], coords, order=1, mode="grid-wrap")
             for ch in range(3)],
            axis=-1,
        )

    ps = size // n_patch
    blurred = img.copy()
    for i in range(n_patch):
        for j in range(n_patch):
            s = sigmas[i, j]
            if s <= 0:
                continue
            region = (slice(i * ps, (i + 1) * ps), slice(j * ps, (j + 1) * ps))
            full = ndimage.gaussian_filter(img, sigma=(s, s, 0), mode="wrap")
            blurred[region] = full[region]
    img = blurred

    if folds:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        factor = np.ones((size, size))
        for (cy, cx), ang, length, width, dark in folds:
            uy, ux = np.sin(ang), np.cos(ang)
            along = (yy - cy) * uy + (xx - cx) * ux
            across = -(yy - cy) * ux + (xx - cx) * uy
            inside = np.clip(1.0 - np.maximum(np.abs(along) - length / 2, 0) / 2.0, 0, 1)
            factor *= 1.0 - (1.0 - dark) * inside * np.exp(-(across**2) / (2 * width**2))
        img = img * factor[..., None]

    if config.shading_amplitude > 0:
        img = img * (1.0 + config.shading_amplitude * shade)[..., None]

    img = np.clip(img, 0.0, 1.0)
    img = np.where(mask[..., None] > 0, img, BACKGROUND)
    return img.astype(np.float32), mask


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk."""
    return (np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).astype(np.float32) / 255


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1)[0])


def make_sample(config: SyntheticConfig, seed: int, sample_id: str, labeled: bool):
    pattern = generate_pattern(config, seed)
    clothing, mask = degrade_to_clothing(pattern, config, seed)
    if labeled:
        return PairedSample(clothing, pattern, mask, sample_id, seed)
    return UnlabeledSample(clothing, mask, sample_id, seed)


def _save_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).astype(np.float32) / 255


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L"), dtype=np.uint8) >= 128).astype(np.float32)


def build_dataset(config: SyntheticConfig, out_dir: str | Path) -> Path:
    """Write PNGs plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    config.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    total = config.labeled_count + config.unlabeled_count
    for index in range(total):
        labeled = index < config.labeled_count
        sid = f"{'L' if labeled else 'U'}{index:05d}"
        seed = sample_seed(config.seed, index)
        s = make_sample(config, seed, sid, labeled)
        rec = {
            "sample_id": sid,
            "clothing_path": f"images/{sid}_clothing.png",
            "pattern_path": f"images/{sid}_pattern.png" if labeled else None,
            "mask_path": f"images/{sid}_mask.png",
            "labeled": labeled,
            "seed": seed,
        }
        _save_rgb(out / rec["clothing_path"], s.clothing)
        _save_mask(out / rec["mask_path"], s.mask)
        if labeled:
            _save_rgb(out / rec["pattern_path"], s.pattern)
        records.append(rec)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "data_config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return manifest


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_dataset(path: str | Path) -> Iterator[PairedSample | UnlabeledSample]:
    """Iterate samples from a manifest. All files are checked before the first yield."""
    path = Path(path)
    root = path.parent
    records = read_manifest(path)
    missing = []
    for rec in records:
        keys = ["clothing_path", "mask_path"] + (["pattern_path"] if rec["labeled"] else [])
        if any(rec.get(k) is None or not (root / rec[k]).exists() for k in keys):
            missing.append(rec["sample_id"])
    if missing:
        raise DatasetError(f"missing files for samples: {', '.join(missing)}")

    def _iter():
        for rec in records:
            clothing = load_rgb(root / rec["clothing_path"])
            mask = load_mask(root / rec["mask_path"])
            if rec["labeled"]:
                yield PairedSample(clothing, load_rgb(root / rec["pattern_path"]), mask,
                                   rec["sample_id"], rec["seed"])
            else:
                yield UnlabeledSample(clothing, mask, rec["sample_id"], rec["seed"])

    return _iter()
