"""Evaluation metrics and reports.

Images are ``(H, W, 3)`` arrays or tensors in [0, 1]. SSIM and FPS are
computed in float64; CTS and VLS use the frozen stage-I network.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from tpg import MetricUndefinedError, ShapeError
from tpg.alignment import loss_perceptual
from tpg.codec import encode

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _f64(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).detach().to(torch.float64)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_map(a, b, win: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-pixel SSIM over valid window positions, shape ``(3, H-win+1, W-win+1)``."""
    a, b = _f64(a), _f64(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = torch.stack([a, b]).permute(0, 3, 1, 2).reshape(-1, 1, *a.shape[:2])  # (2*3, 1, H, W)
    g = _gaussian_window(win, sigma)

    def blur(y):
        y = F.conv2d(y, g.view(1, 1, 1, -1))
        return F.conv2d(y, g.view(1, 1, -1, 1))

    c = a.shape[-1]
    xa, xb = x[:c], x[c:]
    mu_a, mu_b = blur(xa), blur(xb)
    var_a = blur(xa * xa) - mu_a**2
    var_b = blur(xb * xb) - mu_b**2
    cov = blur(xa * xb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den)[:, 0]


def ssim(a, b) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels."""
    return float(ssim_map(a, b).mean())


def periodicity_signature(image) -> torch.Tensor:
    """Unit vector of log-magnitude spectrum of the grayscale image, DC bin removed."""
    g = _f64(image)
    if g.ndim == 3:
        g = g.mean(-1)
    mag = torch.fft.rfft2(g).abs()
    sig = torch.log1p(mag).flatten()[1:]
    n = sig.norm()
    if n <= 1e-12:
        raise MetricUndefinedError("periodicity signature undefined for a constant image")
    return sig / n


def fps(generated, reference) -> float:
    """Fourier periodic similarity: cosine of the two periodicity signatures."""
    if tuple(np.shape(generated)) != tuple(np.shape(reference)):
        raise ShapeError("fps inputs differ in shape")
    return float((periodicity_signature(generated) * periodicity_signature(reference)).sum())


@torch.no_grad()
def cts(image_a, image_b, ldn, r: int = 4) -> float:
    """Cosine of pooled content features; needs a frozen stage-I network."""
    x = torch.stack([torch.as_tensor(image_a, dtype=torch.float32),
                     torch.as_tensor(image_b, dtype=torch.float32)])
    pooled = ldn.extract_content(encode(x, r)).pooled
    return float((pooled[0] * pooled[1]).sum())


@torch.no_grad()
def cts_batch(images_a: torch.Tensor, images_b: torch.Tensor, ldn, r: int = 4) -> torch.Tensor:
    pa = ldn.extract_content(encode(images_a, r)).pooled
    pb = ldn.extract_content(encode(images_b, r)).pooled
    return (pa * pb).sum(-1)


@torch.no_grad()
def vls(generated, reference, ldn, r: int = 4) -> tuple[float, float]:
    """``(pixel mse, frozen-SCM perceptual distance)``."""
    a = torch.as_tensor(generated, dtype=torch.float32)
    b = torch.as_tensor(reference, dtype=torch.float32)
    if a.shape != b.shape:
        raise ShapeError("vls inputs differ in shape")
    mse = float(((_f64(a) - _f64(b)) ** 2).mean())
    return mse, float(loss_perceptual(ldn.scm, a[None], b[None], r))


# ---------------------------------------------------------------------------
# feature distribution analysis


def centroid_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    """Euclidean distance between the means of two feature sets (first axis = samples)."""
    return float((_f64(a).mean(0) - _f64(b).mean(0)).norm())


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal axes."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt[:2].T


@torch.no_grad()
def feature_distance_report(z_c: torch.Tensor, z_p: torch.Tensor, ldns: list, labels: list | None = None,
                            projection: bool = True) -> dict:
    """Centroid distances per stage-I network, plus 2-D projections for the last one.

    ``ldns`` is a series of frozen networks (e.g. checkpoints over training).
    """
    labels = labels or [str(i) for i in range(len(ldns))]
    entries = []
    last = None
    for name, ldn in zip(labels, ldns):
        _, f_tc, f_ac = ldn.features(z_c)
        _, f_tp, _ = ldn.features(z_p)
        entries.append({
            "checkpoint": name,
            "structured_to_pattern": centroid_distance(f_ac.flatten(1), f_tp.flatten(1)),
            "defect_to_pattern": centroid_distance(f_tc.flatten(1), f_tp.flatten(1)),
        })
        last = (f_ac, f_tc, f_tp)
    report = {"count": int(len(z_c)), "series": entries}
    if projection and last is not None and len(z_c) > 0:
        n = len(z_c)
        stacked = torch.cat([f.flatten(1) for f in last]).numpy()
        xy = pca_2d(stacked)
        report["projection"] = {
            "structured_clothing": xy[:n].tolist(),
            "defect_clothing": xy[n:2 * n].tolist(),
            "defect_pattern": xy[2 * n:].tolist(),
        }
    return report


# ---------------------------------------------------------------------------
# dataset evaluation

METRIC_KEYS = ("ssim", "fps", "cts", "vls_mse", "vls_perceptual", "input_ssim", "input_fps")


def _safe(fn, errors: dict, key: str):
    try:
        return fn()
    except MetricUndefinedError as e:
        errors[key] = e.code
        return None


def sample_metrics(generated, clothing, pattern, labeled: bool, ldn, r: int = 4) -> dict:
    """Metrics for one sample. Labeled rows compare against the pattern, others against the clothing."""
    errors: dict = {}
    ref = pattern if labeled else clothing
    m = {k: None for k in METRIC_KEYS}
    m["cts"] = cts(generated, ref, ldn, r)
    m["vls_mse"], m["vls_perceptual"] = vls(generated, ref, ldn, r)
    if labeled:
        m["ssim"] = ssim(generated, pattern)
        m["fps"] = _safe(lambda: fps(generated, pattern), errors, "fps")
        m["input_ssim"] = ssim(clothing, pattern)
        m["input_fps"] = _safe(lambda: fps(clothing, pattern), errors, "input_fps")
    if errors:
        m["errors"] = errors
    return m


def summarize(samples: list[dict]) -> dict:
    means = {}
    for k in METRIC_KEYS:
        vals = [s["metrics"][k] for s in samples if s["metrics"].get(k) is not None]
        if vals:
            means[k] = math.fsum(vals) / len(vals)
    return means


def evaluate_dataset(data, generator, output_path: str | Path | None = None, batch_size: int = 50,
                     image_dir: str | Path | None = None) -> dict:
    """Generate a pattern per sample and score it; writes a JSON report if a path is given.

    ``data`` is a ``DatasetArrays``; ``generator`` a ``PatternGenerator``. The
    sampling seed of sample ``i`` is ``i`` so results do not depend on batching.
    """
    from tpg.data import quantize

    r = generator.run.sldm.codec_factor
    samples = []
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        it = torch.tensor(idx)
        gen = generator.generate(data.clothing[it], data.mask[it], seeds=idx)
        gen = torch.from_numpy(quantize(gen.numpy()))
        for j, i in enumerate(idx):
            entry = {"sample_id": data.sample_ids[i], "labeled": bool(data.labeled[i])}
            try:
                entry["metrics"] = sample_metrics(gen[j], data.clothing[i], data.pattern[i],
                                                  entry["labeled"], generator.ldn, r)
            except Exception as e:  # recorded per sample, never fatal
                entry["metrics"] = {k: None for k in METRIC_KEYS}
                entry["error"] = f"{type(e).__name__}: {e}"
            samples.append(entry)
            if image_dir is not None:
                from tpg.data import _save_rgb

                Path(image_dir).mkdir(parents=True, exist_ok=True)
                _save_rgb(Path(image_dir) / f"{data.sample_ids[i]}_generated.png", gen[j].numpy())
    report = {
        "config": generator.run.to_dict(),
        "count": len(samples),
        "means": summarize(samples),
        "external": {"fid": None, "lpips": None},
        "samples": samples,
    }
    if output_path is not None:
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report
