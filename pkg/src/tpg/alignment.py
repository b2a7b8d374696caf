"""Semi-supervised alignment losses.

One-step predictions ``P_hat`` are pulled towards the ground-truth pattern
when a sample is labeled, and towards its own clothing image (plus a labeled
reference pair from the same batch) when it is not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from tpg import BatchCompositionError, ShapeError
from tpg.codec import encode


@dataclass
class AlignmentWeights:
    std: float = 1e-4
    cls: float = 1e-4
    perceptual: float = 1e-2
    mse: float = 1e-1
    # perceptual/MSE consistency of unlabeled rows with their own clothing image
    unlabeled_consistency: bool = True

    def __post_init__(self):
        if min(self.std, self.cls, self.perceptual, self.mse) < 0:
            raise ValueError("alignment weights must be nonnegative")


@dataclass
class ClsConfig:
    n_kernels: int = 4
    kernel_size: int = 8
    stride: int = 4
    threshold: float = 0.7
    tau: float = 0.05
    eps: float = 1e-6

    @classmethod
    def for_image(cls, image_size: int, **kw) -> "ClsConfig":
        k = max(1, round(image_size / 8))
        return cls(kernel_size=k, stride=max(1, k // 2), **kw)


# ---------------------------------------------------------------------------
# STD


def loss_std(fs_c, fs_phat, fs_cr, fs_pr, reduce: bool = True) -> torch.Tensor:
    """Reference-vs-predicted shift plus the intra-domain difference term, both squared L2."""
    if not (fs_c.shape == fs_phat.shape == fs_cr.shape == fs_pr.shape):
        raise ShapeError("STD inputs must share a shape")
    v_real = fs_pr - fs_cr
    v_pred = fs_phat - fs_c
    d_gen = fs_phat - fs_pr
    d_ref = fs_c - fs_cr
    out = ((v_real - v_pred) ** 2).sum(-1) + ((d_gen - d_ref) ** 2).sum(-1)
    return out.mean() if reduce else out


# ---------------------------------------------------------------------------
# CLS


def sample_kernels(pattern: torch.Tensor, n: int, k: int, seed: int, stride: int = 1):
    """``n`` random ``k x k`` crops of an ``(H, W, 3)`` image at positions on the stride grid.

    Returns ``(kernels (n, k, k, 3), positions (n, 2))``.
    """
    h, w = pattern.shape[:2]
    if k > min(h, w):
        raise ShapeError(f"kernel size {k} exceeds image size {h}x{w}")
    rng = np.random.default_rng([int(seed), 0xC15])
    ny = (h - k) // stride + 1
    nx = (w - k) // stride + 1
    pos = np.stack([rng.integers(0, ny, n) * stride, rng.integers(0, nx, n) * stride], axis=1)
    kernels = torch.stack([pattern[y:y + k, x:x + k] for y, x in pos])
    return kernels, pos


def _similarity(images: torch.Tensor, kernels: torch.Tensor, stride: int) -> torch.Tensor:
    """Centered cosine similarity; ``images (B,H,W,3)``, ``kernels (B,N,k,k,3)`` -> ``(B,N,ny,nx)``."""
    b, h, w, _ = images.shape
    k = kernels.shape[2]
    win = F.unfold(images.permute(0, 3, 1, 2), k, stride=stride)  # (B, 3kk, nW)
    win = win - win.mean(1, keepdim=True)
    ker = kernels.permute(0, 1, 4, 2, 3).reshape(b, kernels.shape[1], -1)
    ker = ker - ker.mean(-1, keepdim=True)
    dot = torch.einsum("bnf,bfw->bnw", ker, win)
    denom = ker.norm(dim=-1)[..., None] * win.norm(dim=1)[:, None, :]
    valid = denom > 1e-10
    sim = torch.where(valid, dot / torch.where(valid, denom, torch.ones_like(denom)), torch.zeros_like(dot))
    ny = (h - k) // stride + 1
    nx = (w - k) // stride + 1
    return sim.reshape(b, -1, ny, nx)


def binarize(sim: torch.Tensor, threshold: float, mode: str = "hard", tau: float = 0.05) -> torch.Tensor:
    if mode == "hard":
        return (sim > threshold).to(sim.dtype)
    if mode == "soft":
        return torch.sigmoid((sim - threshold) / tau)
    raise ValueError(f"unknown map mode {mode!r}")


def similarity_maps(image, kernels, stride: int, threshold: float = 0.7, mode: str = "hard",
                    tau: float = 0.05) -> torch.Tensor:
    """Maps for one ``(H, W, 3)`` image and ``(N, k, k, 3)`` kernels -> ``(N, ny, nx)``."""
    sim = _similarity(image[None], kernels[None], stride)[0]
    return binarize(sim, threshold, mode, tau)


def dice_loss(pred_maps, ref_maps, eps: float = 1e-6) -> torch.Tensor:
    """Negative sum over kernels of the smoothed Dice coefficient; maps ``(B, N, ...)`` -> ``(B,)``."""
    inter = (pred_maps * ref_maps).flatten(2).sum(-1)
    total = pred_maps.flatten(2).sum(-1) + ref_maps.flatten(2).sum(-1)
    return -((2 * inter + eps) / (total + eps)).sum(-1)


def loss_cls(p_hat: torch.Tensor, p_ref: torch.Tensor, cfg: ClsConfig, seed,
             pred_mode: str = "soft", reduce: bool = True) -> torch.Tensor:
    """Local-similarity Dice loss for ``(B, H, W, 3)`` batches; kernels come from ``p_ref``.

    ``seed`` is either one int (sample ``i`` uses ``seed + i``) or a per-sample sequence.
    """
    if p_hat.shape != p_ref.shape:
        raise ShapeError("P_hat and reference differ in shape")
    single = p_hat.ndim == 3
    if single:
        p_hat, p_ref = p_hat[None], p_ref[None]
    n = p_ref.shape[0]
    seeds = [int(seed) + i for i in range(n)] if np.ndim(seed) == 0 else [int(v) for v in seed]
    kernels = torch.stack([
        sample_kernels(p_ref[i], cfg.n_kernels, cfg.kernel_size, seeds[i], cfg.stride)[0]
        for i in range(n)
    ])
    ref = binarize(_similarity(p_ref, kernels, cfg.stride), cfg.threshold, "hard")
    pred = binarize(_similarity(p_hat, kernels, cfg.stride), cfg.threshold, pred_mode, cfg.tau)
    out = dice_loss(pred, ref, cfg.eps)
    if single:
        out = out[0]
    return out.mean() if reduce else out


# ---------------------------------------------------------------------------
# perceptual proxy and pixel loss


def loss_perceptual(scm, p_hat: torch.Tensor, target: torch.Tensor, r: int = 4,
                    reduce: bool = True) -> torch.Tensor:
    """Mean squared distance of SCM encoder activations, averaged over its stages."""
    if p_hat.shape != target.shape:
        raise ShapeError("perceptual loss inputs differ in shape")
    fa = scm.encoder_stages(encode(p_hat, r))
    fb = scm.encoder_stages(encode(target, r))
    per = torch.stack([((a - b) ** 2).flatten(1).mean(1) for a, b in zip(fa, fb)]).mean(0)
    return per.mean() if reduce else per


def loss_mse(p_hat: torch.Tensor, target: torch.Tensor, reduce: bool = True) -> torch.Tensor:
    if p_hat.shape != target.shape:
        raise ShapeError("mse inputs differ in shape")
    per = ((p_hat - target) ** 2).reshape(p_hat.shape[0], -1).mean(1) if p_hat.ndim == 4 else \
        ((p_hat - target) ** 2).mean()[None]
    return per.mean() if reduce else per


# ---------------------------------------------------------------------------
# batch assembly


def reference_indices(labeled: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """For each sample, a labeled index drawn uniformly, excluding itself when possible."""
    lab = np.flatnonzero(labeled.numpy())
    if lab.size == 0:
        raise BatchCompositionError("alignment needs at least one labeled sample in the batch")
    out = np.empty(len(labeled), dtype=np.int64)
    for i in range(len(labeled)):
        pool = lab[lab != i]
        if pool.size == 0:
            pool = lab
        out[i] = pool[rng.integers(0, pool.size)]
    return torch.from_numpy(out)


@dataclass
class AlignmentBatch:
    """Tensors for one mixed mini-batch. ``pattern`` rows of unlabeled samples are ignored."""

    clothing: torch.Tensor  # (B, H, W, 3)
    pattern: torch.Tensor  # (B, H, W, 3)
    mask: torch.Tensor  # (B, H, W)
    labeled: torch.Tensor  # (B,) bool
    ref_index: torch.Tensor | None = None  # (B,) labeled partner used for STD / unlabeled CLS

    def __len__(self) -> int:
        return self.clothing.shape[0]


def alignment_terms(ldn, p_hat, batch: AlignmentBatch, cls_cfg: ClsConfig, seed,
                    weights: AlignmentWeights, r: int = 4) -> dict[str, torch.Tensor]:
    """Per-sample unweighted alignment terms; terms whose weight is zero are returned as zeros."""
    if batch.ref_index is None:
        raise BatchCompositionError("alignment batch has no reference pairs")
    lab = batch.labeled[:, None, None, None]
    target = torch.where(lab, batch.pattern, batch.clothing)
    cls_ref = torch.where(lab, batch.pattern, batch.pattern[batch.ref_index])
    zeros = torch.zeros(len(batch), dtype=p_hat.dtype)
    terms = {}
    if weights.std > 0:
        with torch.no_grad():
            fs_c = ldn.scm(encode(batch.clothing, r))[1]
            fs_cr = fs_c[batch.ref_index]
            fs_pr = ldn.scm(encode(batch.pattern[batch.ref_index], r))[1]
        fs_phat = ldn.scm(encode(p_hat, r))[1]
        terms["std"] = loss_std(fs_c, fs_phat, fs_cr, fs_pr, reduce=False)
    else:
        terms["std"] = zeros
    terms["cls"] = loss_cls(p_hat, cls_ref, cls_cfg, seed, reduce=False) if weights.cls > 0 else zeros
    terms["perceptual"] = (loss_perceptual(ldn.scm, p_hat, target, r, reduce=False)
                           if weights.perceptual > 0 else zeros)
    terms["mse"] = loss_mse(p_hat, target, reduce=False) if weights.mse > 0 else zeros
    if not weights.unlabeled_consistency:
        keep = batch.labeled.to(p_hat.dtype)
        terms["perceptual"] = terms["perceptual"] * keep
        terms["mse"] = terms["mse"] * keep
    return terms


def loss_ap(terms: dict[str, torch.Tensor], weights: AlignmentWeights) -> dict[str, torch.Tensor]:
    """Weighted per-sample alignment loss; returns the weighted terms and ``total``."""
    out = {
        "std": weights.std * terms["std"],
        "cls": weights.cls * terms["cls"],
        "perceptual": weights.perceptual * terms["perceptual"],
        "mse": weights.mse * terms["mse"],
    }
    out["total"] = out["std"] + out["cls"] + out["perceptual"] + out["mse"]
    return out


# ---------------------------------------------------------------------------
# total stage-II objective


@dataclass
class StepNoise:
    """Per-sample random draws for one training step (rows are independent of batch makeup)."""

    t_dp: torch.Tensor
    eps_dp: torch.Tensor
    t_ap: torch.Tensor
    eps_ap: torch.Tensor
    drop: dict[str, torch.Tensor]
    cls_seeds: list[int]

    def index(self, idx) -> "StepNoise":
        idx_list = idx.tolist() if torch.is_tensor(idx) else list(idx)
        return StepNoise(self.t_dp[idx], self.eps_dp[idx], self.t_ap[idx], self.eps_ap[idx],
                         {k: v[idx] for k, v in self.drop.items()},
                         [self.cls_seeds[i] for i in idx_list])


def draw_step_noise(batch_size: int, latent_shape, schedule, align_t_max: int, p_drop: float,
                    generator: torch.Generator, drop_slots=("content", "structure", "defect", "global"),
                    dtype=torch.float32) -> StepNoise:
    from tpg.diffusion import SLOTS

    g = generator
    t_dp = torch.randint(1, schedule.T + 1, (batch_size,), generator=g)
    eps_dp = torch.randn((batch_size, *latent_shape), generator=g, dtype=dtype)
    t_ap = torch.randint(1, align_t_max + 1, (batch_size,), generator=g)
    eps_ap = torch.randn((batch_size, *latent_shape), generator=g, dtype=dtype)
    drop = {}
    for s in SLOTS:
        d = torch.rand(batch_size, generator=g) < p_drop
        if s in drop_slots:
            drop[s] = d
    seeds = torch.randint(0, 2**31 - 1, (batch_size,), generator=g).tolist()
    return StepNoise(t_dp, eps_dp, t_ap, eps_ap, drop, seeds)


def loss_sldm_total(model, ldn, schedule, batch: AlignmentBatch, latents: dict[str, torch.Tensor],
                    bundle, noise: StepNoise, weights: AlignmentWeights | None, cls_cfg: ClsConfig,
                    r: int = 4) -> dict[str, torch.Tensor]:
    """Mean denoising loss over labeled rows plus mean alignment loss over all rows.

    ``latents`` holds ``z_c``, ``z_p`` (rows of unlabeled samples unused) and the
    latent-resolution ``mask``. ``weights=None`` disables the alignment process.
    """
    from tpg.diffusion import ConditioningBundle, add_noise, assemble_input

    if len(batch) == 0:
        raise BatchCompositionError("empty batch")
    lab = torch.nonzero(batch.labeled).flatten()
    if lab.numel() == 0:
        raise BatchCompositionError("batch has no labeled sample")
    z_c, z_p, m = latents["z_c"], latents["z_p"], latents["mask"]

    z_t_dp = add_noise(schedule, z_p[lab], noise.eps_dp[lab], noise.t_dp[lab])
    phi_dp = assemble_input(z_t_dp, z_c[lab], m[lab])
    b_dp = bundle.index(lab)
    b_dp.null = {k: v[lab] | b_dp.null[k] if k in b_dp.null else v[lab] for k, v in noise.drop.items()}
    parts_phi, parts_t, parts_b = [phi_dp], [noise.t_dp[lab]], [b_dp]

    align = weights is not None
    if align:
        z_star = torch.where(batch.labeled[:, None, None, None], z_p, z_c)
        z_t_ap = add_noise(schedule, z_star, noise.eps_ap, noise.t_ap)
        parts_phi.append(assemble_input(z_t_ap, z_c, m))
        parts_t.append(noise.t_ap)
        parts_b.append(bundle)

    eps_all = model(torch.cat(parts_phi), torch.cat(parts_t), ConditioningBundle.concat(parts_b))
    n_dp = lab.numel()
    dp = ((eps_all[:n_dp] - noise.eps_dp[lab]) ** 2).flatten(1).mean(1)
    out = {"dp": dp.mean(), "dp_per_sample": dp}
    zero = torch.zeros((), dtype=dp.dtype)
    if not align:
        out.update(std=zero, cls=zero, perceptual=zero, mse=zero, ap=zero)
        out["total"] = out["dp"]
        return out

    a, s = schedule.coefficients(noise.t_ap, z_t_ap)
    p_hat = decode_clamped((z_t_ap - s * eps_all[n_dp:]) / a, r)
    terms = alignment_terms(ldn, p_hat, batch, cls_cfg, noise.cls_seeds, weights, r)
    ap = loss_ap(terms, weights)
    out.update({k: ap[k].mean() for k in ("std", "cls", "perceptual", "mse")})
    out["ap"] = ap["total"].mean()
    out["ap_per_sample"] = ap["total"]
    out["total"] = out["dp"] + out["ap"]
    out["p_hat"] = p_hat
    return out


def decode_clamped(z0: torch.Tensor, r: int) -> torch.Tensor:
    from tpg.codec import decode

    return decode(z0, r, clamp=True)
