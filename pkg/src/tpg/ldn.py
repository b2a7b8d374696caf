"""Latent disentangled network.

Three parts operate on codec latents:

* ``ScmNetwork`` - SimSiam-style content extractor trained on (clothing,
  pattern) view pairs with a stop-gradient target.
* ``RamStack`` - cross-attention with *reversed* weights; content tokens query
  the latent and the residual output is the defect feature ``f_T``.
* ``SatStack`` - depthwise filter units mapping ``f_T`` of a clothing image
  towards the structured feature of its pattern (``f_A``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tpg import ShapeError, StateError


@dataclass
class ContentFeature:
    token_map: torch.Tensor  # (B, L, d)
    pooled: torch.Tensor  # (B, d), unit norm


def _unit(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    n = v.norm(dim=-1, keepdim=True)
    if bool((n <= eps).any()):
        raise ValueError("cannot normalize a zero-norm vector")
    return v / n


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (_unit(a) * _unit(b)).sum(-1)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentParams:
    crop_scale: float = 1.0
    crop_aspect: float = 1.0
    crop_y: float = 0.5  # relative offset of the crop inside the free margin
    crop_x: float = 0.5
    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0
    brightness: float = 1.0
    contrast: float = 1.0


def sample_augment_params(seed: int) -> AugmentParams:
    rng = np.random.default_rng([int(seed), 0xA06])
    return AugmentParams(
        crop_scale=float(rng.uniform(0.6, 1.0)),
        crop_aspect=float(np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))),
        crop_y=float(rng.uniform()),
        crop_x=float(rng.uniform()),
        flip_h=bool(rng.uniform() < 0.5),
        flip_v=bool(rng.uniform() < 0.5),
        rot90=int(rng.integers(0, 4)),
        brightness=float(rng.uniform(0.9, 1.1)),
        contrast=float(rng.uniform(0.9, 1.1)),
    )


def apply_augment(image: torch.Tensor, p: AugmentParams) -> torch.Tensor:
    """Apply ``p`` to an ``(H, W, 3)`` or ``(B, H, W, 3)`` image."""
    single = image.ndim == 3
    x = (image[None] if single else image).permute(0, 3, 1, 2)
    h, w = x.shape[-2:]
    if p.crop_scale < 1.0 or p.crop_aspect != 1.0:
        area = p.crop_scale * h * w
        ch = int(round(min(h, math.sqrt(area / p.crop_aspect))))
        cw = int(round(min(w, math.sqrt(area * p.crop_aspect))))
        ch, cw = max(ch, 1), max(cw, 1)
        y0 = int(round(p.crop_y * (h - ch)))
        x0 = int(round(p.crop_x * (w - cw)))
        x = x[..., y0:y0 + ch, x0:x0 + cw]
        if (ch, cw) != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    if p.flip_h:
        x = x.flip(-1)
    if p.flip_v:
        x = x.flip(-2)
    if p.rot90 % 4:
        x = torch.rot90(x, p.rot90 % 4, dims=(-2, -1))
    if p.brightness != 1.0 or p.contrast != 1.0:
        mean = x.mean(dim=(-3, -2, -1), keepdim=True)
        x = ((x - mean) * p.contrast + mean) * p.brightness
    x = x.clamp(0.0, 1.0).permute(0, 2, 3, 1)
    return x[0] if single else x


def augment_view(image: torch.Tensor, seed: int) -> torch.Tensor:
    return apply_augment(image, sample_augment_params(seed))


# ---------------------------------------------------------------------------
# SCM


class ScmNetwork(nn.Module):
    def __init__(self, in_channels: int, d: int = 64, groups: int = 8):
        super().__init__()
        self.d = d
        widths = [d, d, d]
        stages = []
        prev = in_channels
        for i, wdt in enumerate(widths):
            layers = [nn.Conv2d(prev, wdt, 3, padding=1), nn.GroupNorm(min(groups, wdt), wdt)]
            if i < len(widths) - 1:
                layers.append(nn.SiLU())
            stages.append(nn.Sequential(*layers))
            prev = wdt
        self.stages = nn.ModuleList(stages)
        self.projector = nn.Linear(d, d)
        self.predictor = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

    def encoder_stages(self, z: torch.Tensor) -> list[torch.Tensor]:
        if z.ndim != 4 or z.shape[1] != self.stages[0][0].in_channels:
            raise ShapeError(f"SCM expects (B, {self.stages[0][0].in_channels}, h, w), got {tuple(z.shape)}")
        outs = []
        x = z
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, z: torch.Tensor):
        """Returns ``(ContentFeature, projected s_E, predicted s_P)``; both vectors unit norm."""
        feat = self.encoder_stages(z)[-1]
        tokens = feat.flatten(2).transpose(1, 2)
        proj_mean = self.projector(tokens).mean(1)
        s_e = _unit(proj_mean)
        s_p = _unit(self.predictor(proj_mean))
        return ContentFeature(tokens, s_e), s_e, s_p


def scm_loss_from_outputs(pred_c, pred_p, proj_c, proj_p) -> torch.Tensor:
    """Symmetric negative cosine with stop-gradient on the projected targets."""
    return -0.5 * (cosine(pred_p, proj_c.detach()) + cosine(pred_c, proj_p.detach())).mean()


def loss_scm(scm: ScmNetwork, view_c: torch.Tensor, view_p: torch.Tensor) -> torch.Tensor:
    _, proj_c, pred_c = scm(view_c)
    _, proj_p, pred_p = scm(view_p)
    return scm_loss_from_outputs(pred_c, pred_p, proj_c, proj_p)


# ---------------------------------------------------------------------------
# RAM


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)


def reverse_attention(a: torch.Tensor) -> torch.Tensor:
    """Row-wise L1-normalised ``1 - A``; rows summing to zero become uniform."""
    if a.shape[-1] == 0:
        raise ShapeError("attention over zero keys")
    r = 1.0 - a
    s = r.sum(-1, keepdim=True)
    uniform = torch.full_like(r, 1.0 / r.shape[-1])
    return torch.where(s > 0, r / torch.where(s > 0, s, torch.ones_like(s)), uniform)


class ReversedCrossAttention(nn.Module):
    def __init__(self, d: int, channels: int, d_head: int = 32):
        super().__init__()
        self.to_q = nn.Linear(d, d_head, bias=False)
        self.to_k = nn.Linear(channels, d_head, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.last_weights: tuple[torch.Tensor, torch.Tensor] | None = None

    def forward(self, content_tokens: torch.Tensor, latent_tokens: torch.Tensor) -> torch.Tensor:
        a = attention_weights(self.to_q(content_tokens), self.to_k(latent_tokens))
        ar = reverse_attention(a)
        self.last_weights = (a.detach(), ar.detach())
        return ar @ self.to_v(latent_tokens)


class RamStack(nn.Module):
    def __init__(self, d: int, channels: int, n_layers: int = 2, d_head: int = 32):
        super().__init__()
        self.layers = nn.ModuleList(
            [ReversedCrossAttention(d, channels, d_head) for _ in range(n_layers)]
        )

    def forward(self, f_s: ContentFeature, z: torch.Tensor) -> torch.Tensor:
        b, c, h, w = z.shape
        tokens = z.flatten(2).transpose(1, 2)
        if tokens.shape[1] == 0:
            raise ShapeError("latent has no tokens")
        if f_s.token_map.shape[1] != tokens.shape[1]:
            raise ShapeError(
                f"content tokens ({f_s.token_map.shape[1]}) and latent tokens ({tokens.shape[1]}) differ"
            )
        agg = sum(layer(f_s.token_map, tokens) for layer in self.layers)
        return z + agg.transpose(1, 2).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# SATs


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def sat_init_kernels(size: int = 5) -> list[np.ndarray]:
    ident = np.zeros((size, size))
    ident[size // 2, size // 2] = 1.0
    blur = _gaussian_kernel(size, 1.0)
    unsharp = ident + (ident - blur)
    return [ident, unsharp, blur]


class SatUnit(nn.Module):
    """``x + scale * (dwconv(x) - x) + shift`` with replicate padding."""

    def __init__(self, channels: int, kernel: np.ndarray):
        super().__init__()
        k = torch.as_tensor(kernel, dtype=torch.float32)
        self.weight = nn.Parameter(k.expand(channels, 1, *k.shape).clone())
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pad = self.weight.shape[-1] // 2
        y = F.conv2d(F.pad(x, (pad,) * 4, mode="replicate"), self.weight, groups=x.shape[1])
        return x + self.scale[:, None, None] * (y - x) + self.shift[:, None, None]


class SatStack(nn.Module):
    def __init__(self, channels: int, n_units: int = 3, kernel_size: int = 5):
        super().__init__()
        kernels = sat_init_kernels(kernel_size)
        self.units = nn.ModuleList(
            [SatUnit(channels, kernels[i % len(kernels)]) for i in range(n_units)]
        )

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        x = f_t
        for unit in self.units:
            x = unit(x)
        return x


def loss_triplet(f_a_c, f_t_c, f_t_p, alpha: float = 1.0, reduce: bool = True) -> torch.Tensor:
    """Hinged texture triplet loss.

    Squared distances are averaged over the non-batch elements so the margin
    ``alpha`` does not depend on the latent resolution.
    """
    if not (f_a_c.shape == f_t_c.shape == f_t_p.shape):
        raise ShapeError("triplet inputs must share a shape")
    dims = tuple(range(1, f_a_c.ndim)) if f_a_c.ndim > 1 else (0,)
    pos = ((f_a_c - f_t_p) ** 2).mean(dims)
    neg = ((f_t_c - f_t_p) ** 2).mean(dims)
    loss = torch.clamp(pos - neg + alpha, min=0.0)
    return loss.mean() if reduce else loss


def loss_separation(f_t_c, f_t_p, alpha: float = 1.0) -> torch.Tensor:
    """Push-apart term alone; what the triplet reduces to when SATs are disabled."""
    dims = tuple(range(1, f_t_c.ndim))
    return torch.clamp(alpha - ((f_t_c - f_t_p) ** 2).mean(dims), min=0.0).mean()


# ---------------------------------------------------------------------------
# full network


@dataclass
class LdnConfig:
    d: int = 64
    n_ram: int = 2
    k_sat: int = 3
    alpha: float = 1.0
    d_head: int = 32
    use_sat: bool = True
    epochs_scm: int = 10
    epochs_ram: int = 12
    lr_scm: float = 1e-3
    lr_ram: float = 1e-4
    lr_sat: float = 3e-2
    batch_size: int = 32
    analysis_every: int = 8  # RAM+SAT steps between feature-distance probes
    analysis_samples: int = 500
    checkpoint_every: int = 64


class LatentDisentangledNetwork(nn.Module):
    def __init__(self, channels: int, cfg: LdnConfig | None = None):
        super().__init__()
        cfg = cfg or LdnConfig()
        self.cfg = cfg
        self.channels = channels
        self.scm = ScmNetwork(channels, cfg.d)
        self.ram = RamStack(cfg.d, channels, cfg.n_ram, cfg.d_head)
        self.sat = SatStack(channels, cfg.k_sat)
        self.frozen = False

    def freeze(self) -> "LatentDisentangledNetwork":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def _check_frozen(self):
        if not self.frozen:
            raise StateError("LDN is not frozen; load or finish a stage-I checkpoint first")

    def extract_content(self, z: torch.Tensor) -> ContentFeature:
        self._check_frozen()
        return self.scm(z)[0]

    def defect(self, f_s: ContentFeature, z: torch.Tensor) -> torch.Tensor:
        return self.ram(f_s, z)

    def structured(self, f_t: torch.Tensor) -> torch.Tensor:
        return self.sat(f_t) if self.cfg.use_sat else f_t

    def features(self, z: torch.Tensor) -> tuple[ContentFeature, torch.Tensor, torch.Tensor]:
        """``(f_S, f_T, f_A)`` for a batch of latents."""
        f_s = self.scm(z)[0]
        f_t = self.defect(f_s, z)
        return f_s, f_t, self.structured(f_t)

    def perceptual_features(self, z: torch.Tensor) -> list[torch.Tensor]:
        return self.scm.encoder_stages(z)

    def ram_sat_loss(self, z_c: torch.Tensor, z_p: torch.Tensor) -> torch.Tensor:
        """Stage-I second phase objective on a batch; SCM is treated as fixed."""
        with torch.no_grad():
            f_s_c = self.scm(z_c)[0]
            f_s_p = self.scm(z_p)[0]
        f_t_c = self.defect(f_s_c, z_c)
        f_t_p = self.defect(f_s_p, z_p)
        if not self.cfg.use_sat:
            return loss_separation(f_t_c, f_t_p, self.cfg.alpha)
        return loss_triplet(self.sat(f_t_c), f_t_c, f_t_p, self.cfg.alpha)

    def loss_ldn(self, view_c, view_p, z_c, z_p) -> dict[str, torch.Tensor]:
        l_scm = loss_scm(self.scm, view_c, view_p)
        l_tri = self.ram_sat_loss(z_c, z_p)
        return {"scm": l_scm, "triplet": l_tri, "total": l_scm + l_tri}
