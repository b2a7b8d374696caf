"""Toy conditional latent diffusion model.

The denoiser is a small three-level U-Net over ``[z_t, z_c, mask]``. Cross
attention is routed by resolution: the full-resolution blocks read the
structured feature, the coarsest blocks read the content tokens, and every
attention block can read the defect tokens. The global vector is added to the
timestep embedding. Any slot may be replaced by learned null tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tpg import ShapeError
from tpg.codec import decode

SLOTS = ("content", "structure", "defect", "global")


# ---------------------------------------------------------------------------
# schedule


class NoiseSchedule:
    """Linear beta schedule; ``alpha_bar[0] = 1`` and ``alpha_bar[t]`` for t in 1..T."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid noise schedule")
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def _check(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if bool(((t < 0) | (t > self.T)).any()):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return t

    def coefficients(self, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(sqrt(abar_t), sqrt(1 - abar_t))`` broadcastable against a latent batch."""
        t = self._check(t)
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)[t]
        shape = ab.shape + (1,) * (like.ndim - ab.ndim)
        a = ab.sqrt().reshape(shape).to(like.dtype)
        s = (1.0 - ab).sqrt().reshape(shape).to(like.dtype)
        return a, s


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    a, s = schedule.coefficients(t, z0)
    return a * z0 + s * eps


def assemble_input(z_t: torch.Tensor, z_c: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate ``[z_t, z_c, mask]``; ``mask`` is latent-resolution ``(..., h, w)``."""
    if z_t.shape[-2:] != z_c.shape[-2:] or z_t.shape[-2:] != mask.shape[-2:]:
        raise ShapeError("spatial sizes of z_t, z_c and mask differ")
    return torch.cat([z_t, z_c, mask.unsqueeze(-3).to(z_t.dtype)], dim=-3)


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class ConditioningBundle:
    content_tokens: torch.Tensor | None = None  # (B, L, d)
    structure_tokens: torch.Tensor | None = None  # (B, L, c)
    defect_tokens: torch.Tensor | None = None  # (B, L, c)
    global_vec: torch.Tensor | None = None  # (B, d)
    # Per-sample null flags, (B,) bool. True replaces that sample's slot by the null token.
    null: dict[str, torch.Tensor] = field(default_factory=dict)

    def get(self, slot: str) -> torch.Tensor | None:
        return {
            "content": self.content_tokens,
            "structure": self.structure_tokens,
            "defect": self.defect_tokens,
            "global": self.global_vec,
        }[slot]

    def without(self, *slots: str) -> "ConditioningBundle":
        kw = {f"{s}_tokens" if s != "global" else "global_vec": None for s in slots}
        return replace(self, null=dict(self.null), **kw)

    def positive(self) -> "ConditioningBundle":
        return self.without("defect")

    def negative(self) -> "ConditioningBundle":
        return self.without("content", "structure")

    def with_dropout(self, p: float, batch: int, generator: torch.Generator | None,
                     slots=SLOTS) -> "ConditioningBundle":
        null = dict(self.null)
        for s in SLOTS:
            # Always draw so the random stream does not depend on which slots are active.
            draw = torch.rand(batch, generator=generator) < p
            if s in slots:
                null[s] = draw | null[s] if s in null else draw
        return replace(self, null=null)

    def index(self, idx) -> "ConditioningBundle":
        def take(x):
            return None if x is None else x[idx]
        return ConditioningBundle(
            take(self.content_tokens), take(self.structure_tokens), take(self.defect_tokens),
            take(self.global_vec), {k: v[idx] for k, v in self.null.items()},
        )

    @staticmethod
    def concat(bundles: list["ConditioningBundle"]) -> "ConditioningBundle":
        def cat(xs):
            if all(x is None for x in xs):
                return None
            if any(x is None for x in xs):
                raise ValueError("cannot concatenate bundles with mismatched null slots")
            return torch.cat(xs)
        keys = set().union(*(b.null for b in bundles))
        null = {}
        for k in keys:
            parts = []
            for b in bundles:
                n = len(b.get_batch())
                parts.append(b.null.get(k, torch.zeros(n, dtype=torch.bool)))
            null[k] = torch.cat(parts)
        return ConditioningBundle(*(cat([b.get(s) for b in bundles]) for s in SLOTS), null=null)

    def get_batch(self) -> torch.Tensor:
        for s in SLOTS:
            x = self.get(s)
            if x is not None:
                return x
        raise ValueError("bundle has no populated slot")


# ---------------------------------------------------------------------------
# network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int):
        super().__init__()
        self.n1 = nn.GroupNorm(min(groups, cin), cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(tdim, cout)
        self.n2 = nn.GroupNorm(min(groups, cout), cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Cross attention from spatial features to the concatenation of ``slots``."""

    def __init__(self, channels: int, ctx_dim: int, n_pos: int, slots: tuple[str, ...],
                 heads: int, groups: int, name: str):
        super().__init__()
        self.slots = slots
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.query_pos = nn.Parameter(torch.randn(n_pos, channels) * 0.02)
        self.q = nn.Linear(channels, ctx_dim, bias=False)
        self.k = nn.Linear(ctx_dim, ctx_dim, bias=False)
        self.v = nn.Linear(ctx_dim, ctx_dim, bias=False)
        self.out = nn.Linear(ctx_dim, channels)
        self.probe = False
        self.record: dict[str, torch.Tensor] = {}

    def attend(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2) + self.query_pos
        q, k, v = self.q(tokens), self.k(context), self.v(context)

        def split(y):
            return y.reshape(b, y.shape[1], self.heads, -1).transpose(1, 2)

        o = F.scaled_dot_product_attention(split(q), split(k), split(v))
        o = o.transpose(1, 2).reshape(b, h * w, -1)
        return self.out(o).transpose(1, 2).reshape(b, c, h, w)

    def forward(self, x: torch.Tensor, contexts: dict[str, torch.Tensor]) -> torch.Tensor:
        context = torch.cat([contexts[s] for s in self.slots], dim=1)
        delta = self.attend(x, context)
        if self.probe:
            self.record = {"input": x.detach(), "context": context.detach(), "output": delta.detach()}
        return x + delta


class DenoiserNet(nn.Module):
    def __init__(
        self,
        latent_channels: int = 48,
        content_dim: int = 64,
        n_tokens: int = 256,
        latent_hw: tuple[int, int] = (16, 16),
        widths: tuple[int, int, int] = (64, 96, 128),
        ctx_dim: int = 64,
        time_dim: int = 128,
        heads: int = 4,
        groups: int = 8,
        alpha_bar=None,
    ):
        """``alpha_bar`` (length T+1) enables the blended output
        ``eps = sqrt(ab_t) * F + sqrt(1 - ab_t) * z_t``, which is exact at high noise.
        """
        super().__init__()
        c = latent_channels
        if alpha_bar is not None:
            self.register_buffer("alpha_bar", torch.as_tensor(np.asarray(alpha_bar), dtype=torch.float64))
        else:
            self.alpha_bar = None
        self.latent_channels = c
        self.content_dim = content_dim
        self.time_dim = time_dim
        w0, w1, w2 = widths
        h, w = latent_hw
        n_pos = [h * w, (h // 2) * (w // 2), (h // 4) * (w // 4)]

        self.slot_proj = nn.ModuleDict({
            "content": nn.Linear(content_dim, ctx_dim),
            "structure": nn.Linear(c, ctx_dim),
            "defect": nn.Linear(c, ctx_dim),
        })
        self.slot_pos = nn.ParameterDict({
            s: nn.Parameter(torch.randn(n_tokens, ctx_dim) * 0.02) for s in ("content", "structure", "defect")
        })
        self.null_tokens = nn.ParameterDict({
            s: nn.Parameter(torch.randn(ctx_dim) * 0.02) for s in ("content", "structure", "defect")
        })
        self.null_global = nn.Parameter(torch.zeros(content_dim))
        self.n_tokens = n_tokens

        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.global_proj = nn.Linear(content_dim, time_dim)

        def attn(ch, npos, slots, name):
            return CrossAttention(ch, ctx_dim, npos, slots, heads, groups, name)

        high, mid, low = ("structure", "defect"), ("defect",), ("content", "defect")
        self.inp = nn.Conv2d(2 * c + 1, w0, 3, padding=1)
        self.d0 = ResBlock(w0, w0, time_dim, groups)
        self.a0 = attn(w0, n_pos[0], high, "down_high")
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.d1 = ResBlock(w1, w1, time_dim, groups)
        self.a1 = attn(w1, n_pos[1], mid, "down_mid")
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.m0 = ResBlock(w2, w2, time_dim, groups)
        self.am = attn(w2, n_pos[2], low, "mid_low")
        self.m1 = ResBlock(w2, w2, time_dim, groups)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.u1 = ResBlock(2 * w1, w1, time_dim, groups)
        self.b1 = attn(w1, n_pos[1], mid, "up_mid")
        self.up0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.u0 = ResBlock(2 * w0, w0, time_dim, groups)
        self.b0 = attn(w0, n_pos[0], high, "up_high")
        self.out_norm = nn.GroupNorm(min(groups, w0), w0)
        self.out = nn.Conv2d(w0, c, 3, padding=1)
        # direct path so the narrow first stage need not carry every latent channel
        self.in_skip = nn.Conv2d(2 * c + 1, c, 1)

    def attention_blocks(self) -> list[CrossAttention]:
        return [self.a0, self.a1, self.am, self.b1, self.b0]

    def set_probe(self, on: bool = True) -> None:
        for blk in self.attention_blocks():
            blk.probe = on
            blk.record = {}

    def contexts(self, bundle: ConditioningBundle, batch: int, dtype) -> dict[str, torch.Tensor]:
        out = {}
        for s in ("content", "structure", "defect"):
            null = self.null_tokens[s].to(dtype).expand(batch, self.n_tokens, -1)
            x = bundle.get(s)
            if x is None:
                out[s] = null
                continue
            if x.shape[0] != batch or x.shape[1] != self.n_tokens:
                raise ShapeError(f"{s} tokens have shape {tuple(x.shape)}, expected ({batch}, {self.n_tokens}, .)")
            y = self.slot_proj[s](x) + self.slot_pos[s]
            if s in bundle.null:
                y = torch.where(bundle.null[s][:, None, None], null, y)
            out[s] = y
        return out

    def global_embedding(self, bundle: ConditioningBundle, batch: int, dtype) -> torch.Tensor:
        g = bundle.global_vec
        null = self.null_global.to(dtype).expand(batch, -1)
        if g is None:
            g = null
        elif "global" in bundle.null:
            g = torch.where(bundle.null["global"][:, None], null, g)
        return self.global_proj(g)

    def forward(self, phi: torch.Tensor, t, bundle: ConditioningBundle) -> torch.Tensor:
        b = phi.shape[0]
        if phi.shape[1] != 2 * self.latent_channels + 1:
            raise ShapeError(f"phi has {phi.shape[1]} channels, expected {2 * self.latent_channels + 1}")
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(phi.dtype))
        temb = temb + self.global_embedding(bundle, b, phi.dtype)
        ctx = self.contexts(bundle, b, phi.dtype)

        h0 = self.a0(self.d0(self.inp(phi), temb), ctx)
        h1 = self.a1(self.d1(self.down0(h0), temb), ctx)
        m = self.m0(self.down1(h1), temb)
        m = self.m1(self.am(m, ctx), temb)
        u = self.up1(F.interpolate(m, scale_factor=2, mode="nearest"))
        u = self.b1(self.u1(torch.cat([u, h1], 1), temb), ctx)
        u = self.up0(F.interpolate(u, scale_factor=2, mode="nearest"))
        u = self.b0(self.u0(torch.cat([u, h0], 1), temb), ctx)
        f = self.out(F.silu(self.out_norm(u))) + self.in_skip(phi)
        if self.alpha_bar is None:
            return f
        ab = self.alpha_bar[t].to(phi.dtype)[:, None, None, None]
        return ab.sqrt() * f + (1 - ab).sqrt() * phi[:, : self.latent_channels]


# ---------------------------------------------------------------------------
# losses and sampling


def loss_dp(model, phi_p, bundle: ConditioningBundle, t, eps, p_drop: float = 0.0,
            generator: torch.Generator | None = None, reduce: bool = True) -> torch.Tensor:
    """Noise-prediction MSE on labeled inputs; slots are independently nulled with ``p_drop``."""
    if p_drop > 0:
        bundle = bundle.with_dropout(p_drop, phi_p.shape[0], generator)
    err = (model(phi_p, t, bundle) - eps) ** 2
    return err.mean() if reduce else err.flatten(1).mean(1)


def predict_x0_latent(eps_model, phi_star, bundle, t, z_star_t, schedule: NoiseSchedule) -> torch.Tensor:
    a, s = schedule.coefficients(t, z_star_t)
    return (z_star_t - s * eps_model(phi_star, t, bundle)) / a


def predict_x0(eps_model, phi_star, bundle, t, z_star_t, schedule: NoiseSchedule,
               r: int = 4, clamp: bool = True) -> torch.Tensor:
    """One-step clean-image estimate from a noised latent and predicted noise."""
    z0 = predict_x0_latent(eps_model, phi_star, bundle, t, z_star_t, schedule)
    return decode(z0, r, clamp=clamp)


def cfg_epsilon(eps_model, phi, pos: ConditioningBundle, neg: ConditioningBundle, s: float, t):
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    if s == 1:
        return eps_model(phi, t, pos)
    e_neg = eps_model(phi, t, neg)
    if s == 0:
        return e_neg
    return e_neg + s * (eps_model(phi, t, pos) - e_neg)


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance: float = 3.0
    eta: float = 0.0
    seed: int = 0
    clip_latent: bool = True


def sample_timesteps(T: int, steps: int) -> list[int]:
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(v) for v in ts]


@torch.no_grad()
def sample(eps_model, z_c, mask_latent, bundle_pos, bundle_neg, cfg: SamplerConfig,
           schedule: NoiseSchedule, r: int = 4, z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Reverse diffusion from standard normal noise; returns decoded images ``(B, H, W, 3)``.

    ``z_init`` overrides the seeded starting noise (used for per-sample seeds).
    """
    gen = torch.Generator().manual_seed(int(cfg.seed))
    z = torch.randn(z_c.shape, generator=gen, dtype=z_c.dtype) if z_init is None else z_init.to(z_c.dtype)
    ts = sample_timesteps(schedule.T, cfg.steps)
    ab = schedule.alpha_bar
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        phi = assemble_input(z, z_c, mask_latent)
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = cfg_epsilon(eps_model, phi, bundle_pos, bundle_neg, cfg.guidance, tt)
        x0 = (z - math.sqrt(1 - ab[t]) * eps) / math.sqrt(ab[t])
        if cfg.clip_latent:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (z - math.sqrt(ab[t]) * x0) / math.sqrt(1 - ab[t])
        sigma = cfg.eta * math.sqrt((1 - ab[t_prev]) / (1 - ab[t]) * (1 - ab[t] / ab[t_prev]))
        z = math.sqrt(ab[t_prev]) * x0 + math.sqrt(max(1 - ab[t_prev] - sigma**2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return decode(z, r)
