"""Lossless image <-> latent codec (space-to-depth plus an affine value map).

Images are ``(..., H, W, 3)`` tensors in [0, 1]; latents are
``(..., 3 r^2, H / r, W / r)`` tensors in [-1, 1].
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from tpg import ShapeError

DEFAULT_FACTOR = 4


def _as_tensor(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)) if isinstance(x, np.ndarray) else x


def latent_shape(image_size: int, r: int = DEFAULT_FACTOR) -> tuple[int, int, int]:
    return (3 * r * r, image_size // r, image_size // r)


def encode(image, r: int = DEFAULT_FACTOR) -> torch.Tensor:
    image = _as_tensor(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) image, got {tuple(image.shape)}")
    h, w = image.shape[-3:-1]
    if h % r or w % r:
        raise ShapeError(f"image size {h}x{w} not divisible by factor {r}")
    lead = image.shape[:-3]
    x = image.reshape(-1, h, w, 3).permute(0, 3, 1, 2)
    z = F.pixel_unshuffle(x, r)
    return (2 * z - 1).reshape(*lead, 3 * r * r, h // r, w // r)


def decode(latent, r: int = DEFAULT_FACTOR, clamp: bool = True) -> torch.Tensor:
    latent = _as_tensor(latent)
    c, h, w = latent.shape[-3:]
    if c % (r * r) or c // (r * r) != 3:
        raise ShapeError(f"latent has {c} channels, expected {3 * r * r}")
    lead = latent.shape[:-3]
    x = F.pixel_shuffle(latent.reshape(-1, c, h, w), r)
    img = ((x + 1) / 2).permute(0, 2, 3, 1).reshape(*lead, h * r, w * r, 3)
    return img.clamp(0.0, 1.0) if clamp else img


def resize_mask(mask, r: int = DEFAULT_FACTOR) -> torch.Tensor:
    """Area-pool a ``(..., H, W)`` mask by ``r``; pooled values >= 0.5 become 1."""
    mask = _as_tensor(mask)
    h, w = mask.shape[-2:]
    if h % r or w % r:
        raise ShapeError(f"mask size {h}x{w} not divisible by factor {r}")
    lead = mask.shape[:-2]
    pooled = F.avg_pool2d(mask.reshape(-1, 1, h, w).to(torch.float64), r)
    out = (pooled >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32)
    return out.reshape(*lead, h // r, w // r)
