"""Bernoulli sub-mask generation and spatial tiling to full-frame modulation masks.

Full-frame masks are the Kronecker product of an all-ones tiling matrix with
a small binary sub-mask (default 8x8), which keeps the per-pixel control
wiring of a real sensor fixed and tiny.
"""

from __future__ import annotations

import warnings

import numpy as np

from .core import ConfigError, MaskStack, RandomStream, SubMaskStack

DEFAULT_SUBMASK_SIDE = 8
DEFAULT_RHO = 0.5


def gen_submask(t: int, m: int, rho: float, stream: RandomStream) -> SubMaskStack:
    """Draw a (t, m, m) stack of independent Bernoulli(rho) sub-masks."""
    if t < 1 or m < 1:
        raise ConfigError(f"need t >= 1 and m >= 1, got t={t}, m={m}")
    if not (0.0 < rho <= 1.0):
        raise ConfigError(f"mask density rho must be in (0, 1], got {rho}")
    if rho <= 0.05:
        warnings.warn(
            f"rho={rho} gives degenerate light throughput", stacklevel=2
        )
    draws = stream.generator.random(size=(t, m, m))
    data = (draws < rho).astype(np.uint8)
    return SubMaskStack(data=data, rho_nominal=rho)


def tile_mask(sub: SubMaskStack, h: int, w: int) -> MaskStack:
    """Replicate a sub-mask to (T, h, w); equals kron(ones(h/m_x, w/m_y), A_t)."""
    _, mx, my = sub.shape
    if h % mx or w % my:
        raise ConfigError(
            f"target dims ({h}, {w}) must be divisible by sub-mask dims ({mx}, {my})"
        )
    data = np.tile(sub.data, (1, h // mx, w // my))
    return MaskStack(data=data, source=sub)


def mask_stats(mask: MaskStack) -> dict:
    """Density, per-pixel exposure counts, and the dead (never-exposed) pixel count.

    Dead pixels are permitted by the mask design; downstream estimation
    zero-guards them.
    """
    data = mask.data
    per_pixel_on = data.sum(axis=0, dtype=np.int32)
    return {
        "density": float(data.mean()),
        "per_pixel_on": per_pixel_on,
        "dead_pixels": int((per_pixel_on == 0).sum()),
    }
