"""Per-patch attention maps rendered with one colour scale per batch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 17 stops, blue (low) -> red (high).
PALETTE = np.array([
    (59, 76, 192), (78, 104, 216), (98, 130, 234), (119, 154, 247),
    (141, 176, 254), (163, 194, 254), (185, 208, 249), (204, 217, 237),
    (221, 220, 220), (236, 211, 197), (245, 196, 172), (247, 176, 147),
    (244, 152, 122), (235, 125, 98), (221, 95, 75), (202, 59, 55),
    (180, 4, 38),
], dtype=np.float64)


@dataclass(frozen=True)
class PatchMap:
    grid_h: int
    grid_w: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.grid_h * self.grid_w:
            raise ValueError(f"{values.size} values for a {self.grid_h}x{self.grid_w} grid")
        if not np.all(np.isfinite(values)):
            raise ValueError("patch map contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ColorScale:
    global_min: float
    global_max: float

    def __post_init__(self):
        if self.global_min > self.global_max:
            raise ValueError("global_min exceeds global_max")

    def position(self, values):
        """Map values to [0, 1]; a degenerate scale maps everything to 0.5."""
        values = np.asarray(values, dtype=np.float64)
        span = self.global_max - self.global_min
        if span == 0:
            return np.full(values.shape, 0.5)
        return np.clip((values - self.global_min) / span, 0.0, 1.0)


def patch_participation(cap, grid_h=None, grid_w=None):
    """Symmetric row/column mean of the raw attention for every patch.

    ``s_i = sum_h sum_j (A[h,i,j] + A[h,j,i]) / (2 * H * N)``.  The mean of
    the map equals the concat-mean quality score.  Without a grid shape the
    map is laid out on a square grid.
    """
    heads = np.asarray(cap.heads, dtype=np.float64)
    n_heads, n = heads.shape[0], heads.shape[1]
    s = (heads.sum(axis=2) + heads.sum(axis=1)).sum(axis=0) / (2.0 * n_heads * n)
    if grid_h is None or grid_w is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError("grid shape required for a non-square patch count")
        grid_h = grid_w = side
    return PatchMap(grid_h, grid_w, s)


def build_color_scale(maps):
    if not maps:
        raise ValueError("cannot build a colour scale from an empty batch")
    lo = min(float(m.values.min()) for m in maps)
    hi = max(float(m.values.max()) for m in maps)
    return ColorScale(lo, hi)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.uint8)


def colorize(positions):
    """Linear interpolation between palette stops for positions in [0, 1]."""
    pos = np.asarray(positions, dtype=np.float64) * (len(PALETTE) - 1)
    lower = np.minimum(np.floor(pos).astype(int), len(PALETTE) - 2)
    frac = (pos - lower)[..., None]
    rgb = PALETTE[lower] + frac * (PALETTE[lower + 1] - PALETTE[lower])
    return _round_half_up(rgb)


def render_heatmap(pmap, scale, patch_size):
    """``(grid_h*P, grid_w*P, 3)`` uint8 raster, one solid block per patch."""
    colors = colorize(scale.position(pmap.values)).reshape(pmap.grid_h, pmap.grid_w, 3)
    return np.repeat(np.repeat(colors, patch_size, axis=0), patch_size, axis=1)


def overlay(base, heat, alpha):
    """Alpha-blend ``heat`` over ``base`` (both uint8 rasters)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    base = np.asarray(base)
    heat = np.asarray(heat)
    if base.shape != heat.shape:
        raise ValueError(f"raster shapes differ: {base.shape} vs {heat.shape}")
    if alpha == 0.0:
        return base.astype(np.uint8)
    if alpha == 1.0:
        return heat.astype(np.uint8)
    mixed = (1.0 - alpha) * base.astype(np.float64) + alpha * heat.astype(np.float64)
    return _round_half_up(mixed)


def to_raster(image, cfg):
    """Undo the input normalization of a preprocessed image (for overlays)."""
    x = (np.asarray(image, dtype=np.float64) * cfg.input_std + cfg.input_mean) * 255.0
    return _round_half_up(np.clip(x, 0.0, 255.0))
