"""Learnable equirectangular feature map with an average-pooled mip pyramid.

Only the base level holds parameters. Coarser levels are rebuilt from it by
2x2 average pooling on every forward pass, and gradients reach the base
through the adjoint of that pooling chain.

Texel centres sit at ``(i + 0.5) / size``; addressing wraps in ``u`` and
clamps in ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

N_LEVELS = 9
BASE_SHAPE = (512, 1024, 4)


class SphMipError(ValueError):
    pass


def build_mipmap(base: np.ndarray, n_levels: int = N_LEVELS) -> list[np.ndarray]:
    """Levels ``0 .. n_levels-1``; level 0 is ``base`` itself (as float64)."""
    h, w = base.shape[:2]
    div = 2 ** (n_levels - 1)
    if h % div or w % div:
        raise SphMipError(f"base {h}x{w} is not divisible by {div}")
    levels = [np.asarray(base, dtype=np.float64)]
    for _ in range(1, n_levels):
        p = levels[-1]
        levels.append(0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]))
    return levels


def pool_adjoint(level_grads: list[np.ndarray]) -> np.ndarray:
    """Fold per-level gradients back onto the base grid."""
    g = level_grads[-1]
    for finer in reversed(level_grads[:-1]):
        g = finer + 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    return g


def dir_to_spherical(r: np.ndarray) -> np.ndarray:
    """Unit directions (..., 3) -> equirectangular coordinates (..., 2) in [0, 1]."""
    r = np.asarray(r, dtype=np.float64)
    norm = np.linalg.norm(r, axis=-1)
    if np.any(norm == 0):
        raise SphMipError("zero direction vector")
    u = np.arctan2(r[..., 1], r[..., 0]) / (2.0 * math.pi) + 0.5
    v = np.arccos(np.clip(r[..., 2], -1.0, 1.0)) / math.pi
    return np.stack([u, v], axis=-1)


def dir_to_spherical_grad(r: np.ndarray, g_x: np.ndarray) -> np.ndarray:
    """Chain dL/d(u, v) back to dL/dr (pole-guarded)."""
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    rho2 = np.maximum(x * x + y * y, 1e-12)
    gu = g_x[..., 0] / (2.0 * math.pi)
    s = np.sqrt(np.maximum(1.0 - np.clip(z, -1, 1) ** 2, 1e-12))
    inside = np.abs(z) < 1.0
    gv = np.where(inside, -g_x[..., 1] / (math.pi * s), 0.0)
    return np.stack([-y / rho2 * gu, x / rho2 * gu, gv], axis=-1)


def level_from_roughness(rho, n_levels: int = N_LEVELS):
    return np.clip(np.asarray(rho, dtype=np.float64) * (n_levels - 1), 0.0, n_levels - 1.0)


@dataclass
class _Taps:
    """Texel addresses and weights touched by one batch of queries."""

    level: np.ndarray  # (Q, 8) level index per tap
    flat: np.ndarray  # (Q, 8) flat texel index within its level
    weight: np.ndarray  # (Q, 8)
    # pieces for d/du, d/dv and d/dl
    dw_du: np.ndarray
    dw_dv: np.ndarray
    dw_dl: np.ndarray


def _level_taps(u, v, h, w):
    x = u * w - 0.5
    y = v * h - 0.5
    j0 = np.floor(x)
    i0 = np.floor(y)
    fx = x - j0
    fy = y - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)
    cols = np.stack([j0 % w, (j0 + 1) % w], axis=-1)
    rows = np.stack([np.clip(i0, 0, h - 1), np.clip(i0 + 1, 0, h - 1)], axis=-1)
    flat = np.stack([rows[:, 0] * w + cols[:, 0], rows[:, 0] * w + cols[:, 1],
                     rows[:, 1] * w + cols[:, 0], rows[:, 1] * w + cols[:, 1]], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    dwu = np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=-1) * w
    dwv = np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=-1) * h
    return flat, wts, dwu, dwv


class SphMip:
    """Feature map ``base`` of shape (H, W, C) plus its derived pyramid."""

    def __init__(self, base: np.ndarray, n_levels: int = N_LEVELS):
        self.base = base
        self.n_levels = n_levels
        self._levels: Optional[list] = None

    @classmethod
    def init(cls, seed: int, shape=BASE_SHAPE, n_levels: int = N_LEVELS, scale: float = 0.01,
             dtype=np.float32) -> "SphMip":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, size=shape).astype(dtype), n_levels)

    @property
    def channels(self) -> int:
        return int(self.base.shape[2])

    @property
    def levels(self) -> list[np.ndarray]:
        if self._levels is None:
            self._levels = build_mipmap(self.base, self.n_levels)
        return self._levels

    def invalidate(self) -> None:
        self._levels = None

    def _taps(self, x: np.ndarray, lev: np.ndarray) -> _Taps:
        q = x.shape[0]
        lo = np.floor(lev).astype(np.int64)
        lo = np.clip(lo, 0, self.n_levels - 1)
        hi = np.minimum(lo + 1, self.n_levels - 1)
        frac = lev - lo
        out_l = np.empty((q, 8), dtype=np.int64)
        out_f = np.empty((q, 8), dtype=np.int64)
        out_w = np.empty((q, 8))
        out_du = np.empty((q, 8))
        out_dv = np.empty((q, 8))
        out_dl = np.empty((q, 8))
        for slot, (which, blend, dblend) in enumerate(((lo, 1.0 - frac, -1.0), (hi, frac, 1.0))):
            sl = slice(4 * slot, 4 * slot + 4)
            for L in np.unique(which):
                m = which == L
                h, w = self.levels[L].shape[:2]
                flat, wts, dwu, dwv = _level_taps(x[m, 0], x[m, 1], h, w)
                b = blend[m][:, None]
                out_l[m, sl] = L
                out_f[m, sl] = flat
                out_w[m, sl] = wts * b
                out_du[m, sl] = dwu * b
                out_dv[m, sl] = dwv * b
                out_dl[m, sl] = wts * dblend
        # the blend derivative vanishes where lo == hi (top level)
        out_dl[lo == hi] = 0.0
        return _Taps(out_l, out_f, out_w, out_du, out_dv, out_dl)

    def _gather(self, taps: _Taps) -> np.ndarray:
        q = taps.level.shape[0]
        vals = np.zeros((q, 8, self.channels))
        for L in range(self.n_levels):
            m = taps.level == L
            if m.any():
                vals[m] = self.levels[L].reshape(-1, self.channels)[taps.flat[m]]
        return vals

    def query(self, x: np.ndarray, lev: np.ndarray, return_cache: bool = False):
        """Features (Q, C) at coordinates ``x`` (Q, 2) and continuous level ``lev`` (Q,)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        lev = np.clip(np.atleast_1d(np.asarray(lev, dtype=np.float64)), 0.0, self.n_levels - 1.0)
        taps = self._taps(x, lev)
        vals = self._gather(taps)
        out = np.einsum("qt,qtc->qc", taps.weight, vals)
        if return_cache:
            return out, (taps, vals)
        return out

    def query_backward(self, cache, g_out: np.ndarray):
        """Returns (dL/d base, dL/dx (Q, 2), dL/d level (Q,))."""
        taps, vals = cache
        g_out = np.asarray(g_out, dtype=np.float64)
        per_tap = taps.weight[..., None] * g_out[:, None, :]  # (Q, 8, C)
        level_grads = []
        for L in range(self.n_levels):
            h, w, c = self.levels[L].shape
            m = taps.level == L
            g = np.zeros((h * w, c))
            if m.any():
                idx = taps.flat[m]
                for ch in range(c):
                    g[:, ch] = np.bincount(idx, weights=per_tap[m][:, ch], minlength=h * w)
            level_grads.append(g.reshape(h, w, c))
        g_base = pool_adjoint(level_grads)
        dot = np.einsum("qtc,qc->qt", vals, g_out)
        g_x = np.stack([np.sum(taps.dw_du * dot, axis=1), np.sum(taps.dw_dv * dot, axis=1)], axis=-1)
        g_l = np.sum(taps.dw_dl * dot, axis=1)
        return g_base, g_x, g_l


__all__ = [
    "BASE_SHAPE",
    "N_LEVELS",
    "SphMip",
    "SphMipError",
    "build_mipmap",
    "dir_to_spherical",
    "dir_to_spherical_grad",
    "level_from_roughness",
    "pool_adjoint",
]
