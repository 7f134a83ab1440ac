"""Reference implementations used to check the fast paths.

Nothing here shares code with the tiled rasterizer, the Sph-Mip sampler
or the shader beyond the parameter activations: the brute-force renderer
tests every primitive against every pixel and composites to full
transmittance, and the shading reference walks one pixel at a time with
scalar math.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .scene import Camera, GaussianSet, Materialized, materialize

NEAR = 0.01


def brute_force_render(gset: GaussianSet | Materialized, camera: Camera, background=None) -> dict:
    """Dense per-pixel compositing over all primitives.

    Primitives are ordered by camera-frame center depth (ties by id). The
    kernel is the truncated Gaussian (zero beyond 3 sigma); there is no
    tiling, no bounding box and no early termination.
    Returns a dict with ``payload``, ``alpha``, ``depth``, ``normal``
    (world), ``weights`` (H, W, N) and ``order``.
    """
    mat = materialize(gset) if isinstance(gset, GaussianSet) else gset
    H, W = camera.height, camera.width
    n = len(mat)
    pay = mat.payload_matrix()
    nc = pay.shape[1]
    bg = np.zeros(nc)
    if background is not None:
        b = np.atleast_1d(np.asarray(background, dtype=np.float64))
        bg[: b.size] = b[:nc]

    R_wc = camera.c2w[:3, :3].T
    cam_pos = camera.c2w[:3, 3]
    centers = (mat.positions - cam_pos) @ R_wc.T
    order = np.lexsort((np.arange(n), centers[:, 2]))

    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    d = np.stack([(jj + 0.5 - camera.cx) / camera.fx, (ii + 0.5 - camera.cy) / camera.fy, np.ones((H, W))], -1)
    d = d.reshape(-1, 3)  # (P, 3)

    alpha_hit = np.zeros((d.shape[0], n))
    depth_hit = np.zeros((d.shape[0], n))
    normal_hit = np.zeros((d.shape[0], n, 3))
    for k in range(n):
        tu = R_wc @ mat.frames[k, :, 0]
        tv = R_wc @ mat.frames[k, :, 1]
        tw = np.cross(tu, tv)
        den = d @ tw
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (centers[k] @ tw) / den
        hit = (np.abs(den) >= 1e-9) & (t > NEAR)
        x = t[:, None] * d - centers[k]
        u = (x @ tu) / mat.scales[k, 0]
        v = (x @ tv) / mat.scales[k, 1]
        r2 = u * u + v * v
        g = np.where(hit & (r2 <= 9.0), np.exp(-0.5 * np.where(hit, r2, 0.0)), 0.0)
        alpha_hit[:, k] = mat.opacities[k] * g
        depth_hit[:, k] = np.where(hit, t, 0.0)
        facing = np.where(den > 0, -1.0, 1.0)
        normal_hit[:, k] = facing[:, None] * (tw @ R_wc)[None, :]

    a = alpha_hit[:, order]
    T = np.cumprod(np.concatenate([np.ones((a.shape[0], 1)), 1.0 - a], axis=1), axis=1)
    w_sorted = a * T[:, :-1]
    T_final = T[:, -1]
    weights = np.zeros_like(alpha_hit)
    weights[:, order] = w_sorted

    value = weights @ pay + T_final[:, None] * bg[None, :]
    alpha = weights.sum(axis=1)
    dsum = np.sum(weights * depth_hit, axis=1)
    nsum = np.einsum("pk,pkc->pc", weights, normal_hit)
    depth = dsum / np.maximum(alpha, 1e-6)
    nn = np.linalg.norm(nsum, axis=1, keepdims=True)
    normal = np.where((alpha[:, None] > 1e-4) & (nn > 0), nsum / np.where(nn > 0, nn, 1), 0.0)
    return {
        "payload": value.reshape(H, W, nc),
        "alpha": alpha.reshape(H, W),
        "transmittance": T_final.reshape(H, W),
        "depth": depth.reshape(H, W),
        "normal": normal.reshape(H, W, 3),
        "normal_sum": nsum.reshape(H, W, 3),
        "weights": weights.reshape(H, W, n),
        "order": order,
    }


def cutoff_margin(gset: GaussianSet | Materialized, camera: Camera) -> float:
    """Smallest ``|r - 3| * |cos|`` over all pixel/primitive ray hits (``inf`` if none).

    The truncated kernel jumps at ``r = 3``; finite differences are only
    meaningful when no pixel sits close to that edge. ``cos`` is the
    incidence cosine between ray and disk normal: near grazing, ``r``
    moves roughly ``1/|cos|`` times faster with the geometry, so such hits
    count as closer to the edge.
    """
    mat = materialize(gset) if isinstance(gset, GaussianSet) else gset
    R_wc = camera.c2w[:3, :3].T
    centers = (mat.positions - camera.c2w[:3, 3]) @ R_wc.T
    jj, ii = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    d = np.stack([(jj + 0.5 - camera.cx) / camera.fx, (ii + 0.5 - camera.cy) / camera.fy,
                  np.ones(jj.shape)], -1).reshape(-1, 3)
    best = math.inf
    for k in range(len(mat)):
        tu = R_wc @ mat.frames[k, :, 0]
        tv = R_wc @ mat.frames[k, :, 1]
        tw = np.cross(tu, tv)
        den = d @ tw
        ok = np.abs(den) >= 1e-9
        t = (centers[k] @ tw) / np.where(ok, den, 1.0)
        ok &= t > NEAR
        if not ok.any():
            continue
        x = t[ok, None] * d[ok] - centers[k]
        r = np.hypot((x @ tu) / mat.scales[k, 0], (x @ tv) / mat.scales[k, 1])
        cos = np.abs(den[ok]) / np.linalg.norm(d[ok], axis=1)
        best = min(best, float(np.min(np.abs(r - 3.0) * cos)))
    return best


def finite_diff(fn: Callable[[np.ndarray], float], params: np.ndarray, h: float | None = None,
                indices=None) -> np.ndarray:
    """Central differences in float64 with step ``1e-4 * max(1, |theta|)``.

    ``indices`` restricts evaluation to selected flat positions (others
    are left at 0).
    """
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        step = h if h is not None else 1e-4 * max(1.0, abs(old))
        flat[i] = old + step
        fp = fn(theta)
        flat[i] = old - step
        fm = fn(theta)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at parameter index {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(theta.shape)


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|n|_inf, floor) over the whole array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(n))) if n.size else 0.0, floor)
    return float(np.max(np.abs(a - n))) / scale if a.size else 0.0


# --- scalar shading reference -------------------------------------------


def _srgb(x: float) -> float:
    x = min(max(x, 0.0), 1.0)
    return 12.92 * x if x <= 0.0031308 else 1.055 * x ** (1.0 / 2.4) - 0.055


def _texel(level: np.ndarray, i: int, j: int) -> np.ndarray:
    h, w = level.shape[:2]
    return level[min(max(i, 0), h - 1), j % w]


def _bilinear(level: np.ndarray, u: float, v: float) -> np.ndarray:
    h, w = level.shape[:2]
    x = u * w - 0.5
    y = v * h - 0.5
    j0 = math.floor(x)
    i0 = math.floor(y)
    fx = x - j0
    fy = y - i0
    return ((1 - fx) * (1 - fy) * _texel(level, i0, j0) + fx * (1 - fy) * _texel(level, i0, j0 + 1)
            + (1 - fx) * fy * _texel(level, i0 + 1, j0) + fx * fy * _texel(level, i0 + 1, j0 + 1))


def reference_pyramid(base: np.ndarray, n_levels: int) -> list:
    levels = [np.asarray(base, dtype=np.float64)]
    for _ in range(1, n_levels):
        prev = levels[-1]
        h, w, c = prev.shape
        nxt = np.zeros((h // 2, w // 2, c))
        for i in range(h // 2):
            for j in range(w // 2):
                nxt[i, j] = (prev[2 * i, 2 * j] + prev[2 * i + 1, 2 * j]
                             + prev[2 * i, 2 * j + 1] + prev[2 * i + 1, 2 * j + 1]) / 4.0
        levels.append(nxt)
    return levels


def reference_shade_pixel(
    diffuse, roughness, normal, alpha, f_local, view_dir, levels, weights, biases, background,
    mode: str = "full", warmup: bool = False,
):
    """Final sRGB colour of one pixel computed with scalar Python math."""
    bg = [float(b) for b in background]
    if alpha <= 1e-4 or warmup:
        spec = [0.0, 0.0, 0.0]
    else:
        n = [float(c) for c in normal]
        vv = [float(c) for c in view_dir]
        ndv = sum(a * b for a, b in zip(n, vv))
        r = [2.0 * ndv * n[i] - vv[i] for i in range(3)]
        cos_nv = max(ndv, 0.0)
        u = math.atan2(r[1], r[0]) / (2.0 * math.pi) + 0.5
        v = math.acos(min(max(r[2], -1.0), 1.0)) / math.pi
        n_levels = len(levels)
        lev = min(max(float(roughness) * (n_levels - 1), 0.0), n_levels - 1.0)
        lo = int(math.floor(lev))
        hi = min(lo + 1, n_levels - 1)
        fr = lev - lo
        fg = (1 - fr) * _bilinear(levels[lo], u, v) + fr * _bilinear(levels[hi], u, v)
        fl = [float(c) for c in f_local]
        if mode == "full":
            x = list(fg) + fl + [float(roughness), cos_nv]
        elif mode in ("no_local_set",):
            x = list(fg) + fl + [float(roughness), cos_nv]
        elif mode == "no_local_features":
            x = list(fg) + [float(roughness), cos_nv]
        elif mode == "sum_mix":
            x = [fg[i] + fl[i] for i in range(len(fl))] + [float(roughness), cos_nv]
        elif mode == "no_phys":
            x = list(fg) + fl
        else:
            raise ValueError(mode)
        h = x
        for li, (Wm, b) in enumerate(zip(weights, biases)):
            z = [sum(h[i] * Wm[i][j] for i in range(len(h))) + b[j] for j in range(len(b))]
            if li < len(weights) - 1:
                h = [max(zz, 0.0) for zz in z]
            else:
                h = [max(zz, 0.0) + math.log1p(math.exp(-abs(zz))) for zz in z]
        spec = h
    out = []
    for c in range(3):
        lin = float(diffuse[c]) + spec[c] + (1.0 - float(alpha)) * bg[c]
        out.append(_srgb(lin))
    return np.array(out)


__all__ = [
    "brute_force_render",
    "cutoff_margin",
    "finite_diff",
    "reference_pyramid",
    "reference_shade_pixel",
    "rel_error",
]


from .toyscene import SceneKind, ToyScene, make_toy_scene  # noqa: E402

__all__ += ["SceneKind", "ToyScene", "make_toy_scene"]
