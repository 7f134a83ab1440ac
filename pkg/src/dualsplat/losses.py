"""Training losses and evaluation metrics.

Every loss returns ``(value, grads)`` where ``grads`` maps the name of the
buffer it reads to dL/d(buffer). That keeps the combination in
:func:`total_loss` a plain weighted sum and lets each term be
finite-difference checked on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BCE_EPS = 1e-6
NORMAL_ALPHA_MIN = 1e-4
PSNR_CAP = 100.0


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    ssim_lambda: float = 0.2
    normal: float = 0.05
    normal_start: int = 700
    prior: float = 0.05
    normal_cos: float = 1.0
    bce_enabled: bool = True

    def validate(self) -> None:
        for name in ("ssim_lambda", "normal", "prior", "normal_cos"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be >= 0")
        if self.ssim_lambda > 1:
            raise LossError("ssim_lambda must lie in [0, 1]")


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise LossError(f"shape mismatch: {a.shape} vs {b.shape}")


# --- SSIM ------------------------------------------------------------------


def _gauss_taps():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


@lru_cache(maxsize=16)
def _blur_matrix(n: int) -> np.ndarray:
    """Dense (n, n) operator: reflect-pad (edge not repeated) then filter."""
    eye = np.eye(n)
    # 'mirror' in scipy is the d c b | a b c d padding
    m = correlate1d(eye, _gauss_taps(), axis=0, mode="mirror")
    m.setflags(write=False)
    return m


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur of (H, W, C)."""
    bh = _blur_matrix(x.shape[0])
    bw = _blur_matrix(x.shape[1])
    return np.einsum("ij,jkc,lk->ilc", bh, x, bw, optimize=True)


def _blur_t(x: np.ndarray) -> np.ndarray:
    bh = _blur_matrix(x.shape[0])
    bw = _blur_matrix(x.shape[1])
    return np.einsum("ji,jkc,kl->ilc", bh, x, bw, optimize=True)


def _as3(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _ssim_parts(x, y):
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + c1
    a2 = 2 * (exy - mx * my) + c2
    d1 = mx * mx + my * my + c1
    d2 = (exx - mx * mx) + (eyy - my * my) + c2
    return mx, my, a1, a2, d1, d2


def ssim_map(x, y) -> np.ndarray:
    x, y = _as3(x), _as3(y)
    _check_shapes(x, y)
    _, _, a1, a2, d1, d2 = _ssim_parts(x, y)
    return (a1 * a2) / (d1 * d2)


def ssim(x, y) -> float:
    """Mean SSIM over pixels and channels (data range 1)."""
    return float(np.mean(ssim_map(x, y)))


def ssim_grad(x, y) -> np.ndarray:
    """d mean-SSIM / dx."""
    x, y = _as3(x), _as3(y)
    mx, my, a1, a2, d1, d2 = _ssim_parts(x, y)
    den = d1 * d2
    s = a1 * a2 / den
    up = 1.0 / x.size
    g_a1 = up * a2 / den
    g_a2 = up * a1 / den
    g_d1 = -up * s / d1
    g_d2 = -up * s / d2
    g_mx = g_a1 * 2 * my - g_a2 * 2 * my + g_d1 * 2 * mx - g_d2 * 2 * mx
    g_exy = 2 * g_a2
    g_exx = g_d2
    return _blur_t(g_mx) + 2 * x * _blur_t(g_exx) + y * _blur_t(g_exy)


# --- loss terms --------------------------------------------------------------


def photometric_loss(pred, gt, ssim_lambda: float = 0.2):
    """``(1 - lambda) L1 + lambda (1 - SSIM)``; grads keyed ``image``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    diff = pred - gt
    l1 = float(np.mean(np.abs(diff)))
    g = (1.0 - ssim_lambda) * np.sign(diff) / diff.size
    value = (1.0 - ssim_lambda) * l1
    if ssim_lambda > 0:
        value += ssim_lambda * (1.0 - ssim(pred, gt))
        g = g - ssim_lambda * ssim_grad(pred, gt).reshape(pred.shape)
    return value, {"image": g}


def normal_consistency_loss(normals_i, weights_i, composite) -> float:
    """Per-hit form: mean over covered pixels of ``sum_i w_i (1 - n_i . N)``.

    ``normals_i`` and ``weights_i`` are per-pixel sequences (one entry per
    pixel, each an (m, 3) / (m,) array); ``composite`` is (P, 3).
    """
    total = 0.0
    count = 0
    for n_i, w_i, N in zip(normals_i, weights_i, composite):
        w_i = np.asarray(w_i, dtype=np.float64)
        if w_i.sum() <= NORMAL_ALPHA_MIN:
            continue
        total += float(np.sum(w_i * (1.0 - np.asarray(n_i) @ np.asarray(N))))
        count += 1
    return total / count if count else 0.0


def normal_consistency_from_buffers(alpha, normal_sum):
    """Buffer form of the same loss.

    With ``N = m / |m|`` and ``m = sum_i w_i n_i``, the per-pixel sum
    collapses to ``alpha - |m|``. Grads keyed ``alpha`` and ``normal_sum``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    m = np.asarray(normal_sum, dtype=np.float64)
    mask = alpha > NORMAL_ALPHA_MIN
    count = int(mask.sum())
    g_alpha = np.zeros_like(alpha)
    g_m = np.zeros_like(m)
    if count == 0:
        return 0.0, {"alpha": g_alpha, "normal_sum": g_m}
    nn = np.linalg.norm(m, axis=-1)
    value = float(np.sum((alpha - nn)[mask])) / count
    g_alpha[mask] = 1.0 / count
    safe = np.where(nn > 0, nn, 1.0)
    g_m[mask] = -(m / safe[..., None])[mask] / count
    return value, {"alpha": g_alpha, "normal_sum": g_m}


def opacity_bce_loss(pred_alpha, gt_alpha):
    """Mean binary cross entropy with the prediction clamped away from 0 and 1."""
    p_raw = np.asarray(pred_alpha, dtype=np.float64)
    a = np.asarray(gt_alpha, dtype=np.float64)
    _check_shapes(p_raw, a)
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    value = float(np.mean(-(a * np.log(p) + (1 - a) * np.log(1 - p))))
    inside = (p_raw > BCE_EPS) & (p_raw < 1.0 - BCE_EPS)
    g = np.where(inside, (-a / p + (1 - a) / (1 - p)) / a.size, 0.0)
    return value, {"alpha": g}


def affine_fit(d, ref):
    """Least-squares ``(s, t)`` for ``s d + t ~ ref``; ``s = 0`` when ``d`` is constant."""
    d = np.asarray(d, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    md, mr = d.mean(), ref.mean()
    var = np.mean((d - md) ** 2)
    if var <= 1e-14 * max(1.0, float(np.mean(d * d))):
        return 0.0, float(mr)
    s = float(np.mean((d - md) * (ref - mr)) / var)
    return s, float(mr - s * md)


def depth_prior_loss(depth, ref, mask):
    """Mean squared residual after the best affine map of ``depth`` onto ``ref``.

    The fitted ``(s, t)`` is optimal, so its own derivative drops out of
    the gradient. Grads keyed ``depth``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(depth, ref)
    n = int(mask.sum())
    if n == 0:
        raise LossError("depth prior: empty mask")
    d, r = depth[mask], ref[mask]
    s, t = affine_fit(d, r)
    res = s * d + t - r
    g = np.zeros_like(depth)
    g[mask] = 2.0 * s * res / n
    return float(np.mean(res * res)), {"depth": g}


def normal_prior_loss(normal, ref, mask, cos_weight: float = 1.0):
    """Mean over ``mask`` of ``|N - N_ref|_1 + w (1 - cos(N, N_ref))``. Grads keyed ``normal``."""
    N = np.asarray(normal, dtype=np.float64)
    R = np.asarray(ref, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(N, R)
    n = int(mask.sum())
    if n == 0:
        raise LossError("normal prior: empty mask")
    a, b = N[mask], R[mask]
    na = np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), 1e-12)
    nb = np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)
    value = float(np.sum(np.abs(a - b)) + cos_weight * np.sum(1.0 - cos)) / n
    g_cos = b / (na * nb) - cos * a / (na * na)
    g = np.zeros_like(N)
    g[mask] = (np.sign(a - b) - cos_weight * g_cos) / n
    return value, {"normal": g}


# --- combination -----------------------------------------------------------------


@dataclass
class TotalLoss:
    value: float
    terms: dict  # name -> unweighted value
    grads: dict  # buffer name -> dL/d(buffer)


def total_loss(terms: dict, weights: LossWeights, iteration: int = 0) -> TotalLoss:
    """Weighted sum ``L_c + lambda_n L_n + L_alpha + lambda_prior L_prior``.

    ``terms`` maps ``color``, ``normal``, ``alpha``, ``depth_prior`` and
    ``normal_prior`` to ``(value, grads)`` pairs; absent terms count as 0.
    The normal term only switches on from ``weights.normal_start``.
    """
    w = {
        "color": 1.0,
        "normal": weights.normal if iteration >= weights.normal_start else 0.0,
        "alpha": 1.0 if weights.bce_enabled else 0.0,
        "depth_prior": weights.prior,
        "normal_prior": weights.prior,
    }
    unknown = set(terms) - set(w)
    if unknown:
        raise LossError(f"unknown loss terms: {sorted(unknown)}")
    value = 0.0
    values = {}
    grads: dict = {}
    for name, (v, g) in terms.items():
        values[name] = float(v)
        wt = w[name]
        if wt == 0.0:
            continue
        value += wt * float(v)
        for key, arr in g.items():
            grads[key] = grads[key] + wt * arr if key in grads else wt * arr
    return TotalLoss(value, values, grads)


# --- metrics -----------------------------------------------------------------------


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def normal_mae(pred, gt, mask=None) -> float:
    """Mean angle in degrees between unit normals over ``mask``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    if mask is None:
        mask = np.linalg.norm(gt, axis=-1) > 0
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise LossError("normal MAE: empty mask")
    dots = np.clip(np.sum(pred[mask] * gt[mask], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(dots))))


def metrics(pred, gt, pred_normals=None, gt_normals=None, normal_mask=None) -> dict:
    out = {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt), "mae": None}
    if pred_normals is not None and gt_normals is not None:
        out["mae"] = normal_mae(pred_normals, gt_normals, normal_mask)
    return out


__all__ = [
    "LossError",
    "LossWeights",
    "TotalLoss",
    "affine_fit",
    "depth_prior_loss",
    "metrics",
    "normal_consistency_from_buffers",
    "normal_consistency_loss",
    "normal_mae",
    "normal_prior_loss",
    "opacity_bce_loss",
    "photometric_loss",
    "psnr",
    "ssim",
    "ssim_grad",
    "ssim_map",
    "total_loss",
]
