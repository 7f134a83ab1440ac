"""Deferred specular shading.

Per pixel: reflect the view direction about the composited GEO normal,
look the reflection direction up in the Sph-Mip at a roughness-dependent
level, concatenate with the splatted local feature and the conditioning
terms (roughness, clamped cos(n, v)), and let a small MLP predict
non-negative specular radiance. The final linear colour is
``diffuse + specular`` composited over the background and converted to
sRGB.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .color import linear_to_srgb, linear_to_srgb_grad
from .rasterizer import RenderBuffers
from .scene import Camera
from .sphmip import SphMip, dir_to_spherical, dir_to_spherical_grad, level_from_roughness

SHADE_ALPHA_MIN = 1e-4
MODES = ("full", "no_local_set", "no_local_features", "sum_mix", "no_phys")


class ShaderError(ValueError):
    pass


def input_dim(mode: str, feat_dim: int = 4) -> int:
    if mode in ("full", "no_local_set"):
        return 2 * feat_dim + 2
    if mode in ("no_local_features", "sum_mix"):
        return feat_dim + 2
    if mode == "no_phys":
        return 2 * feat_dim
    raise ShaderError(f"unknown mode {mode!r}; expected one of {MODES}")


def uses_local_features(mode: str) -> bool:
    return mode != "no_local_features"


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ShaderMLP:
    """in -> 64 -> 64 -> 64 -> 3 with ReLU hidden units and softplus output."""

    def __init__(self, weights: list, biases: list):
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, in_dim: int, seed: int, width: int = 64, depth: int = 3, out_dim: int = 3,
             dtype=np.float32) -> "ShaderMLP":
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [width] * depth + [out_dim]
        ws, bs = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / a)  # He-uniform
            ws.append(rng.uniform(-bound, bound, size=(a, b)).astype(dtype))
            bs.append(np.zeros(b, dtype=dtype))
        # start with a dim specular term
        ws[-1] *= 0.1
        bs[-1][:] = -3.0
        return cls(ws, bs)

    @classmethod
    def zeros(cls, in_dim: int, width: int = 64, depth: int = 3, out_dim: int = 3,
              out_bias: float = 0.0, dtype=np.float64) -> "ShaderMLP":
        dims = [in_dim] + [width] * depth + [out_dim]
        ws = [np.zeros((a, b), dtype=dtype) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b, dtype=dtype) for b in dims[1:]]
        bs[-1][:] = out_bias
        return cls(ws, bs)

    @property
    def in_dim(self) -> int:
        return int(self.weights[0].shape[0])

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, params: dict) -> None:
        n = len(self.weights)
        self.weights = [params[f"w{i}"] for i in range(n)]
        self.biases = [params[f"b{i}"] for i in range(n)]

    def validate(self) -> None:
        for name, p in self.params().items():
            if not np.all(np.isfinite(p)):
                raise ShaderError(f"non-finite MLP parameter {name}")

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShaderError(f"MLP expects inputs of width {self.in_dim}, got {x.shape}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ np.asarray(w, dtype=np.float64) + np.asarray(b, dtype=np.float64)
            pre.append(z)
            h = softplus(z) if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, g_out: np.ndarray):
        """Returns (param grads dict, dL/dx)."""
        acts, pre = cache
        grads = {}
        g = g_out * _sigmoid(pre[-1])
        for i in range(len(self.weights) - 1, -1, -1):
            grads[f"w{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ np.asarray(self.weights[i], dtype=np.float64).T
            if i > 0:
                g = g * (pre[i - 1] > 0)
        return grads, g


def reflect_dir(n: np.ndarray, v: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.linalg.norm(n, axis=-1) == 0) or np.any(np.linalg.norm(v, axis=-1) == 0):
        raise ShaderError("zero-length vector")
    ndv = np.sum(n * v, axis=-1, keepdims=True)
    return 2.0 * ndv * n - v


def cos_nv(n: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.maximum(np.sum(np.asarray(n) * np.asarray(v), axis=-1), 0.0)


def assemble_inputs(mode, f_global, f_local, rough, cosv):
    r = rough[:, None]
    c = cosv[:, None]
    if mode in ("full", "no_local_set"):
        return np.concatenate([f_global, f_local, r, c], axis=1)
    if mode == "no_local_features":
        return np.concatenate([f_global, r, c], axis=1)
    if mode == "sum_mix":
        return np.concatenate([f_global + f_local, r, c], axis=1)
    if mode == "no_phys":
        return np.concatenate([f_global, f_local], axis=1)
    raise ShaderError(f"unknown mode {mode!r}")


def split_input_grads(mode, g, d):
    """dL/d(input) -> (g_global, g_local, g_rough, g_cos)."""
    z = np.zeros(g.shape[0])
    if mode in ("full", "no_local_set"):
        return g[:, :d], g[:, d : 2 * d], g[:, 2 * d], g[:, 2 * d + 1]
    if mode == "no_local_features":
        return g[:, :d], None, g[:, d], g[:, d + 1]
    if mode == "sum_mix":
        return g[:, :d], g[:, :d], g[:, d], g[:, d + 1]
    if mode == "no_phys":
        return g[:, :d], g[:, d : 2 * d], z, z
    raise ShaderError(f"unknown mode {mode!r}")


def shade_specular(mlp: ShaderMLP, inputs: np.ndarray):
    """C_spec for a batch of assembled input rows, plus the backward cache."""
    return mlp.forward(inputs)


def _over_background(c_diff, c_spec, alpha, background):
    bg = np.asarray(background, dtype=np.float64)
    return np.asarray(c_diff) + np.asarray(c_spec) + (1.0 - np.asarray(alpha))[..., None] * bg


def compose_final(c_diff, c_spec, alpha, background):
    """Linear colour -> composite over background -> clamp -> sRGB.

    ``c_diff`` is premultiplied by alpha (it comes straight from
    compositing), so the background enters with weight ``1 - alpha``.
    """
    return linear_to_srgb(np.clip(_over_background(c_diff, c_spec, alpha, background), 0.0, 1.0))


@dataclass
class ShadeResult:
    image: np.ndarray  # (H, W, 3) sRGB
    linear: np.ndarray  # (H, W, 3) before clamp
    c_diff: np.ndarray
    c_spec: np.ndarray
    f_global: np.ndarray  # (H, W, d)
    f_local: Optional[np.ndarray]
    roughness: np.ndarray
    normal: np.ndarray
    mode: str
    warmup: bool
    _cache: dict = field(default=None, repr=False)


def view_dirs(camera: Camera) -> np.ndarray:
    """Unit vectors from each pixel's surface point toward the camera, (H, W, 3)."""
    return -camera.ray_dirs_world()


def shade_image(
    geo: RenderBuffers,
    f_local_map: Optional[np.ndarray],
    sphmip: SphMip,
    mlp: ShaderMLP,
    camera: Camera,
    background,
    warmup_active: bool = False,
    mode: str = "full",
) -> ShadeResult:
    """Full deferred pass. ``geo`` must be rendered with a zero background."""
    H, W = geo.alpha.shape
    if geo.normal.shape != (H, W, 3) or geo.roughness.shape != (H, W):
        raise ShaderError("GEO buffer shapes disagree")
    if f_local_map is not None and f_local_map.shape[:2] != (H, W):
        raise ShaderError(f"local feature map {f_local_map.shape[:2]} does not match {(H, W)}")
    if (camera.height, camera.width) != (H, W):
        raise ShaderError("camera and buffers differ in size")
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    d = sphmip.channels
    c_diff = geo.color_or_feature
    spec = np.zeros((H, W, 3))
    f_global = np.zeros((H, W, d))
    mask = geo.alpha > SHADE_ALPHA_MIN
    cache = {"mask": mask, "bg": bg, "active": False}
    if not warmup_active and mask.any():
        v = view_dirs(camera)[mask]
        n = geo.normal[mask]
        rough = geo.roughness[mask]
        ndv = np.sum(n * v, axis=-1)
        r = 2.0 * ndv[:, None] * n - v
        x = dir_to_spherical(r)
        lev = level_from_roughness(rough, sphmip.n_levels)
        fg, q_cache = sphmip.query(x, lev, return_cache=True)
        if uses_local_features(mode):
            if f_local_map is None:
                raise ShaderError(f"mode {mode!r} needs a local feature map")
            fl = f_local_map[mask]
        else:
            fl = None
        cosv = np.maximum(ndv, 0.0)
        inp = assemble_inputs(mode, fg, fl, rough, cosv)
        out, m_cache = shade_specular(mlp, inp)
        spec[mask] = out
        f_global[mask] = fg
        cache.update(active=True, v=v, n=n, rough=rough, ndv=ndv, r=r, lev=lev,
                     q_cache=q_cache, m_cache=m_cache, d=d)
    lin = _over_background(c_diff, spec, geo.alpha, bg)
    image = linear_to_srgb(np.clip(lin, 0.0, 1.0))
    return ShadeResult(image, lin, c_diff, spec, f_global, f_local_map, geo.roughness, geo.normal,
                       mode, warmup_active, cache)


def shade_backward(res: ShadeResult, sphmip: SphMip, mlp: ShaderMLP, g_image: np.ndarray) -> dict:
    """Gradients of a loss on the sRGB image.

    Returns a dict with ``geo`` (buffer-gradient dict for the rasterizer),
    ``f_local`` (H, W, d) or None, ``sphmip`` (base grid) or None, and
    ``mlp`` (param dict) or None.
    """
    cache = res._cache
    bg = cache["bg"]
    lin = res.linear
    inside = (lin >= 0.0) & (lin <= 1.0)
    g_lin = g_image * linear_to_srgb_grad(np.clip(lin, 0.0, 1.0)) * inside
    H, W = g_lin.shape[:2]
    out = {
        "geo": {
            "color_or_feature": g_lin,
            "alpha": -np.sum(g_lin * bg, axis=-1),
        },
        "f_local": None,
        "sphmip": None,
        "mlp": None,
    }
    if not cache["active"]:
        return out
    mask = cache["mask"]
    d = cache["d"]
    g_spec = g_lin[mask]
    g_mlp, g_in = mlp.backward(cache["m_cache"], g_spec)
    g_fg, g_fl, g_rough, g_cos = split_input_grads(res.mode, g_in, d)
    g_base, g_x, g_lev = sphmip.query_backward(cache["q_cache"], g_fg)
    rough = cache["rough"]
    n_max = sphmip.n_levels - 1
    g_rough = g_rough + np.where((rough * n_max > 0) & (rough * n_max < n_max), g_lev * n_max, 0.0)
    g_r = dir_to_spherical_grad(cache["r"], g_x)
    n, v, ndv = cache["n"], cache["v"], cache["ndv"]
    g_n = 2.0 * ndv[:, None] * g_r + 2.0 * np.sum(g_r * n, axis=-1, keepdims=True) * v
    g_n += (g_cos * (ndv > 0))[:, None] * v
    g_normal = np.zeros((H, W, 3))
    g_normal[mask] = g_n
    g_rmap = np.zeros((H, W))
    g_rmap[mask] = g_rough
    out["geo"]["normal"] = g_normal
    out["geo"]["roughness"] = g_rmap
    if g_fl is not None:
        g_flmap = np.zeros((H, W, d))
        g_flmap[mask] = g_fl
        out["f_local"] = g_flmap
    out["sphmip"] = g_base
    out["mlp"] = g_mlp
    return out


__all__ = [
    "MODES",
    "ShadeResult",
    "ShaderError",
    "ShaderMLP",
    "assemble_inputs",
    "compose_final",
    "cos_nv",
    "input_dim",
    "reflect_dir",
    "shade_backward",
    "shade_image",
    "shade_specular",
    "softplus",
    "uses_local_features",
    "view_dirs",
]
