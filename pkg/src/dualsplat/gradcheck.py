"""Finite-difference checks of every analytic gradient in the pipeline.

Each suite builds a small float64 problem, differentiates a random linear
functional of the module output analytically and by central differences
(:func:`oracle.finite_diff`), and reports the max relative error per
parameter group.

The composed functions have kinks (3-sigma cutoff, ReLU, mip-level floor,
bilinear cell edges, colour clamp). Problems are drawn from successive
seeds until every kink is at least ``KINK_MARGIN`` away from the current
point, so a central difference never straddles one. The selection looks
only at the forward pass, never at the gradient comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .losses import (
    depth_prior_loss,
    normal_consistency_from_buffers,
    normal_prior_loss,
    opacity_bce_loss,
    photometric_loss,
)
from .oracle import cutoff_margin, finite_diff, rel_error
from .rasterizer import RenderBuffers, render, render_backward
from .scene import Camera, init_scene
from .shader import ShaderMLP, input_dim, shade_backward, shade_image
from .sphmip import SphMip, dir_to_spherical, level_from_roughness

TOLERANCE = 1e-3
KINK_MARGIN = 1e-3
MODULES = ("rasterizer", "sphmip", "shader", "losses")


@dataclass
class GroupResult:
    module: str
    group: str
    error: float
    size: int

    @property
    def ok(self) -> bool:
        return bool(self.error <= TOLERANCE)


def _compare(module, group, analytic, fn, theta, corrupt, **fd_kw) -> GroupResult:
    a = np.array(analytic, dtype=np.float64)
    name = f"{module}.{group}"
    if corrupt and name.startswith(corrupt):
        # negative control: a wrong analytic gradient must be caught
        a = a * 1.05 + 0.05 * max(float(np.max(np.abs(a))), 1.0)
    num = finite_diff(fn, theta, **fd_kw)
    idx = fd_kw.get("indices")
    if idx is not None:
        a = a.reshape(-1)[idx]
        num = num.reshape(-1)[idx]
    return GroupResult(module, group, rel_error(a, num), int(np.size(num)))


# --- rasterizer ---------------------------------------------------------------

def _raster_problem(seed: int):
    for s in range(seed, seed + 1000):
        rng = np.random.default_rng(s)
        n = 8
        geo, local = init_scene(([-0.6] * 3, [0.6] * 3), n, n, s, dtype=np.float64)
        for g in (geo, local):
            g.log_scales[:] = np.log(rng.uniform(0.2, 0.45, size=(n, 2)))
            g.raw_opacities[:] = rng.normal(0.0, 1.0, size=n)
        geo.payload.diffuse_rgb[:] = rng.normal(size=(n, 3))
        geo.payload.raw_roughness[:] = rng.normal(size=n)
        local.payload.features[:] = rng.normal(size=local.payload.features.shape)
        eye = np.array([0.3, 0.2, -3.0]) + rng.normal(scale=0.2, size=3)
        cam = Camera.look_at(eye, [0, 0, 0], [0, -1, 0], 20, 16, np.pi / 3)
        if min(cutoff_margin(geo, cam), cutoff_margin(local, cam)) >= KINK_MARGIN:
            return geo, local, cam, rng
    raise RuntimeError("no kink-free rasterizer problem found")


def check_rasterizer(seed: int = 0, corrupt: Optional[str] = None) -> list[GroupResult]:
    geo, local, cam, rng = _raster_problem(seed)
    H, W = cam.height, cam.width
    results = []
    for label, gset, bg in (("geo", geo, [0.3, 0.5, 0.7]), ("local", local, None)):
        probe = render(gset, cam, background=bg)
        w = {
            "payload": rng.normal(size=probe.payload.shape),
            "alpha": rng.normal(size=(H, W)),
            "depth": rng.normal(size=(H, W)),
            "normal": rng.normal(size=(H, W, 3)),
        }

        def loss(gs, bg=bg, w=w):
            b = render(gs, cam, background=bg)
            return float(sum(np.sum(w[k] * getattr(b, k)) for k in w))

        grads = render_backward(gset, cam, probe, w)
        for name, arr in gset.params().items():
            def fn(x, name=name, gset=gset, loss=loss):
                return loss(gset.with_params({**gset.params(), name: x}))
            results.append(_compare("rasterizer", f"{label}.{name}", grads[name], fn, arr, corrupt))
    return results


# --- Sph-Mip ------------------------------------------------------------------

def check_sphmip(seed: int = 0, corrupt: Optional[str] = None) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    n_levels = 4
    sm = SphMip(rng.normal(size=(8, 16, 3)), n_levels)
    x = rng.random((40, 2))
    lev = rng.uniform(0.0, n_levels - 1.0, 40)
    g_out = rng.normal(size=(40, 3))
    _, cache = sm.query(x, lev, return_cache=True)
    g_base, _, _ = sm.query_backward(cache, g_out)

    def fn(base):
        return float(np.sum(g_out * SphMip(base, n_levels).query(x, lev)))

    return [_compare("sphmip", "base", g_base, fn, sm.base, corrupt)]


# --- shader -------------------------------------------------------------------

def _shader_margin(res, sm: SphMip) -> float:
    c = res._cache
    if not c["active"]:
        return np.inf
    margins = [np.min(np.abs(res.linear)), np.min(np.abs(res.linear - 1.0)), np.min(np.abs(c["ndv"]))]
    acts, pre = c["m_cache"]
    margins += [np.min(np.abs(z)) for z in pre[:-1]]
    lev = c["lev"]
    inner = (lev > 0) & (lev < sm.n_levels - 1)
    if inner.any():
        margins.append(np.min(np.abs(lev[inner] - np.round(lev[inner]))))
    x = dir_to_spherical(c["r"])
    for L in np.unique(np.concatenate([np.floor(lev), np.minimum(np.floor(lev) + 1, sm.n_levels - 1)])):
        h, w = sm.levels[int(L)].shape[:2]
        for t in (x[:, 0] * w - 0.5, x[:, 1] * h - 0.5):
            margins.append(np.min(np.abs(t - np.round(t))) / max(h, w))
    return float(min(margins))


def _shader_problem(seed: int, mode: str):
    d = 3
    H, W = 5, 6
    for s in range(seed, seed + 1000):
        rng = np.random.default_rng(s)
        cam = Camera.look_at([0.2, -0.3, -2.5], [0, 0, 0], [0, -1, 0], W, H, np.pi / 3)
        v = -cam.ray_dirs_world()
        n = v + rng.normal(scale=0.3, size=(H, W, 3))
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        alpha = rng.uniform(0.3, 0.9, size=(H, W))
        color = rng.uniform(0.05, 0.3, size=(H, W, 3)) * alpha[..., None]
        rough = rng.uniform(0.05, 0.95, size=(H, W))
        buf = RenderBuffers(color, np.ones((H, W)), n, alpha, rough)
        f_local = rng.normal(scale=0.5, size=(H, W, d))
        sm = SphMip(rng.normal(scale=0.5, size=(8, 16, d)), 4)
        mlp = ShaderMLP.init(input_dim(mode, d), s, width=16, depth=2, dtype=np.float64)
        mlp.biases[-1][:] = -2.0
        bg = np.array([0.1, 0.15, 0.2])
        res = shade_image(buf, f_local, sm, mlp, cam, bg, mode=mode)
        if _shader_margin(res, sm) >= KINK_MARGIN:
            return buf, f_local, sm, mlp, cam, bg, rng
    raise RuntimeError("no kink-free shader problem found")


def check_shader(seed: int = 0, corrupt: Optional[str] = None, mode: str = "full") -> list[GroupResult]:
    buf, f_local, sm, mlp, cam, bg, rng = _shader_problem(seed, mode)
    res = shade_image(buf, f_local, sm, mlp, cam, bg, mode=mode)
    w = rng.normal(size=res.image.shape)
    g = shade_backward(res, sm, mlp, w)

    def image_loss(b=buf, fl=f_local, s=sm, m=mlp):
        return float(np.sum(w * shade_image(b, fl, s, m, cam, bg, mode=mode).image))

    def with_buf(**kw):
        fields = dict(color_or_feature=buf.color_or_feature, depth=buf.depth, normal=buf.normal,
                      alpha=buf.alpha, roughness=buf.roughness)
        fields.update(kw)
        return RenderBuffers(**fields)

    out = [
        _compare("shader", "buffer.color", g["geo"]["color_or_feature"],
                 lambda x: image_loss(b=with_buf(color_or_feature=x)), buf.color_or_feature, corrupt),
        _compare("shader", "buffer.alpha", g["geo"]["alpha"],
                 lambda x: image_loss(b=with_buf(alpha=x)), buf.alpha, corrupt),
        _compare("shader", "buffer.normal", g["geo"]["normal"],
                 lambda x: image_loss(b=with_buf(normal=x)), buf.normal, corrupt),
        _compare("shader", "buffer.roughness", g["geo"]["roughness"],
                 lambda x: image_loss(b=with_buf(roughness=x)), buf.roughness, corrupt),
        _compare("shader", "sphmip", g["sphmip"], lambda x: image_loss(s=SphMip(x, sm.n_levels)), sm.base, corrupt),
    ]
    if g["f_local"] is not None:
        out.append(_compare("shader", "f_local", g["f_local"], lambda x: image_loss(fl=x), f_local, corrupt))
    for name, arr in mlp.params().items():
        def fn(x, name=name):
            m = ShaderMLP([w_.copy() for w_ in mlp.weights], [b_.copy() for b_ in mlp.biases])
            m.set_params({**m.params(), name: x})
            return image_loss(m=m)
        out.append(_compare("shader", f"mlp.{name}", g["mlp"][name], fn, arr, corrupt))
    return out


# --- losses -------------------------------------------------------------------

def check_losses(seed: int = 0, corrupt: Optional[str] = None) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    H, W = 12, 13
    p = rng.uniform(0, 1, (H, W, 3))
    q = rng.uniform(0, 1, (H, W, 3))
    out = []
    _, g = photometric_loss(p, q, 0.2)
    out.append(_compare("losses", "color", g["image"], lambda x: photometric_loss(x, q, 0.2)[0], p, corrupt))

    a = rng.uniform(0.05, 1.0, (H, W))
    ns = rng.normal(scale=0.3, size=(H, W, 3))
    _, g = normal_consistency_from_buffers(a, ns)
    out.append(_compare("losses", "normal.alpha", g["alpha"],
                        lambda x: normal_consistency_from_buffers(x, ns)[0], a, corrupt))
    out.append(_compare("losses", "normal.normal_sum", g["normal_sum"],
                        lambda x: normal_consistency_from_buffers(a, x)[0], ns, corrupt))

    pa = rng.uniform(0.01, 0.99, (H, W))
    ga = rng.uniform(0, 1, (H, W))
    _, g = opacity_bce_loss(pa, ga)
    out.append(_compare("losses", "alpha_bce", g["alpha"], lambda x: opacity_bce_loss(x, ga)[0], pa, corrupt))

    depth = rng.uniform(1, 3, (H, W))
    ref = rng.uniform(0, 1, (H, W))
    mask = rng.uniform(size=(H, W)) > 0.3
    _, g = depth_prior_loss(depth, ref, mask)
    out.append(_compare("losses", "depth_prior", g["depth"],
                        lambda x: depth_prior_loss(x, ref, mask)[0], depth, corrupt))

    nrm = rng.normal(size=(H, W, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    nref = rng.normal(size=(H, W, 3))
    _, g = normal_prior_loss(nrm, nref, mask)
    out.append(_compare("losses", "normal_prior", g["normal"],
                        lambda x: normal_prior_loss(x, nref, mask)[0], nrm, corrupt))
    return out


SUITES: dict[str, Callable[..., list]] = {
    "rasterizer": check_rasterizer,
    "sphmip": check_sphmip,
    "shader": check_shader,
    "losses": check_losses,
}


def run_gradcheck(modules=None, seed: int = 0, corrupt: Optional[str] = None) -> list[GroupResult]:
    """Run the selected suites (all by default)."""
    names = list(modules) if modules else list(MODULES)
    bad = [m for m in names if m not in SUITES]
    if bad:
        raise ValueError(f"unknown gradcheck module(s) {', '.join(bad)}; valid: {', '.join(MODULES)}")
    out = []
    for m in names:
        out.extend(SUITES[m](seed=seed, corrupt=corrupt))
    return out


__all__ = ["GroupResult", "KINK_MARGIN", "MODULES", "TOLERANCE", "check_losses", "check_rasterizer",
           "check_shader", "check_sphmip", "run_gradcheck"]
