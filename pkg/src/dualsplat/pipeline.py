"""Full forward/backward pass over one view, shared by training, rendering and eval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .color import linear_to_srgb
from .losses import metrics
from .rasterizer import RenderBuffers, render, render_backward
from .scene import Camera, GaussianSet
from .shader import MODES, ShadeResult, ShaderError, ShaderMLP, shade_backward, shade_image
from .sphmip import SphMip


def has_local_set(mode: str) -> bool:
    return mode in ("full", "sum_mix", "no_phys")


def geo_carries_features(mode: str) -> bool:
    return mode == "no_local_set"


@dataclass
class Model:
    geo: GaussianSet
    local: Optional[GaussianSet]
    sphmip: SphMip
    mlp: ShaderMLP
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ShaderError(f"unknown ablation mode {self.mode!r}; valid: {', '.join(MODES)}")
        if has_local_set(self.mode) and self.local is None:
            raise ShaderError(f"mode {self.mode!r} needs a LOCAL set")
        if geo_carries_features(self.mode) and self.geo.feature_dim == 0:
            raise ShaderError("mode 'no_local_set' needs GEO features")

    def params(self) -> dict:
        """Flat ``group.name -> array`` view of every trainable array."""
        out = {f"geo.{k}": v for k, v in self.geo.params().items()}
        if self.local is not None and has_local_set(self.mode):
            out.update({f"local.{k}": v for k, v in self.local.params().items()})
        out["sphmip"] = self.sphmip.base
        out.update({f"mlp.{k}": v for k, v in self.mlp.params().items()})
        return out

    def set_params(self, flat: dict) -> None:
        self.geo = self.geo.with_params({k[4:]: v for k, v in flat.items() if k.startswith("geo.")})
        if self.local is not None and has_local_set(self.mode):
            self.local = self.local.with_params({k[6:]: v for k, v in flat.items() if k.startswith("local.")})
        self.sphmip = SphMip(flat["sphmip"], self.sphmip.n_levels)
        self.mlp.set_params({k[4:]: v for k, v in flat.items() if k.startswith("mlp.")})


@dataclass
class Frame:
    result: ShadeResult
    geo: RenderBuffers
    local: Optional[RenderBuffers]

    @property
    def image(self) -> np.ndarray:
        return self.result.image


def forward(model: Model, camera: Camera, background, warmup: bool = False) -> Frame:
    """GEO buffers (zero background), LOCAL feature buffer, deferred shading."""
    gb = render(model.geo, camera)
    lb = None
    if has_local_set(model.mode):
        lb = render(model.local, camera)
        f_local = lb.color_or_feature
    elif geo_carries_features(model.mode):
        f_local = gb.features
    else:
        f_local = None
    res = shade_image(gb, f_local, model.sphmip, model.mlp, camera, background,
                      warmup_active=warmup, mode=model.mode)
    return Frame(res, gb, lb)


def backward(model: Model, camera: Camera, frame: Frame, g_image: np.ndarray,
             geo_extra: Optional[dict] = None) -> dict:
    """Flat gradient dict matching :meth:`Model.params` (missing groups = no gradient).

    ``geo_extra`` adds loss gradients on GEO buffers (alpha, depth,
    normal, normal_sum) to those coming from the shader.
    """
    sg = shade_backward(frame.result, model.sphmip, model.mlp, g_image)
    g_geo = dict(sg["geo"])
    for key, arr in (geo_extra or {}).items():
        g_geo[key] = g_geo[key] + arr if key in g_geo else arr
    if geo_carries_features(model.mode) and sg["f_local"] is not None:
        g_geo["features"] = sg["f_local"]
    out = {f"geo.{k}": v for k, v in render_backward(model.geo, camera, frame.geo, g_geo).items()}
    if has_local_set(model.mode):
        if sg["f_local"] is not None:
            gl = render_backward(model.local, camera, frame.local, {"color_or_feature": sg["f_local"]})
            out.update({f"local.{k}": v for k, v in gl.items()})
    if sg["sphmip"] is not None:
        out["sphmip"] = sg["sphmip"]
    if sg["mlp"] is not None:
        out.update({f"mlp.{k}": v for k, v in sg["mlp"].items()})
    return out


def target_image(rgba: np.ndarray, background) -> np.ndarray:
    """Straight linear RGBA -> sRGB composited over ``background``."""
    a = rgba[..., 3:4]
    lin = rgba[..., :3] * a + (1.0 - a) * np.asarray(background, dtype=np.float64)
    return linear_to_srgb(np.clip(lin, 0.0, 1.0))


def default_background(has_alpha: bool) -> np.ndarray:
    return np.ones(3) if has_alpha else np.zeros(3)


def evaluate(model: Model, dataset, background) -> dict:
    """Per-view and mean PSNR / SSIM / normal MAE."""
    rows = []
    for i, cam in enumerate(dataset.cameras):
        fr = forward(model, cam, background)
        gt = target_image(dataset.images[i], background)
        pn = gn = mask = None
        if dataset.normal_priors is not None and dataset.normal_priors[i] is not None:
            gn = dataset.normal_priors[i]
            mask = (np.linalg.norm(gn, axis=-1) > 0.5) & (fr.geo.alpha > 1e-4)
            pn = fr.geo.normal
            if not mask.any():
                pn = gn = None
        m = metrics(fr.image, gt, pn, gn, mask)
        m["view"] = dataset.names[i] if i < len(dataset.names) else str(i)
        rows.append(m)
    mean = {"view": "mean"}
    for key in ("psnr", "ssim", "mae"):
        vals = [r[key] for r in rows if r[key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    return {"views": rows, "mean": mean}


__all__ = ["Frame", "Model", "backward", "default_background", "evaluate", "forward",
           "geo_carries_features", "has_local_set", "target_image"]
