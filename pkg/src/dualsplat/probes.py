"""Geometric probes of a trained model on a MIRROR_PLANE toy scene.

``virtual_image_probe`` locates where the LOCAL set put each reflected
emitter; ``mirror_depth_probe`` measures how far the GEO surface drifts
from the true mirror plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rasterizer import render
from .scene import Camera, GaussianSet
from .toyscene import ToyScene, mirror_labels

MIN_WEIGHT = 0.05  # per-pixel compositing weight for a hit to count at all
REL_SIGNIFICANCE = 0.25  # cluster keeps primitives scoring >= this fraction of the strongest


@dataclass
class VirtualImage:
    emitter: int
    centroid: np.ndarray  # weighted centroid of contributing LOCAL primitives
    mirrored: np.ndarray  # analytic p'
    distance: float  # |centroid - p'|
    emitter_height: float  # distance from the emitter to the mirror plane
    signed_side: float  # signed plane distance of the centroid (< 0 is behind the mirror)
    n_pixels: int
    n_primitives: int

    @property
    def relative_error(self) -> float:
        return self.distance / self.emitter_height

    @property
    def behind_mirror(self) -> bool:
        return bool(self.signed_side < 0.0)


def virtual_image_probe(local: GaussianSet, scene: ToyScene, cameras: list[Camera],
                        min_weight: float = MIN_WEIGHT,
                        rel_significance: float = REL_SIGNIFICANCE) -> list[VirtualImage]:
    """Weighted centroid of the LOCAL cluster behind each emitter's reflection.

    For every view, pixels whose centre ray reflects off the mirror into
    emitter ``k`` are collected. A LOCAL hit there with compositing weight
    ``w >= min_weight`` scores ``w * |f|`` for its primitive, so primitives
    that carry no feature do not count. The cluster is every primitive
    scoring at least ``rel_significance`` of the best one; its
    score-weighted centroid is compared with the analytic mirrored position.
    """
    normal, offset = scene.plane
    centers = np.asarray(local.centers, dtype=np.float64)
    fnorm = np.linalg.norm(np.asarray(local.payload.features, dtype=np.float64), axis=1)
    m = len(scene.emitters)
    acc = np.zeros((m, len(local)))
    npix = np.zeros(m, dtype=int)
    for cam in cameras:
        on, emitter = mirror_labels(scene, cam)
        if not np.any(emitter >= 0):
            continue
        buf = render(local, cam)
        for py, px in zip(*np.nonzero(emitter >= 0)):
            k = emitter[py, px]
            ids, ws, _ = buf.contributions(cam, int(py), int(px))
            keep = ws >= min_weight
            np.add.at(acc[k], ids[keep], ws[keep] * fnorm[ids[keep]])
            npix[k] += 1
    out = []
    for k in range(m):
        w = acc[k]
        if w.max(initial=0.0) > 0:
            w = np.where(w >= rel_significance * w.max(), w, 0.0)
        p_mirror = scene.mirrored[k]
        height = float(abs(scene.emitters[k] @ normal - offset))
        if w.sum() <= 0:
            c = np.full(3, np.nan)
        else:
            c = (w[:, None] * centers).sum(0) / w.sum()
        out.append(VirtualImage(k, c, p_mirror, float(np.linalg.norm(c - p_mirror)), height,
                                float(c @ normal - offset), int(npix[k]), int((w > 0).sum())))
    return out


@dataclass
class PlaneDepth:
    mean_abs: float  # mean |signed plane distance| of unprojected GEO depth
    median_abs: float
    n_pixels: int


def mirror_depth_probe(geo: GaussianSet, scene: ToyScene, cameras: list[Camera],
                       min_alpha: float = 0.5) -> PlaneDepth:
    """Distance from the true plane of points unprojected from GEO expected depth.

    Only pixels whose centre ray meets the mirror first and whose GEO alpha
    is at least ``min_alpha`` are used.
    """
    normal, offset = scene.plane
    dists = []
    for cam in cameras:
        on, _ = mirror_labels(scene, cam)
        buf = render(geo, cam)
        sel = on & (buf.alpha >= min_alpha)
        if not sel.any():
            continue
        rays = cam.ray_dirs_camera()[sel] @ cam.R_cw.T  # camera z = 1
        pts = cam.position + buf.depth[sel][:, None] * rays
        dists.append(pts @ normal - offset)
    d = np.abs(np.concatenate(dists)) if dists else np.zeros(0)
    if d.size == 0:
        return PlaneDepth(float("nan"), float("nan"), 0)
    return PlaneDepth(float(d.mean()), float(np.median(d)), int(d.size))


def mirror_normal_mae(geo: GaussianSet, scene: ToyScene, cameras: list[Camera],
                      min_alpha: float = 0.5) -> float:
    """Mean angle (degrees) between GEO normals and the mirror normal on mirror pixels."""
    normal, _ = scene.plane
    angles = []
    for cam in cameras:
        on, _ = mirror_labels(scene, cam)
        buf = render(geo, cam)
        sel = on & (buf.alpha >= min_alpha)
        if sel.any():
            cos = np.clip(buf.normal[sel] @ normal, -1.0, 1.0)
            angles.append(np.degrees(np.arccos(cos)))
    if not angles:
        return float("nan")
    return float(np.mean(np.concatenate(angles)))


__all__ = [
    "MIN_WEIGHT",
    "REL_SIGNIFICANCE",
    "PlaneDepth",
    "VirtualImage",
    "mirror_depth_probe",
    "mirror_normal_mae",
    "virtual_image_probe",
]
