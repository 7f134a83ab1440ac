"""Synthetic scenes with analytic ground truth.

Three kinds, all z-up, rendered by a small vectorised ray tracer with
``ss x ss`` supersampling per pixel:

* ``DIFFUSE_BLOBS``: a few constant-coloured emissive spheres.
* ``MIRROR_PLANE``: a square mirror in the plane z = 0 with a faint diffuse
  checker, plus emissive spheres floating above it. Mirror hits trace one
  bounce to the spheres or to a procedural environment.
* ``GLOSSY_SPHERE``: one sphere whose roughness grows with height, lit by
  the same environment blurred over a roughness-sized cone.

Primary rays that miss leave alpha 0, so datasets carry coverage masks.
Ground-truth depth (camera z) and world normals come from the centre ray
of each pixel.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import write_dataset
from .scene import Camera, Dataset, SceneError

FOV_X = math.radians(40.0)
CAM_DIST = 3.2
MIRROR_HALF = 1.0
MIRROR_REFLECTANCE = 0.85


class SceneKind(str, enum.Enum):
    DIFFUSE_BLOBS = "diffuse_blobs"
    MIRROR_PLANE = "mirror_plane"
    GLOSSY_SPHERE = "glossy_sphere"

    @classmethod
    def parse(cls, kind) -> "SceneKind":
        if isinstance(kind, cls):
            return kind
        key = str(kind).strip().lower().replace("-", "_")
        for k in cls:
            if k.value == key:
                return k
        valid = ", ".join(k.value for k in cls)
        raise SceneError(f"unknown scene kind {kind!r}; valid kinds: {valid}")


@dataclass
class ToyScene:
    kind: SceneKind
    seed: int
    train: Dataset
    test: Dataset
    descriptor: dict
    emitters: np.ndarray  # (m, 3) sphere centres
    radii: np.ndarray
    colors: np.ndarray  # (m, 3) linear emission
    plane: Optional[tuple] = None  # (unit normal, offset) with n.x = offset
    mirrored: Optional[np.ndarray] = None  # (m, 3) emitter reflections across ``plane``
    bbox: tuple = field(default_factory=lambda: (np.full(3, -1.0), np.full(3, 1.0)))

    @property
    def extent(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))

    def write(self, root) -> Path:
        root = Path(root)
        for split, ds in (("train", self.train), ("test", self.test)):
            write_dataset(root, ds.cameras, ds.images, split, ds.depth_priors, ds.normal_priors)
        return root


def reflect_point(p: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p = np.asarray(p, dtype=np.float64)
    return p - 2.0 * ((p @ n) - offset)[..., None] * n


# --- environment -----------------------------------------------------------

_LOBES = np.array([
    # direction (unnormalised), colour, sharpness
    [0.6, 0.3, 0.75, 4.0, 3.6, 3.0, 40.0],
    [-0.7, 0.5, 0.5, 0.6, 1.4, 3.2, 18.0],
    [0.1, -0.9, 0.45, 2.4, 0.9, 0.5, 25.0],
])


def environment(dirs: np.ndarray) -> np.ndarray:
    """Procedural far-field radiance for unit directions (..., 3)."""
    z = dirs[..., 2:3]
    sky = np.where(z > 0, (1 - z) * np.array([0.55, 0.6, 0.7]) + z * np.array([0.15, 0.25, 0.6]),
                   np.array([0.12, 0.1, 0.08]) * (1 + z))
    out = sky.copy()
    for row in _LOBES:
        d = row[:3] / np.linalg.norm(row[:3])
        c = dirs @ d
        out = out + row[3:6] * np.exp(row[6] * (c - 1.0))[..., None]
    return out


def _cone_samples(n: int = 16) -> np.ndarray:
    """Fixed unit-disk sample pattern (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    r = np.sqrt(k / n)
    a = k * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def blurred_environment(dirs: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Mean environment radiance over a cone of half-angle ``angle`` around ``dirs``."""
    helper = np.where(np.abs(dirs[..., 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    a = np.cross(dirs, helper)
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b = np.cross(dirs, a)
    acc = np.zeros(dirs.shape)
    pts = _cone_samples()
    tan = np.tan(angle)[..., None]
    for sx, sy in pts:
        d = dirs + tan * (sx * a + sy * b)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        acc += environment(d)
    return acc / len(pts)


# --- primitives ----------------------------------------------------------------


def _ray_spheres(o, d, centers, radii):
    """Nearest hit over spheres. Returns (t, index); t = inf on miss."""
    t_best = np.full(d.shape[:-1], np.inf)
    idx = np.full(d.shape[:-1], -1)
    for i, (c, r) in enumerate(zip(centers, radii)):
        oc = o - c
        b = np.sum(oc * d, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - r * r
        disc = b * b - cc
        with np.errstate(invalid="ignore"):
            s = np.sqrt(disc)
        t = np.where(disc >= 0, -b - s, np.inf)
        t = np.where((disc >= 0) & (t <= 1e-6), -b + s, t)
        t = np.where(t > 1e-6, t, np.inf)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        idx = np.where(closer, i, idx)
    return t_best, idx


def _ray_mirror(o, d):
    """Hit with the square z = 0, |x|, |y| <= MIRROR_HALF from above."""
    dz = d[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < -1e-12, -o[..., 2] / dz, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    inside = (np.abs(p[..., 0]) <= MIRROR_HALF) & (np.abs(p[..., 1]) <= MIRROR_HALF) & (t > 1e-6)
    return np.where(inside, t, np.inf)


def _checker(p):
    cell = np.floor(p[..., 0] * 4) + np.floor(p[..., 1] * 4)
    v = np.where(np.mod(cell, 2) == 0, 0.03, 0.07)
    return np.stack([v, v, v * 1.1], axis=-1)


# --- per-kind shading -----------------------------------------------------------


def _shade(kind: SceneKind, desc: dict, o, d):
    """Returns (rgb, hit mask, t, world normal) for rays (..., 3)."""
    centers, radii, colors = desc["centers"], desc["radii"], desc["colors"]
    shape = d.shape[:-1]
    rgb = np.zeros(shape + (3,))
    normal = np.zeros(shape + (3,))
    t_s, idx = _ray_spheres(o, d, centers, radii) if len(centers) else (np.full(shape, np.inf), np.full(shape, -1))
    if kind is SceneKind.MIRROR_PLANE:
        t_m = _ray_mirror(o, d)
    else:
        t_m = np.full(shape, np.inf)
    t = np.minimum(t_s, t_m)
    hit = np.isfinite(t)
    sph = np.isfinite(t_s) & (t_s <= t_m)
    mir = np.isfinite(t_m) & (t_m < t_s)
    p = o + np.where(hit, t, 0.0)[..., None] * d
    if sph.any():
        c = centers[idx[sph]]
        n = (p[sph] - c) / radii[idx[sph]][:, None]
        normal[sph] = n
        if kind is SceneKind.GLOSSY_SPHERE:
            rough = desc["rough_lo"] + (desc["rough_hi"] - desc["rough_lo"]) * 0.5 * (n[:, 2] + 1.0)
            dv = d[sph]
            r = dv - 2.0 * np.sum(dv * n, axis=-1, keepdims=True) * n
            spec = blurred_environment(r, np.radians(60.0) * rough)
            rgb[sph] = colors[idx[sph]] + desc["spec_weight"] * spec
        else:
            rgb[sph] = colors[idx[sph]]
    if mir.any():
        normal[mir] = np.array([0.0, 0.0, 1.0])
        dm = d[mir].copy()
        dm[:, 2] = -dm[:, 2]
        pm = p[mir] + 1e-6 * np.array([0.0, 0.0, 1.0])
        tb, ib = _ray_spheres(pm, dm, centers, radii) if len(centers) else (np.full(len(dm), np.inf), None)
        bounce = environment(dm)
        got = np.isfinite(tb)
        if got.any():
            bounce[got] = colors[ib[got]]
        rgb[mir] = _checker(p[mir]) + MIRROR_REFLECTANCE * bounce
    return rgb, hit, t, normal


def _render_view(kind, desc, cam: Camera, ss: int):
    H, W = cam.height, cam.width
    o = cam.position
    acc = np.zeros((H, W, 3))
    cover = np.zeros((H, W))
    offs = (np.arange(ss) + 0.5) / ss
    for sy in offs:
        for sx in offs:
            xs = (np.arange(W) + sx - cam.cx) / cam.fx
            ys = (np.arange(H) + sy - cam.cy) / cam.fy
            dc = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], np.ones((H, W))), -1)
            dw = dc @ cam.R_cw.T
            dw /= np.linalg.norm(dw, axis=-1, keepdims=True)
            rgb, hit, _, _ = _shade(kind, desc, np.broadcast_to(o, dw.shape), dw)
            acc += np.where(hit[..., None], rgb, 0.0)
            cover += hit
    alpha = cover / (ss * ss)
    straight = np.where(cover[..., None] > 0, acc / np.maximum(cover, 1)[..., None], 0.0)
    # centre ray for ground truth
    dc = cam.ray_dirs_camera()
    dw = dc @ cam.R_cw.T
    norm = np.linalg.norm(dw, axis=-1, keepdims=True)
    _, hit, t, normal = _shade(kind, desc, np.broadcast_to(o, dw.shape), dw / norm)
    depth = np.where(hit, t / norm[..., 0], 0.0)  # distance along the unit ray -> camera z
    img = np.concatenate([straight, alpha[..., None]], axis=-1)
    return img, depth, np.where(hit[..., None], normal, 0.0)


def mirror_labels(scene: "ToyScene", cam: Camera):
    """Centre-ray labels for a MIRROR_PLANE view.

    Returns ``(on_mirror, emitter)``: pixels whose primary ray lands on the
    mirror first, and for those the index of the emitter seen in the
    reflection (-1 for the environment; -1 everywhere off the mirror).
    """
    if scene.kind is not SceneKind.MIRROR_PLANE:
        raise SceneError("mirror labels need a MIRROR_PLANE scene")
    dw = cam.ray_dirs_world()
    o = np.broadcast_to(cam.position, dw.shape)
    t_s, _ = _ray_spheres(o, dw, scene.emitters, scene.radii)
    t_m = _ray_mirror(o, dw)
    on = np.isfinite(t_m) & (t_m < t_s)
    emitter = np.full(on.shape, -1)
    if on.any():
        p = o[on] + t_m[on][:, None] * dw[on]
        dm = dw[on].copy()
        dm[:, 2] = -dm[:, 2]
        tb, ib = _ray_spheres(p + 1e-6 * np.array([0.0, 0.0, 1.0]), dm, scene.emitters, scene.radii)
        emitter[on] = np.where(np.isfinite(tb), ib, -1)
    return on, emitter


def _orbit(n: int, rng: np.random.Generator, elev_lo: float, elev_hi: float, phase: float, target,
           res: int) -> list:
    cams = []
    az0 = rng.uniform(0, 2 * math.pi)
    for i in range(n):
        az = az0 + 2 * math.pi * (i + phase) / n
        frac = ((i * 0.618034 + phase) % 1.0)
        el = math.radians(elev_lo + (elev_hi - elev_lo) * frac)
        eye = np.asarray(target) + CAM_DIST * np.array([math.cos(el) * math.cos(az),
                                                        math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, target, [0.0, 0.0, 1.0], res, res, FOV_X))
    return cams


def make_toy_scene(kind, seed: int = 0, n_views: int = 16, resolution: int = 128,
                   n_test: Optional[int] = None, n_emitters: Optional[int] = None, ss: int = 3) -> ToyScene:
    """Generate a seeded synthetic scene with train and held-out test views."""
    kind = SceneKind.parse(kind)
    if n_views < 4:
        raise SceneError(f"n_views must be >= 4 (got {n_views})")
    if resolution < 32:
        raise SceneError(f"resolution must be >= 32 (got {resolution})")
    rng = np.random.default_rng(seed)
    n_test = max(4, n_views // 4) if n_test is None else n_test
    desc: dict = {"kind": kind.value}
    plane = mirrored = None
    if kind is SceneKind.DIFFUSE_BLOBS:
        m = 5 if n_emitters is None else n_emitters
        centers = rng.uniform(-0.55, 0.55, size=(m, 3))
        radii = rng.uniform(0.18, 0.32, size=m)
        colors = rng.uniform(0.1, 0.9, size=(m, 3))
        target, elev = np.zeros(3), (-50.0, 60.0)
        bbox = (np.full(3, -0.9), np.full(3, 0.9))
    elif kind is SceneKind.MIRROR_PLANE:
        m = 3 if n_emitters is None else n_emitters
        ang = rng.uniform(0, 2 * math.pi) + 2 * math.pi * np.arange(m) / max(m, 1)
        rad = rng.uniform(0.3, 0.55, size=m)
        centers = np.stack([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(0.3, 0.5, size=m)], axis=1)
        radii = rng.uniform(0.12, 0.17, size=m)
        colors = np.clip(np.eye(3)[np.arange(m) % 3] * 0.85 + rng.uniform(0.05, 0.2, size=(m, 3)), 0, 1)
        plane = (np.array([0.0, 0.0, 1.0]), 0.0)
        mirrored = reflect_point(centers, *plane)
        target, elev = np.array([0.0, 0.0, 0.1]), (25.0, 65.0)
        bbox = (np.array([-1.0, -1.0, -0.1]), np.array([1.0, 1.0, 0.7]))
    else:
        m = 1
        centers = np.zeros((1, 3))
        radii = np.array([0.7])
        colors = np.array([[0.08, 0.1, 0.14]])
        desc.update(rough_lo=0.05, rough_hi=0.8, spec_weight=0.5)
        target, elev = np.zeros(3), (-40.0, 60.0)
        bbox = (np.full(3, -0.8), np.full(3, 0.8))
    desc.update(centers=centers, radii=radii, colors=colors)

    def build(cams):
        imgs, depths, normals = [], [], []
        for cam in cams:
            img, dep, nrm = _render_view(kind, desc, cam, ss)
            imgs.append(img)
            depths.append(dep.astype(np.float32).astype(np.float64))
            normals.append(nrm)
        return Dataset(cams, imgs, depths, normals, FOV_X, [f"r_{i}" for i in range(len(cams))])

    train = build(_orbit(n_views, rng, *elev, 0.0, target, resolution))
    test = build(_orbit(n_test, rng, *elev, 0.5, target, resolution))
    public = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in desc.items()}
    return ToyScene(kind, seed, train, test, public, centers, radii, colors, plane, mirrored,
                    (np.asarray(bbox[0]), np.asarray(bbox[1])))


__all__ = [
    "MIRROR_HALF",
    "MIRROR_REFLECTANCE",
    "SceneKind",
    "ToyScene",
    "blurred_environment",
    "environment",
    "make_toy_scene",
    "mirror_labels",
    "reflect_point",
]
