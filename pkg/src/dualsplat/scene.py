"""Domain types for the dual planar-Gaussian scene.

Two primitive sets share one parameterization (center, quaternion, two
log-scales, raw opacity) and differ only in their payload:

* ``Role.GEO`` carries diffuse colour and roughness (optionally also a
  feature vector, used by the single-set ablation),
* ``Role.LOCAL`` carries a learnable reflection feature ``f`` in R^4.

All stored parameters are unconstrained; :func:`materialize` maps them to
their physical ranges.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

FEATURE_DIM = 4


class SceneError(ValueError):
    """Structural problem with a scene or dataset."""


class NumericError(FloatingPointError):
    """A parameter or loss became non-finite."""


class Role(str, enum.Enum):
    GEO = "GEO"
    LOCAL = "LOCAL"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class GeometryPayload:
    diffuse_rgb: np.ndarray  # (N, 3) pre-sigmoid, linear RGB
    raw_roughness: np.ndarray  # (N,) pre-sigmoid
    features: Optional[np.ndarray] = None  # (N, d) only for the no_local_set ablation

    def arrays(self) -> dict:
        out = {"diffuse_rgb": self.diffuse_rgb, "raw_roughness": self.raw_roughness}
        if self.features is not None:
            out["features"] = self.features
        return out


@dataclass
class LocalPayload:
    features: np.ndarray  # (N, d)

    def arrays(self) -> dict:
        return {"features": self.features}


Payload = Union[GeometryPayload, LocalPayload]


@dataclass
class GaussianSet:
    role: Role
    centers: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternion, (w, x, y, z)
    log_scales: np.ndarray  # (N, 2)
    raw_opacities: np.ndarray  # (N,)
    payload: Payload

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def feature_dim(self) -> int:
        feats = getattr(self.payload, "features", None)
        return 0 if feats is None else int(feats.shape[1])

    def params(self) -> dict:
        """Name -> array view of every optimisable parameter."""
        out = {
            "centers": self.centers,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "raw_opacities": self.raw_opacities,
        }
        out.update(self.payload.arrays())
        return out

    def with_params(self, params: dict) -> "GaussianSet":
        if self.role is Role.GEO:
            payload: Payload = GeometryPayload(
                params["diffuse_rgb"], params["raw_roughness"], params.get("features")
            )
        else:
            payload = LocalPayload(params["features"])
        return GaussianSet(
            self.role,
            params["centers"],
            params["rotations"],
            params["log_scales"],
            params["raw_opacities"],
            payload,
        )

    def copy(self) -> "GaussianSet":
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def astype(self, dtype) -> "GaussianSet":
        return self.with_params({k: np.asarray(v, dtype=dtype) for k, v in self.params().items()})

    def select(self, index) -> "GaussianSet":
        return self.with_params({k: v[index] for k, v in self.params().items()})

    @classmethod
    def empty(cls, role: Role, feature_dim: int = FEATURE_DIM, dtype=np.float32) -> "GaussianSet":
        z = lambda *s: np.zeros(s, dtype=dtype)  # noqa: E731
        if role is Role.GEO:
            payload: Payload = GeometryPayload(z(0, 3), z(0))
        else:
            payload = LocalPayload(z(0, feature_dim))
        return cls(role, z(0, 3), z(0, 4), z(0, 2), z(0), payload)

    def validate(self) -> None:
        n = len(self)
        shapes = {
            "rotations": (n, 4),
            "log_scales": (n, 2),
            "raw_opacities": (n,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise SceneError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise SceneError(f"centers has shape {self.centers.shape}, expected (N, 3)")
        for name, arr in self.payload.arrays().items():
            if arr.shape[0] != n:
                raise SceneError(f"payload {name} has length {arr.shape[0]}, expected {n}")
        if self.role is Role.GEO and not isinstance(self.payload, GeometryPayload):
            raise SceneError("GEO set requires a GeometryPayload")
        if self.role is Role.LOCAL and not isinstance(self.payload, LocalPayload):
            raise SceneError("LOCAL set requires a LocalPayload")
        for name, arr in self.params().items():
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad.reshape(n, -1).any(axis=1))[0, 0])
                raise NumericError(f"non-finite value in {self.role.value}.{name} at index {idx}")


@dataclass
class Materialized:
    """Activated parameters in float64, ready for rasterization."""

    positions: np.ndarray  # (N, 3)
    frames: np.ndarray  # (N, 3, 3), columns t_u, t_v, t_w
    scales: np.ndarray  # (N, 2)
    opacities: np.ndarray  # (N,)
    quat_norms: np.ndarray  # (N,) for the normalisation backward pass
    unit_quats: np.ndarray  # (N, 4)
    diffuse: Optional[np.ndarray] = None
    roughness: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def payload_matrix(self) -> np.ndarray:
        """Stack the per-primitive attributes splatted by the rasterizer."""
        cols = []
        if self.diffuse is not None:
            cols.append(self.diffuse)
            cols.append(self.roughness[:, None])
        if self.features is not None:
            cols.append(self.features)
        if not cols:
            return np.zeros((len(self), 0))
        return np.concatenate(cols, axis=1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``(w, x, y, z)``; shape (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def tangent_grad_to_quat(unit_q, norms, g_tu, g_tv):
    """Backpropagate gradients on the first two frame columns to raw quaternions."""
    w, x, y, z = (unit_q[:, i] for i in range(4))
    gu0, gu1, gu2 = g_tu[:, 0], g_tu[:, 1], g_tu[:, 2]
    gv0, gv1, gv2 = g_tv[:, 0], g_tv[:, 1], g_tv[:, 2]
    gq = np.empty_like(unit_q)
    # column 0 = (1-2(y²+z²), 2(xy+wz), 2(xz-wy)); column 1 = (2(xy-wz), 1-2(x²+z²), 2(yz+wx))
    gq[:, 0] = 2 * z * gu1 - 2 * y * gu2 - 2 * z * gv0 + 2 * x * gv2
    gq[:, 1] = 2 * y * gu1 + 2 * z * gu2 + 2 * y * gv0 - 4 * x * gv1 + 2 * w * gv2
    gq[:, 2] = -4 * y * gu0 + 2 * x * gu1 - 2 * w * gu2 + 2 * x * gv0 + 2 * z * gv2
    gq[:, 3] = -4 * z * gu0 + 2 * w * gu1 + 2 * x * gu2 - 2 * w * gv0 - 4 * z * gv1 + 2 * y * gv2
    radial = np.sum(gq * unit_q, axis=1, keepdims=True)
    return (gq - radial * unit_q) / norms[:, None]


def materialize(gset: GaussianSet) -> Materialized:
    gset.validate()
    q = np.asarray(gset.rotations, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise NumericError(f"zero quaternion at index {int(np.argmin(norms))}")
    unit_q = q / norms[:, None]
    frames = quat_to_rotmat(unit_q)
    # t_w is rebuilt as t_u x t_v so the handedness holds to rounding
    frames[:, :, 2] = np.cross(frames[:, :, 0], frames[:, :, 1])
    mat = Materialized(
        positions=np.asarray(gset.centers, dtype=np.float64),
        frames=frames,
        scales=np.exp(np.asarray(gset.log_scales, dtype=np.float64)),
        opacities=sigmoid(np.asarray(gset.raw_opacities, dtype=np.float64)),
        quat_norms=norms,
        unit_quats=unit_q,
    )
    if isinstance(gset.payload, GeometryPayload):
        mat.diffuse = sigmoid(np.asarray(gset.payload.diffuse_rgb, dtype=np.float64))
        mat.roughness = sigmoid(np.asarray(gset.payload.raw_roughness, dtype=np.float64))
    feats = getattr(gset.payload, "features", None)
    if feats is not None:
        mat.features = np.asarray(feats, dtype=np.float64)
    return mat


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def init_scene(
    bbox,
    n_geo: int,
    n_local: int,
    seed: int,
    points: Optional[np.ndarray] = None,
    feature_dim: int = FEATURE_DIM,
    geo_features: bool = False,
    init_opacity: float = 0.1,
    dtype=np.float32,
) -> tuple[GaussianSet, GaussianSet]:
    """Seeded initial GEO and LOCAL sets.

    GEO centers are uniform in ``bbox`` (or drawn from ``points``); LOCAL
    centers are jittered copies of GEO centers with sigma = 1% of the bbox
    diagonal. Local features start at zero.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi - lo <= 0):
        raise SceneError(f"degenerate bbox {lo} .. {hi}")
    if n_geo < 1 or n_local < 0:
        raise SceneError("n_geo must be >= 1 and n_local >= 0")
    rng = np.random.default_rng(seed)
    diag = float(np.linalg.norm(hi - lo))
    if points is not None and len(points) > 0:
        pick = rng.integers(0, len(points), size=n_geo)
        geo_centers = np.asarray(points, dtype=np.float64)[pick]
    else:
        geo_centers = lo + rng.random((n_geo, 3)) * (hi - lo)
    # initial disk radius ~ mean spacing of n_geo points in the box
    spacing = (np.prod(hi - lo) / n_geo) ** (1.0 / 3.0)
    log_s = np.full((n_geo, 2), np.log(0.5 * spacing))

    geo = GaussianSet(
        Role.GEO,
        centers=geo_centers.astype(dtype),
        rotations=random_unit_quaternions(rng, n_geo).astype(dtype),
        log_scales=log_s.astype(dtype),
        raw_opacities=np.full(n_geo, logit(init_opacity), dtype=dtype),
        payload=GeometryPayload(
            diffuse_rgb=(rng.normal(scale=0.1, size=(n_geo, 3))).astype(dtype),
            raw_roughness=np.full(n_geo, logit(0.5), dtype=dtype),
            features=np.zeros((n_geo, feature_dim), dtype=dtype) if geo_features else None,
        ),
    )

    src = rng.integers(0, n_geo, size=n_local) if n_local != n_geo else np.arange(n_geo)
    jitter = rng.normal(scale=0.01 * diag, size=(n_local, 3))
    local = GaussianSet(
        Role.LOCAL,
        centers=(geo_centers[src] + jitter).astype(dtype),
        rotations=random_unit_quaternions(rng, n_local).astype(dtype),
        log_scales=np.full((n_local, 2), np.log(0.5 * spacing)).astype(dtype),
        raw_opacities=np.full(n_local, logit(0.1), dtype=dtype),
        payload=LocalPayload(np.zeros((n_local, feature_dim), dtype=dtype)),
    )
    return geo, local


@dataclass
class Camera:
    """Pinhole camera. ``c2w`` maps camera to world coordinates, with the
    camera looking down its +z axis, x right and y down."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("zero-size image")
        R = self.c2w[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise SceneError("camera rotation is not orthonormal")

    @property
    def R_cw(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def R_wc(self) -> np.ndarray:
        return self.c2w[:3, :3].T

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.position) @ self.R_cw

    def project(self, pts: np.ndarray) -> np.ndarray:
        """Pixel coordinates (x, y) of world points; pixel centres at +0.5."""
        pc = self.world_to_camera(pts)
        return np.stack(
            [self.fx * pc[:, 0] / pc[:, 2] + self.cx, self.fy * pc[:, 1] / pc[:, 2] + self.cy],
            axis=1,
        )

    def ray_dirs_camera(self) -> np.ndarray:
        """Unnormalised per-pixel ray directions (H, W, 3) with z = 1."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = xs[None, :]
        d[..., 1] = ys[:, None]
        d[..., 2] = 1.0
        return d

    def ray_dirs_world(self) -> np.ndarray:
        d = self.ray_dirs_camera() @ self.R_cw.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def scaled(self, factor: float) -> "Camera":
        return replace(
            self,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
        )

    @staticmethod
    def look_at(eye, target, up, width, height, fov_x) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
        fx = width / (2.0 * np.tan(fov_x / 2.0))
        return Camera(width, height, fx, fx, width / 2.0, height / 2.0, c2w)


@dataclass
class Dataset:
    cameras: list
    images: list  # (H, W, 4) float64, linear RGB + alpha
    depth_priors: Optional[list] = None  # (H, W), 0 where invalid
    normal_priors: Optional[list] = None  # (H, W, 3) world frame, 0 where invalid
    camera_angle_x: Optional[float] = None
    names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cameras)

    def validate(self) -> None:
        if len(self.images) != len(self.cameras):
            raise SceneError(f"{len(self.images)} images for {len(self.cameras)} cameras")
        if not self.images:
            raise SceneError("empty dataset")
        shape = self.images[0].shape[:2]
        for i, img in enumerate(self.images):
            if img.shape[:2] != shape:
                raise SceneError(f"image {i} has size {img.shape[:2]}, expected {shape}")
        for name in ("depth_priors", "normal_priors"):
            priors = getattr(self, name)
            if priors is None:
                continue
            for i, p in enumerate(priors):
                if p is not None and p.shape[:2] != shape:
                    raise SceneError(f"{name}[{i}] has size {p.shape[:2]}, expected {shape}")

    @property
    def has_alpha(self) -> bool:
        return any(np.any(img[..., 3] < 1.0) for img in self.images)


def bbox_of_cameras_targets(cameras: list, margin: float = 0.0):
    """Axis-aligned box around the region all cameras look at (fallback init)."""
    centers = np.stack([c.position for c in cameras])
    fwd = np.stack([c.c2w[:3, 2] for c in cameras])
    # least-squares point closest to all optical axes
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(centers, fwd):
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ o
    focus = np.linalg.lstsq(A, b, rcond=None)[0]
    radius = 0.35 * np.median(np.linalg.norm(centers - focus, axis=1)) + margin
    return focus - radius, focus + radius


__all__ = [
    "FEATURE_DIM",
    "Camera",
    "Dataset",
    "GaussianSet",
    "GeometryPayload",
    "LocalPayload",
    "Materialized",
    "NumericError",
    "Role",
    "SceneError",
    "init_scene",
    "logit",
    "materialize",
    "quat_to_rotmat",
    "sigmoid",
    "tangent_grad_to_quat",
]
