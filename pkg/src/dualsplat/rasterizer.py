"""Tile-based splatting of planar Gaussians with exact ray/disk intersection.

Primitives are binned into 16x16 pixel tiles using the projection of an
octagon circumscribing each primitive's 3-sigma disk, sorted by the
camera-frame depth of their centers (ties by primitive id), and composited
front to back. Each pixel ray is intersected with the disk plane exactly,
so the kernel value is evaluated in the disk's own (u, v) coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .scene import Camera, GaussianSet, Materialized, Role, materialize, tangent_grad_to_quat

TILE_SIZE = 16
NEAR = K.NEAR
CUTOFF_R2 = K.CUTOFF_R2
T_MIN = K.T_MIN
NORMAL_ALPHA_MIN = 1e-4
DEPTH_EPS = 1e-6
# circumscribing octagon radius for the 3-sigma circle
_OCT_R = 3.0 / math.cos(math.pi / 8.0)
_OCT_ANGLES = np.arange(8) * (math.pi / 4.0)


class RasterError(RuntimeError):
    pass


# --- scalar reference pieces ----------------------------------------------


def intersect_ray_disk(camera: Camera, pixel, mat: Materialized, k: int):
    """Local coordinates and camera depth where the ray through ``pixel``
    (continuous pixel coordinates) meets disk ``k``; ``None`` on a miss."""
    d = np.array([(pixel[0] - camera.cx) / camera.fx, (pixel[1] - camera.cy) / camera.fy, 1.0])
    c = camera.world_to_camera(mat.positions[k : k + 1])[0]
    frame_c = camera.R_wc @ mat.frames[k]
    tu, tv, tw = frame_c[:, 0], frame_c[:, 1], frame_c[:, 2]
    den = float(tw @ d)
    if abs(den) < K.PARALLEL_EPS:
        return None
    t = float(tw @ c) / den
    if t <= NEAR:
        return None
    delta = t * d - c
    su, sv = mat.scales[k]
    return float(delta @ tu) / su, float(delta @ tv) / sv, t


def gaussian_weight(u, v):
    r2 = np.asarray(u) ** 2 + np.asarray(v) ** 2
    return np.where(r2 > CUTOFF_R2, 0.0, np.exp(-0.5 * r2))


def composite_pixel(hits, background=None, early_stop: bool = True):
    """Front-to-back compositing of depth-sorted hits.

    ``hits`` is a sequence of ``(alpha_k, G_k, payload_k, depth_k, normal_k)``
    with normals already facing the viewer. Returns
    ``(value, depth, normal, alpha, weights)``.
    """
    T = 1.0
    value = None
    dsum = 0.0
    nsum = np.zeros(3)
    weights = []
    for a_k, g_k, c_k, d_k, n_k in hits:
        c_k = np.asarray(c_k, dtype=np.float64)
        if value is None:
            value = np.zeros_like(c_k)
        w = a_k * g_k * T
        value = value + w * c_k
        dsum += w * d_k
        nsum += w * np.asarray(n_k, dtype=np.float64)
        weights.append(w)
        T *= 1.0 - a_k * g_k
        if early_stop and T < T_MIN:
            break
    alpha = 1.0 - T
    if background is not None:
        bg = np.asarray(background, dtype=np.float64)
        value = bg * T if value is None else value + bg * T
    elif value is None:
        value = np.zeros(0)
    wsum = float(np.sum(weights)) if weights else 0.0
    depth = dsum / max(wsum, DEPTH_EPS)
    nn = np.linalg.norm(nsum)
    normal = nsum / nn if (alpha > NORMAL_ALPHA_MIN and nn > 0) else np.zeros(3)
    return value, depth, normal, alpha, np.asarray(weights)


# --- preparation ------------------------------------------------------------


@dataclass
class Projected:
    """Per-primitive camera-frame quantities shared by forward and backward."""

    C: np.ndarray
    U: np.ndarray
    V: np.ndarray
    N: np.ndarray
    su: np.ndarray
    sv: np.ndarray
    opac: np.ndarray
    pay: np.ndarray
    depth: np.ndarray  # center z, the sort key


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (n_tiles + 1,)
    entries: np.ndarray  # primitive ids, grouped by tile, sorted within tile
    order: np.ndarray  # global depth order of all primitives
    bounds: np.ndarray = None  # (n, 4) inclusive pixel ranges j0, j1, i0, i1; -1 when culled

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t] : self.offsets[t + 1]]


def project(mat: Materialized, camera: Camera, payload: Optional[np.ndarray] = None) -> Projected:
    R = camera.R_wc
    C = camera.world_to_camera(mat.positions)
    frames_c = np.einsum("ij,njk->nik", R, mat.frames)
    U = np.ascontiguousarray(frames_c[:, :, 0])
    V = np.ascontiguousarray(frames_c[:, :, 1])
    N = np.cross(U, V)
    pay = mat.payload_matrix() if payload is None else payload
    return Projected(
        C=np.ascontiguousarray(C),
        U=U,
        V=V,
        N=np.ascontiguousarray(N),
        su=np.ascontiguousarray(mat.scales[:, 0]),
        sv=np.ascontiguousarray(mat.scales[:, 1]),
        opac=np.ascontiguousarray(mat.opacities),
        pay=np.ascontiguousarray(pay, dtype=np.float64),
        depth=C[:, 2].copy(),
    )


def screen_bounds(proj: Projected, camera: Camera):
    """Conservative pixel-centre column/row ranges, or -1 rows when culled."""
    cos, sin = np.cos(_OCT_ANGLES), np.sin(_OCT_ANGLES)
    au = (proj.su * _OCT_R)[:, None, None] * proj.U[:, None, :]
    av = (proj.sv * _OCT_R)[:, None, None] * proj.V[:, None, :]
    verts = proj.C[:, None, :] + cos[None, :, None] * au + sin[None, :, None] * av  # (n, 8, 3)
    z = verts[..., 2]
    in_front = z > NEAR
    all_front = in_front.all(axis=1)
    any_front = in_front.any(axis=1)
    zs = np.where(in_front, z, 1.0)
    xs = camera.fx * verts[..., 0] / zs + camera.cx
    ys = camera.fy * verts[..., 1] / zs + camera.cy
    xmin, xmax = xs.min(axis=1) - 1.0, xs.max(axis=1) + 1.0
    ymin, ymax = ys.min(axis=1) - 1.0, ys.max(axis=1) + 1.0
    # disk straddles the near plane: its image is unbounded
    straddle = any_front & ~all_front
    xmin[straddle], ymin[straddle] = -np.inf, -np.inf
    xmax[straddle], ymax[straddle] = np.inf, np.inf
    with np.errstate(invalid="ignore"):
        j0 = np.ceil(np.clip(xmin - 0.5, -1, camera.width)).astype(np.int64)
        j1 = np.floor(np.clip(xmax - 0.5, -1, camera.width)).astype(np.int64)
        i0 = np.ceil(np.clip(ymin - 0.5, -1, camera.height)).astype(np.int64)
        i1 = np.floor(np.clip(ymax - 0.5, -1, camera.height)).astype(np.int64)
    j0, i0 = np.maximum(j0, 0), np.maximum(i0, 0)
    j1, i1 = np.minimum(j1, camera.width - 1), np.minimum(i1, camera.height - 1)
    visible = any_front & (j0 <= j1) & (i0 <= i1)
    bounds = np.stack([j0, j1, i0, i1], axis=1)
    bounds[~visible] = -1
    return bounds, visible


def build_tiles(proj: Projected, camera: Camera, tile_size: int = TILE_SIZE) -> TileGrid:
    tiles_x = -(-camera.width // tile_size)
    tiles_y = -(-camera.height // tile_size)
    n_tiles = tiles_x * tiles_y
    n = proj.C.shape[0]
    order = np.lexsort((np.arange(n), proj.depth))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    bounds, visible = screen_bounds(proj, camera)
    ids = np.nonzero(visible)[0]
    if ids.size == 0:
        return TileGrid(tile_size, tiles_x, tiles_y, np.zeros(n_tiles + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int64), order, bounds)
    b = bounds[ids] // tile_size
    nx = b[:, 1] - b[:, 0] + 1
    ny = b[:, 3] - b[:, 2] + 1
    counts = nx * ny
    prim = np.repeat(ids, counts)
    # local index within each primitive's tile rectangle
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(prim.size) - first
    lx = local % np.repeat(nx, counts)
    ly = local // np.repeat(nx, counts)
    tx = np.repeat(b[:, 0], counts) + lx
    ty = np.repeat(b[:, 2], counts) + ly
    tile = ty * tiles_x + tx
    srt = np.lexsort((rank[prim], tile))
    entries = prim[srt].astype(np.int64)
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tile + 1, 1)
    offsets = np.cumsum(offsets)
    return TileGrid(tile_size, tiles_x, tiles_y, offsets, entries, order, bounds)


# --- render -----------------------------------------------------------------


@dataclass
class RenderBuffers:
    color_or_feature: np.ndarray  # (H, W, c), background composited
    depth: np.ndarray  # (H, W) expected camera z
    normal: np.ndarray  # (H, W, 3) world frame, facing the camera
    alpha: np.ndarray  # (H, W)
    roughness: Optional[np.ndarray] = None  # (H, W), GEO only
    features: Optional[np.ndarray] = None  # (H, W, d), features splatted with a GEO set
    # raw sums and the contribution log used by the backward pass
    payload: np.ndarray = field(default=None, repr=False)  # (H, W, C) incl. background
    depth_sum: np.ndarray = field(default=None, repr=False)
    normal_sum: np.ndarray = field(default=None, repr=False)  # world frame
    n_contrib: np.ndarray = field(default=None, repr=False)
    tiles: Optional[TileGrid] = field(default=None, repr=False)
    proj: Optional[Projected] = field(default=None, repr=False)
    background: np.ndarray = field(default=None, repr=False)
    role: Optional[Role] = None

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha

    def contributions(self, camera: Camera, py: int, px: int):
        """Primitive ids, compositing weights and (world) normals at a pixel."""
        if self.n_contrib is None:
            raise RasterError("render buffers carry no contribution log")
        p, g = self.proj, self.tiles
        geom, _ = _pack(p, g)
        idx, ws, ns = K.contributions(g.offsets, geom, g.tiles_x, g.tile_size,
                                      camera.fx, camera.fy, camera.cx, camera.cy, self.n_contrib, py, px)
        return g.entries[idx], ws, ns @ camera.R_wc


def _split_payload(role: Role, pay: np.ndarray, has_geo_features: bool):
    if role is Role.GEO:
        color = pay[..., :3]
        rough = pay[..., 3]
        feats = pay[..., 4:] if has_geo_features else None
        return color, rough, feats
    return pay, None, None


def render(
    gset: GaussianSet | Materialized,
    camera: Camera,
    background=None,
    role: Optional[Role] = None,
    early_stop: bool = True,
) -> RenderBuffers:
    """Splat one primitive set into screen-space buffers.

    ``background`` has one entry per payload channel (GEO: 4 [+ d],
    LOCAL: d) or 3 entries for a GEO set, in which case roughness and
    features get a zero background. ``None`` means zero.
    """
    if camera.width <= 0 or camera.height <= 0:
        raise RasterError("zero-size image")
    if isinstance(gset, GaussianSet):
        role = gset.role
        mat = materialize(gset)
    else:
        mat = gset
        role = role or (Role.GEO if gset.diffuse is not None else Role.LOCAL)
    proj = project(mat, camera)
    n_ch = proj.pay.shape[1]
    bg = np.zeros(n_ch)
    if background is not None:
        b = np.atleast_1d(np.asarray(background, dtype=np.float64))
        bg[: b.size] = b[:n_ch]
    tiles = build_tiles(proj, camera)
    geom, epay = _pack(proj, tiles)
    out, alpha, dsum, nsum_c, n_contrib = K.forward(
        tiles.offsets, geom, epay, tiles.tiles_x, tiles.tile_size, camera.width, camera.height,
        camera.fx, camera.fy, camera.cx, camera.cy, bg, early_stop,
    )
    return _finish(out, alpha, dsum, nsum_c, n_contrib, camera, role, mat, tiles, proj, bg)


def _pack(proj: Projected, tiles: TileGrid):
    geom = K.pack(tiles.entries, proj.C, proj.U, proj.V, proj.N, proj.su, proj.sv, proj.opac, tiles.bounds)
    return geom, np.ascontiguousarray(proj.pay[tiles.entries])


def _finish(out, alpha, dsum, nsum_c, n_contrib, camera, role, mat, tiles, proj, bg):
    nsum = nsum_c @ camera.R_wc  # rows: camera -> world
    depth = dsum / np.maximum(alpha, DEPTH_EPS)
    nn = np.linalg.norm(nsum, axis=-1, keepdims=True)
    ok = (alpha[..., None] > NORMAL_ALPHA_MIN) & (nn > 0)
    normal = np.where(ok, nsum / np.where(nn > 0, nn, 1.0), 0.0)
    color, rough, feats = _split_payload(role, out, mat.features is not None)
    return RenderBuffers(
        color_or_feature=color,
        depth=depth,
        normal=normal,
        alpha=alpha,
        roughness=rough,
        features=feats,
        payload=out,
        depth_sum=dsum,
        normal_sum=nsum,
        n_contrib=n_contrib,
        tiles=tiles,
        proj=proj,
        background=bg,
        role=role,
    )


def buffer_grads_to_raw(buffers: RenderBuffers, grads: dict):
    """Map gradients on derived buffers to gradients on the raw sums.

    Accepted keys: ``color_or_feature``, ``roughness``, ``features``,
    ``payload`` (all channels), ``alpha``, ``depth``, ``normal``,
    ``depth_sum``, ``normal_sum``.
    """
    H, W = buffers.alpha.shape
    C = buffers.payload.shape[2]
    g_pay = np.zeros((H, W, C))
    if grads.get("payload") is not None:
        g_pay += grads["payload"]
    if buffers.role is Role.GEO:
        if grads.get("color_or_feature") is not None:
            g_pay[..., :3] += grads["color_or_feature"]
        if grads.get("roughness") is not None:
            g_pay[..., 3] += grads["roughness"]
        if grads.get("features") is not None:
            g_pay[..., 4:] += grads["features"]
    elif grads.get("color_or_feature") is not None:
        g_pay += grads["color_or_feature"]
    g_alpha = np.zeros((H, W))
    if grads.get("alpha") is not None:
        g_alpha += grads["alpha"]
    g_dsum = np.zeros((H, W))
    if grads.get("depth_sum") is not None:
        g_dsum += grads["depth_sum"]
    if grads.get("depth") is not None:
        gd = grads["depth"]
        denom = np.maximum(buffers.alpha, DEPTH_EPS)
        g_dsum += gd / denom
        g_alpha += np.where(buffers.alpha > DEPTH_EPS, -gd * buffers.depth_sum / denom**2, 0.0)
    g_nsum = np.zeros((H, W, 3))
    if grads.get("normal_sum") is not None:
        g_nsum += grads["normal_sum"]
    if grads.get("normal") is not None:
        gn = grads["normal"]
        m = buffers.normal_sum
        nn = np.linalg.norm(m, axis=-1, keepdims=True)
        ok = (buffers.alpha[..., None] > NORMAL_ALPHA_MIN) & (nn > 0)
        n = buffers.normal
        proj_g = gn - n * np.sum(n * gn, axis=-1, keepdims=True)
        g_nsum += np.where(ok, proj_g / np.where(nn > 0, nn, 1.0), 0.0)
    return g_pay, g_alpha, g_dsum, g_nsum


def render_backward(
    gset: GaussianSet,
    camera: Camera,
    buffers: RenderBuffers,
    grads: dict,
    return_projected: bool = False,
) -> dict:
    """Gradients of a scalar loss w.r.t. the raw parameters of ``gset``.

    ``grads`` maps buffer names to dL/d(buffer); see
    :func:`buffer_grads_to_raw`. Returned keys mirror ``gset.params()``.
    """
    if buffers.n_contrib is None or buffers.tiles is None:
        raise RasterError("render buffers carry no contribution log; render with the tiled path")
    mat = materialize(gset)
    proj, tiles = buffers.proj, buffers.tiles
    g_pay, g_alpha, g_dsum, g_nsum = buffer_grads_to_raw(buffers, grads)
    g_nsum_c = g_nsum @ camera.R_cw  # rows: world -> camera (adjoint of nsum_c @ R_wc)
    geom, epay = _pack(proj, tiles)
    per_entry = K.backward(
        tiles.offsets, geom, epay, tiles.tiles_x, tiles.tile_size, camera.width, camera.height,
        camera.fx, camera.fy, camera.cx, camera.cy, buffers.background, buffers.n_contrib,
        np.ascontiguousarray(g_pay), np.ascontiguousarray(g_alpha),
        np.ascontiguousarray(g_dsum), np.ascontiguousarray(g_nsum_c),
    )
    g = K.reduce_entries(tiles.entries, per_entry, len(mat))
    out = raw_param_grads(gset, mat, camera, g)
    if return_projected:
        out["_per_prim"] = g
    return out


def raw_param_grads(gset: GaussianSet, mat: Materialized, camera: Camera, g: np.ndarray) -> dict:
    """Chain camera-frame per-primitive gradients to the stored parameters."""
    R = camera.R_wc
    g_c = g[:, K.G_C : K.G_C + 3]
    g_U = g[:, K.G_U : K.G_U + 3]
    g_V = g[:, K.G_V : K.G_V + 3]
    g_centers = g_c @ R  # (R^T g)^T per row
    g_tu = g_U @ R
    g_tv = g_V @ R
    g_rot = tangent_grad_to_quat(mat.unit_quats, mat.quat_norms, g_tu, g_tv)
    g_logs = np.stack([g[:, K.G_SU] * mat.scales[:, 0], g[:, K.G_SV] * mat.scales[:, 1]], axis=1)
    op = mat.opacities
    g_rawop = g[:, K.G_OP] * op * (1.0 - op)
    pay = g[:, K.G_PAY :]
    out = {
        "centers": g_centers,
        "rotations": g_rot,
        "log_scales": g_logs,
        "raw_opacities": g_rawop,
    }
    if gset.role is Role.GEO:
        d = mat.diffuse
        out["diffuse_rgb"] = pay[:, :3] * d * (1.0 - d)
        r = mat.roughness
        out["raw_roughness"] = pay[:, 3] * r * (1.0 - r)
        if mat.features is not None:
            out["features"] = pay[:, 4:].copy()
    else:
        out["features"] = pay.copy()
    return out


def set_threads(n: int) -> None:
    """Worker threads for the kernels (0 = all cores)."""
    import numba

    numba.set_num_threads(numba.config.NUMBA_NUM_THREADS if n <= 0 else min(n, numba.config.NUMBA_NUM_THREADS))
