"""Numba kernels for tile-based ray/disk splatting.

Everything here works in the camera frame (x right, y down, z forward)
and in float64. Per hit the splatted vector is

    f_k = [payload_k (C), 1, t_k, n_k (3)]

so one compositing loop produces the payload map, accumulated alpha,
depth sum and normal sum together.

Primitive data is gathered per tile entry into one contiguous row
(``geom``, layout below) so each tile streams through memory in order.
Entries whose conservative pixel bounds exclude the current pixel are
skipped before the intersection test. Tiles are independent: forward
writes only the tile's own pixels, backward writes only the tile's own
rows of the per-entry gradient buffer, which keeps results independent
of the number of worker threads.
"""

import math

import numpy as np
from numba import njit, prange

NEAR = 0.01
PARALLEL_EPS = 1e-9
CUTOFF_R2 = 9.0
T_MIN = 1e-4

# geom row layout
R_C, R_U, R_V, R_N, R_SU, R_SV, R_OP, R_NUM, R_BOX = 0, 3, 6, 9, 12, 13, 14, 15, 16
GEOM_WIDTH = 20

# per-entry gradient layout
G_C, G_U, G_V, G_SU, G_SV, G_OP, G_PAY = 0, 3, 6, 9, 10, 11, 12


def pack(entries, C, U, V, N, su, sv, opac, bounds):
    """Entry-ordered geometry rows (see module docstring)."""
    n = C.shape[0]
    rows = np.empty((n, GEOM_WIDTH))
    rows[:, R_C:R_C + 3] = C
    rows[:, R_U:R_U + 3] = U
    rows[:, R_V:R_V + 3] = V
    rows[:, R_N:R_N + 3] = N
    rows[:, R_SU] = su
    rows[:, R_SV] = sv
    rows[:, R_OP] = opac
    rows[:, R_NUM] = np.sum(N * C, axis=1)
    rows[:, R_BOX:R_BOX + 4] = bounds
    return np.ascontiguousarray(rows[entries])


@njit(cache=True, inline="always")
def _hit(g, dx, dy):
    """Ray (dx, dy, 1) against the disk in row ``g``. Returns (ok, u, v, t, den)."""
    den = g[R_N] * dx + g[R_N + 1] * dy + g[R_N + 2]
    if abs(den) < PARALLEL_EPS:
        return False, 0.0, 0.0, 0.0, den
    t = g[R_NUM] / den
    if t <= NEAR:
        return False, 0.0, 0.0, t, den
    ex = t * dx - g[R_C]
    ey = t * dy - g[R_C + 1]
    ez = t - g[R_C + 2]
    u = (ex * g[R_U] + ey * g[R_U + 1] + ez * g[R_U + 2]) / g[R_SU]
    v = (ex * g[R_V] + ey * g[R_V + 1] + ez * g[R_V + 2]) / g[R_SV]
    return True, u, v, t, den


@njit(cache=True, inline="always")
def _outside(g, px, py):
    return px < g[R_BOX] or px > g[R_BOX + 1] or py < g[R_BOX + 2] or py > g[R_BOX + 3]


@njit(cache=True, parallel=True)
def forward(offsets, geom, epay, tiles_x, tile_size, width, height, fx, fy, cx, cy, background, early_stop):
    n_tiles = offsets.shape[0] - 1
    nc = epay.shape[1]
    out = np.zeros((height, width, nc))
    alpha = np.zeros((height, width))
    dsum = np.zeros((height, width))
    nsum = np.zeros((height, width, 3))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            dy = (py + 0.5 - cy) / fy
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                dx = (px + 0.5 - cx) / fx
                T = 1.0
                last = 0
                for e in range(start, end):
                    g = geom[e]
                    if _outside(g, px, py):
                        continue
                    ok, u, v, t, den = _hit(g, dx, dy)
                    if not ok:
                        continue
                    r2 = u * u + v * v
                    if r2 > CUTOFF_R2:
                        continue
                    a = g[R_OP] * math.exp(-0.5 * r2)
                    w = a * T
                    for c in range(nc):
                        out[py, px, c] += w * epay[e, c]
                    alpha[py, px] += w
                    dsum[py, px] += w * t
                    sw = -w if den > 0.0 else w
                    nsum[py, px, 0] += sw * g[R_N]
                    nsum[py, px, 1] += sw * g[R_N + 1]
                    nsum[py, px, 2] += sw * g[R_N + 2]
                    T *= 1.0 - a
                    last = e - start + 1
                    if early_stop and T < T_MIN:
                        break
                for c in range(nc):
                    out[py, px, c] += T * background[c]
                n_contrib[py, px] = last
    return out, alpha, dsum, nsum, n_contrib


@njit(cache=True, parallel=True)
def backward(
    offsets, geom, epay, tiles_x, tile_size, width, height, fx, fy, cx, cy,
    background, n_contrib, g_out, g_alpha, g_dsum, g_nsum,
):
    """Per-entry parameter gradients, shape (n_entries, 12 + C)."""
    n_tiles = offsets.shape[0] - 1
    nc = epay.shape[1]
    grads = np.zeros((geom.shape[0], G_PAY + nc))
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        m = end - start
        hit_e = np.empty(m, dtype=np.int64)
        hit_a = np.empty(m)
        hit_T = np.empty(m)
        hit_s = np.empty(m)
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            dy = (py + 0.5 - cy) / fy
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                dx = (px + 0.5 - cx) / fx
                stop = start + n_contrib[py, px]
                ga = g_alpha[py, px]
                gd = g_dsum[py, px]
                gn0 = g_nsum[py, px, 0]
                gn1 = g_nsum[py, px, 1]
                gn2 = g_nsum[py, px, 2]
                # replay the forward pass, keeping the hits
                nh = 0
                T = 1.0
                for e in range(start, stop):
                    g = geom[e]
                    if _outside(g, px, py):
                        continue
                    ok, u, v, t, den = _hit(g, dx, dy)
                    if not ok:
                        continue
                    r2 = u * u + v * v
                    if r2 > CUTOFF_R2:
                        continue
                    a = g[R_OP] * math.exp(-0.5 * r2)
                    sgn = -1.0 if den > 0.0 else 1.0
                    s = ga + gd * t + sgn * (gn0 * g[R_N] + gn1 * g[R_N + 1] + gn2 * g[R_N + 2])
                    for c in range(nc):
                        s += g_out[py, px, c] * epay[e, c]
                    hit_e[nh] = e
                    hit_a[nh] = a
                    hit_T[nh] = T
                    hit_s[nh] = s
                    nh += 1
                    T *= 1.0 - a
                # background acts as a final fully opaque hit
                rs = 0.0
                for c in range(nc):
                    rs += g_out[py, px, c] * background[c]
                for h in range(nh - 1, -1, -1):
                    e = hit_e[h]
                    g = geom[e]
                    a = hit_a[h]
                    Tk = hit_T[h]
                    s = hit_s[h]
                    w = a * Tk
                    g_a = Tk * (s - rs)
                    rs = s * a + (1.0 - a) * rs

                    ok, u, v, t, den = _hit(g, dx, dy)
                    G = math.exp(-0.5 * (u * u + v * v))
                    su = g[R_SU]
                    sv = g[R_SV]
                    grads[e, G_OP] += g_a * G
                    for c in range(nc):
                        grads[e, G_PAY + c] += w * g_out[py, px, c]
                    gG = g_a * g[R_OP]
                    gu = -u * G * gG
                    gv = -v * G * gG
                    sgn = -1.0 if den > 0.0 else 1.0
                    # d/dN from the normal channel
                    gN0 = w * sgn * gn0
                    gN1 = w * sgn * gn1
                    gN2 = w * sgn * gn2
                    # u = (t d - c).U / su ; v likewise
                    ex = t * dx - g[R_C]
                    ey = t * dy - g[R_C + 1]
                    ez = t - g[R_C + 2]
                    gdu = gu / su
                    gdv = gv / sv
                    grads[e, G_SU] += -gu * u / su
                    grads[e, G_SV] += -gv * v / sv
                    gE0 = gdu * g[R_U] + gdv * g[R_V]
                    gE1 = gdu * g[R_U + 1] + gdv * g[R_V + 1]
                    gE2 = gdu * g[R_U + 2] + gdv * g[R_V + 2]
                    gU0 = gdu * ex
                    gU1 = gdu * ey
                    gU2 = gdu * ez
                    gV0 = gdv * ex
                    gV1 = gdv * ey
                    gV2 = gdv * ez
                    gC0 = -gE0
                    gC1 = -gE1
                    gC2 = -gE2
                    gt = w * gd + gE0 * dx + gE1 * dy + gE2
                    # t = (N.c) / (N.d)
                    g_num = gt / den
                    g_den = -gt * t / den
                    gN0 += g_num * g[R_C] + g_den * dx
                    gN1 += g_num * g[R_C + 1] + g_den * dy
                    gN2 += g_num * g[R_C + 2] + g_den
                    gC0 += g_num * g[R_N]
                    gC1 += g_num * g[R_N + 1]
                    gC2 += g_num * g[R_N + 2]
                    # N = U x V
                    U0, U1, U2 = g[R_U], g[R_U + 1], g[R_U + 2]
                    V0, V1, V2 = g[R_V], g[R_V + 1], g[R_V + 2]
                    gU0 += V1 * gN2 - V2 * gN1
                    gU1 += V2 * gN0 - V0 * gN2
                    gU2 += V0 * gN1 - V1 * gN0
                    gV0 += gN1 * U2 - gN2 * U1
                    gV1 += gN2 * U0 - gN0 * U2
                    gV2 += gN0 * U1 - gN1 * U0
                    grads[e, G_C + 0] += gC0
                    grads[e, G_C + 1] += gC1
                    grads[e, G_C + 2] += gC2
                    grads[e, G_U + 0] += gU0
                    grads[e, G_U + 1] += gU1
                    grads[e, G_U + 2] += gU2
                    grads[e, G_V + 0] += gV0
                    grads[e, G_V + 1] += gV1
                    grads[e, G_V + 2] += gV2
    return grads


@njit(cache=True)
def reduce_entries(entries, grads, n_prims):
    """Sum per-entry gradients into per-primitive rows in entry order."""
    out = np.zeros((n_prims, grads.shape[1]))
    for e in range(entries.shape[0]):
        k = entries[e]
        for j in range(grads.shape[1]):
            out[k, j] += grads[e, j]
    return out


@njit(cache=True)
def contributions(offsets, geom, tiles_x, tile_size, fx, fy, cx, cy, n_contrib, py, px):
    """(entry indices, weights, normals) of the hits at one pixel."""
    ty = py // tile_size
    tx = px // tile_size
    tile = ty * tiles_x + tx
    start = offsets[tile]
    stop = start + n_contrib[py, px]
    ids = np.empty(stop - start, dtype=np.int64)
    ws = np.empty(stop - start)
    ns = np.empty((stop - start, 3))
    dy = (py + 0.5 - cy) / fy
    dx = (px + 0.5 - cx) / fx
    T = 1.0
    nh = 0
    for e in range(start, stop):
        g = geom[e]
        if _outside(g, px, py):
            continue
        ok, u, v, t, den = _hit(g, dx, dy)
        if not ok:
            continue
        r2 = u * u + v * v
        if r2 > CUTOFF_R2:
            continue
        a = g[R_OP] * math.exp(-0.5 * r2)
        ids[nh] = e
        ws[nh] = a * T
        sgn = -1.0 if den > 0.0 else 1.0
        ns[nh, 0] = sgn * g[R_N]
        ns[nh, 1] = sgn * g[R_N + 1]
        ns[nh, 2] = sgn * g[R_N + 2]
        nh += 1
        T *= 1.0 - a
    return ids[:nh], ws[:nh], ns[:nh]
