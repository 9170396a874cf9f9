"""Tile kernels for the additive cross-section renderer.

Every kernel exists twice: a numba version (``*_nb``) and a vectorized numpy
version (``*_np``). ``stormsplat._accel.USE_NUMBA`` picks one at call time.

Shared array conventions
------------------------
mu (M, 3)          Gaussian centers
inv6 (M, 6)        inverse covariance, upper triangle (00, 01, 02, 11, 12, 22)
feat (M, N)        activated features
smax (M,)          largest effective scale
planes             origin/u/v (P, 3), spacing/half_width (P,), rows/cols/pix_off (P,)
tiles              plane (T,), r0/c0/nr/nc (T,), start (T+1,), ids (E,)
"""

from __future__ import annotations

import math

import numpy as np

from .._accel import njit, prange

TILE = 16


def plane_pixel(origin, u, v, spacing, i, j):
    a = (j + 0.5) * spacing
    b = (i + 0.5) * spacing
    return origin + a * u + b * v


# ------------------------------------------------------------------ binning


@njit
def _bin_nb(mu, smax, cutoff, origin, u, v, spacing, half_width, rows, cols,
            tile_base, tiles_x, n_tiles):
    P = origin.shape[0]
    M = mu.shape[0]
    counts = np.zeros(n_tiles, np.int64)
    # pass 0 counts, pass 1 fills
    ids = np.empty(0, np.int64)
    start = np.zeros(n_tiles + 1, np.int64)
    cursor = np.zeros(n_tiles, np.int64)
    for pas in range(2):
        for p in range(P):
            nx = u[p, 1] * v[p, 2] - u[p, 2] * v[p, 1]
            ny = u[p, 2] * v[p, 0] - u[p, 0] * v[p, 2]
            nz = u[p, 0] * v[p, 1] - u[p, 1] * v[p, 0]
            dlt = spacing[p]
            for g in range(M):
                rx = mu[g, 0] - origin[p, 0]
                ry = mu[g, 1] - origin[p, 1]
                rz = mu[g, 2] - origin[p, 2]
                h = abs(rx * nx + ry * ny + rz * nz)
                if h > half_width[p] + 3.0 * smax[g]:
                    continue
                R = cutoff * smax[g]
                if h > R:
                    continue
                if math.isinf(R):
                    j0, j1, i0, i1 = 0, cols[p] - 1, 0, rows[p] - 1
                else:
                    rho = math.sqrt(R * R - h * h) / dlt
                    a = (rx * u[p, 0] + ry * u[p, 1] + rz * u[p, 2]) / dlt
                    b = (rx * v[p, 0] + ry * v[p, 1] + rz * v[p, 2]) / dlt
                    j0 = max(int(math.ceil(a - rho - 0.5)), 0)
                    j1 = min(int(math.floor(a + rho - 0.5)), cols[p] - 1)
                    i0 = max(int(math.ceil(b - rho - 0.5)), 0)
                    i1 = min(int(math.floor(b + rho - 0.5)), rows[p] - 1)
                if j0 > j1 or i0 > i1:
                    continue
                for ti in range(i0 // 16, i1 // 16 + 1):
                    for tj in range(j0 // 16, j1 // 16 + 1):
                        t = tile_base[p] + ti * tiles_x[p] + tj
                        if pas == 0:
                            counts[t] += 1
                        else:
                            ids[start[t] + cursor[t]] = g
                            cursor[t] += 1
        if pas == 0:
            for t in range(n_tiles):
                start[t + 1] = start[t] + counts[t]
            ids = np.empty(start[n_tiles], np.int64)
    return start, ids


def _bin_np(mu, smax, cutoff, origin, u, v, spacing, half_width, rows, cols,
            tile_base, tiles_x, n_tiles):
    lists = [[] for _ in range(n_tiles)]
    for p in range(origin.shape[0]):
        n = np.cross(u[p], v[p])
        r = mu - origin[p]
        h = np.abs(r @ n)
        R = cutoff * smax
        keep = (h <= half_width[p] + 3.0 * smax) & (h <= R)
        if np.isinf(cutoff):
            j0 = np.zeros(len(mu), np.int64)
            j1 = np.full(len(mu), cols[p] - 1)
            i0 = np.zeros(len(mu), np.int64)
            i1 = np.full(len(mu), rows[p] - 1)
        else:
            rho = np.sqrt(np.maximum(R * R - h * h, 0.0)) / spacing[p]
            a = (r @ u[p]) / spacing[p]
            b = (r @ v[p]) / spacing[p]
            j0 = np.maximum(np.ceil(a - rho - 0.5), 0).astype(np.int64)
            j1 = np.minimum(np.floor(a + rho - 0.5), cols[p] - 1).astype(np.int64)
            i0 = np.maximum(np.ceil(b - rho - 0.5), 0).astype(np.int64)
            i1 = np.minimum(np.floor(b + rho - 0.5), rows[p] - 1).astype(np.int64)
        keep &= (j0 <= j1) & (i0 <= i1)
        for g in np.nonzero(keep)[0]:
            for ti in range(i0[g] // TILE, i1[g] // TILE + 1):
                for tj in range(j0[g] // TILE, j1[g] // TILE + 1):
                    lists[tile_base[p] + ti * tiles_x[p] + tj].append(g)
    start = np.zeros(n_tiles + 1, np.int64)
    start[1:] = np.cumsum([len(lst) for lst in lists])
    ids = np.array([g for lst in lists for g in lst], np.int64)
    return start, ids


# ------------------------------------------------------------------ forward


@njit
def _entry_disk(g, p, mu, smax, cutoff, origin, u, v, spacing):
    """In-plane center (col, row units) and radius of Gaussian ``g``'s cutoff disk on plane ``p``.

    Every pixel whose Mahalanobis distance passes the cutoff lies inside this disk.
    The radius is -1 when the ball misses the plane and inf when there is no cutoff.
    """
    rx = mu[g, 0] - origin[p, 0]
    ry = mu[g, 1] - origin[p, 1]
    rz = mu[g, 2] - origin[p, 2]
    dlt = spacing[p]
    a = (rx * u[p, 0] + ry * u[p, 1] + rz * u[p, 2]) / dlt
    b = (rx * v[p, 0] + ry * v[p, 1] + rz * v[p, 2]) / dlt
    R = cutoff * smax[g]
    if math.isinf(R):
        return a, b, math.inf
    nx = u[p, 1] * v[p, 2] - u[p, 2] * v[p, 1]
    ny = u[p, 2] * v[p, 0] - u[p, 0] * v[p, 2]
    nz = u[p, 0] * v[p, 1] - u[p, 1] * v[p, 0]
    h = rx * nx + ry * ny + rz * nz
    r2 = R * R - h * h
    if r2 < 0.0:
        return a, b, -1.0
    # relative slack keeps boundary pixels despite rounding in a, b
    return a, b, math.sqrt(r2) / dlt * (1.0 + 1e-9) + 1e-9


@njit
def _row_range(i, a, b, rho, c0, nc):
    if math.isinf(rho):
        return c0, c0 + nc - 1
    dr = i + 0.5 - b
    rem = rho * rho - dr * dr
    if rem < 0.0:
        return 0, -1
    half = math.sqrt(rem)
    return max(c0, int(math.ceil(a - half - 0.5))), min(c0 + nc - 1, int(math.floor(a + half - 0.5)))


@njit
def _row_bounds(b, rho, r0, nr):
    if math.isinf(rho):
        return r0, r0 + nr - 1
    if rho < 0.0:
        return 0, -1
    return max(r0, int(math.ceil(b - rho - 0.5))), min(r0 + nr - 1, int(math.floor(b + rho - 0.5)))


@njit(parallel=True)
def _forward_nb(mu, inv6, feat, smax, cutoff, cut2, origin, u, v, spacing, cols, pix_off,
                tplane, tr0, tc0, tnr, tnc, start, ids, out, counts):
    N = feat.shape[1]
    for t in prange(tplane.shape[0]):
        p = tplane[t]
        for e in range(start[t], start[t + 1]):
            g = ids[e]
            ca, cb, rho = _entry_disk(g, p, mu, smax, cutoff, origin, u, v, spacing)
            i0, i1 = _row_bounds(cb, rho, tr0[t], tnr[t])
            for i in range(i0, i1 + 1):
                j0, j1 = _row_range(i, ca, cb, rho, tc0[t], tnc[t])
                for j in range(j0, j1 + 1):
                    a = (j + 0.5) * spacing[p]
                    b = (i + 0.5) * spacing[p]
                    dx = origin[p, 0] + a * u[p, 0] + b * v[p, 0] - mu[g, 0]
                    dy = origin[p, 1] + a * u[p, 1] + b * v[p, 1] - mu[g, 1]
                    dz = origin[p, 2] + a * u[p, 2] + b * v[p, 2] - mu[g, 2]
                    m = (inv6[g, 0] * dx * dx + inv6[g, 3] * dy * dy + inv6[g, 5] * dz * dz
                         + 2.0 * (inv6[g, 1] * dx * dy + inv6[g, 2] * dx * dz + inv6[g, 4] * dy * dz))
                    if m > cut2:
                        continue
                    w = math.exp(-0.5 * m)
                    idx = pix_off[p] + i * cols[p] + j
                    for c in range(N):
                        out[idx, c] += feat[g, c] * w
                    counts[idx] += 1


def _tile_geometry(t, origin, u, v, spacing, cols, pix_off, tplane, tr0, tc0, tnr, tnc):
    p = tplane[t]
    ii, jj = np.meshgrid(np.arange(tnr[t]) + tr0[t], np.arange(tnc[t]) + tc0[t], indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    a = (jj + 0.5) * spacing[p]
    b = (ii + 0.5) * spacing[p]
    pos = origin[p] + a[:, None] * u[p] + b[:, None] * v[p]
    idx = pix_off[p] + ii * cols[p] + jj
    return pos, idx


def _mahalanobis(d, inv6_g):
    return (inv6_g[:, 0] * d[..., 0] ** 2 + inv6_g[:, 3] * d[..., 1] ** 2 + inv6_g[:, 5] * d[..., 2] ** 2
            + 2.0 * (inv6_g[:, 1] * d[..., 0] * d[..., 1] + inv6_g[:, 2] * d[..., 0] * d[..., 2]
                     + inv6_g[:, 4] * d[..., 1] * d[..., 2]))


def _forward_np(mu, inv6, feat, smax, cutoff, cut2, origin, u, v, spacing, cols, pix_off,
                tplane, tr0, tc0, tnr, tnc, start, ids, out, counts):
    for t in range(tplane.shape[0]):
        gs = ids[start[t]:start[t + 1]]
        if gs.size == 0:
            continue
        pos, idx = _tile_geometry(t, origin, u, v, spacing, cols, pix_off, tplane, tr0, tc0, tnr, tnc)
        d = pos[:, None, :] - mu[gs][None]
        m = _mahalanobis(d, inv6[gs])
        live = m <= cut2
        w = np.where(live, np.exp(-0.5 * np.where(live, m, 0.0)), 0.0)
        out[idx] += w @ feat[gs]
        counts[idx] += live.sum(axis=1)


# ----------------------------------------------------------------- backward


@njit(parallel=True)
def _backward_nb(mu, inv6, feat, smax, cutoff, cut2, origin, u, v, spacing, cols, pix_off,
                 tplane, tr0, tc0, tnr, tnc, start, ids, upstream, partial):
    N = feat.shape[1]
    for t in prange(tplane.shape[0]):
        p = tplane[t]
        for e in range(start[t], start[t + 1]):
            g = ids[e]
            ca, cb, rho = _entry_disk(g, p, mu, smax, cutoff, origin, u, v, spacing)
            i0, i1 = _row_bounds(cb, rho, tr0[t], tnr[t])
            a00 = inv6[g, 0]
            a01 = inv6[g, 1]
            a02 = inv6[g, 2]
            a11 = inv6[g, 3]
            a12 = inv6[g, 4]
            a22 = inv6[g, 5]
            for i in range(i0, i1 + 1):
                j0, j1 = _row_range(i, ca, cb, rho, tc0[t], tnc[t])
                for j in range(j0, j1 + 1):
                    a = (j + 0.5) * spacing[p]
                    b = (i + 0.5) * spacing[p]
                    dx = origin[p, 0] + a * u[p, 0] + b * v[p, 0] - mu[g, 0]
                    dy = origin[p, 1] + a * u[p, 1] + b * v[p, 1] - mu[g, 1]
                    dz = origin[p, 2] + a * u[p, 2] + b * v[p, 2] - mu[g, 2]
                    adx = a00 * dx + a01 * dy + a02 * dz
                    ady = a01 * dx + a11 * dy + a12 * dz
                    adz = a02 * dx + a12 * dy + a22 * dz
                    m = dx * adx + dy * ady + dz * adz
                    if m > cut2:
                        continue
                    w = math.exp(-0.5 * m)
                    idx = pix_off[p] + i * cols[p] + j
                    dldw = 0.0
                    for c in range(N):
                        gc = upstream[idx, c]
                        dldw += gc * feat[g, c]
                        partial[e, 3 + c] += gc * w
                    q = dldw * w
                    partial[e, 0] += q * adx
                    partial[e, 1] += q * ady
                    partial[e, 2] += q * adz
                    hq = -0.5 * q
                    partial[e, 3 + N] += hq * dx * dx
                    partial[e, 4 + N] += hq * dx * dy
                    partial[e, 5 + N] += hq * dx * dz
                    partial[e, 6 + N] += hq * dy * dy
                    partial[e, 7 + N] += hq * dy * dz
                    partial[e, 8 + N] += hq * dz * dz


def _backward_np(mu, inv6, feat, smax, cutoff, cut2, origin, u, v, spacing, cols, pix_off,
                 tplane, tr0, tc0, tnr, tnc, start, ids, upstream, partial):
    N = feat.shape[1]
    for t in range(tplane.shape[0]):
        s0, s1 = start[t], start[t + 1]
        gs = ids[s0:s1]
        if gs.size == 0:
            continue
        pos, idx = _tile_geometry(t, origin, u, v, spacing, cols, pix_off, tplane, tr0, tc0, tnr, tnc)
        d = pos[:, None, :] - mu[gs][None]
        m = _mahalanobis(d, inv6[gs])
        live = m <= cut2
        w = np.where(live, np.exp(-0.5 * np.where(live, m, 0.0)), 0.0)
        up = upstream[idx]
        dldw = up @ feat[gs].T
        q = dldw * w
        i6 = inv6[gs]
        ad = np.stack([
            i6[:, 0] * d[..., 0] + i6[:, 1] * d[..., 1] + i6[:, 2] * d[..., 2],
            i6[:, 1] * d[..., 0] + i6[:, 3] * d[..., 1] + i6[:, 4] * d[..., 2],
            i6[:, 2] * d[..., 0] + i6[:, 4] * d[..., 1] + i6[:, 5] * d[..., 2],
        ], axis=-1)
        partial[s0:s1, 0:3] += np.einsum("pg,pgk->gk", q, ad)
        partial[s0:s1, 3:3 + N] += w.T @ up
        hq = -0.5 * q
        pairs = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
        for k, (r, c) in enumerate(pairs):
            partial[s0:s1, 3 + N + k] += np.sum(hq * d[..., r] * d[..., c], axis=0)


@njit
def _reduce_nb(ids, partial, grads):
    # serial, fixed entry order: identical sums for any worker count
    for e in range(ids.shape[0]):
        g = ids[e]
        for k in range(partial.shape[1]):
            grads[g, k] += partial[e, k]


def _reduce_np(ids, partial, grads):
    np.add.at(grads, ids, partial)


def kernels(use_numba: bool):
    if use_numba:
        return _bin_nb, _forward_nb, _backward_nb, _reduce_nb
    return _bin_np, _forward_np, _backward_np, _reduce_np
