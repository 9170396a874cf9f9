"""Horn-Schunck Jacobi sweeps (numba and numpy twins).

Both iterate on the total flow ``(u, v)`` around a warp point ``(u0, v0)``:

    u <- avg(u) - Ix * (Ix (avg(u) - u0) + Iy (avg(v) - v0) + It) / (alpha^2 + Ix^2 + Iy^2)

with the classic 3x3 neighbour weights (1/6 edge, 1/12 corner) and replicated borders.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .._accel import njit

_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]])


@njit
def _neighbour_mean(f, i, j, H, W):
    im = max(i - 1, 0)
    ip = min(i + 1, H - 1)
    jm = max(j - 1, 0)
    jp = min(j + 1, W - 1)
    edge = f[im, j] + f[ip, j] + f[i, jm] + f[i, jp]
    corner = f[im, jm] + f[im, jp] + f[ip, jm] + f[ip, jp]
    return edge / 6.0 + corner / 12.0


@njit
def hs_sweeps_nb(u, v, u0, v0, Ix, Iy, It, alpha2, n_iter):
    H, W = u.shape
    un = np.empty_like(u)
    vn = np.empty_like(v)
    for _ in range(n_iter):
        for i in range(H):
            for j in range(W):
                ub = _neighbour_mean(u, i, j, H, W)
                vb = _neighbour_mean(v, i, j, H, W)
                ix = Ix[i, j]
                iy = Iy[i, j]
                r = (ix * (ub - u0[i, j]) + iy * (vb - v0[i, j]) + It[i, j]) / (alpha2 + ix * ix + iy * iy)
                un[i, j] = ub - ix * r
                vn[i, j] = vb - iy * r
        u, un = un, u
        v, vn = vn, v
    return u, v


def hs_sweeps_np(u, v, u0, v0, Ix, Iy, It, alpha2, n_iter):
    denom = alpha2 + Ix * Ix + Iy * Iy
    for _ in range(n_iter):
        ub = ndimage.correlate(u, _HS_KERNEL, mode="nearest")
        vb = ndimage.correlate(v, _HS_KERNEL, mode="nearest")
        r = (Ix * (ub - u0) + Iy * (vb - v0) + It) / denom
        u = ub - Ix * r
        v = vb - Iy * r
    return u, v
