"""Selective state-space scan along the token axis (numba and numpy twins).

Shapes: u, delta (L, E); A (E, S); B, C (L, S); D (E,); states h (L, E, S).

    h_k = exp(delta_k A) * h_{k-1} + (delta_k u_k) B_k
    y_k = h_k C_k + D u_k
"""

from __future__ import annotations

import numpy as np

from .._accel import njit


@njit
def scan_forward_nb(u, delta, A, B, C, D):
    L, E = u.shape
    S = A.shape[1]
    h = np.zeros((L, E, S))
    y = np.empty((L, E))
    prev = np.zeros((E, S))
    for k in range(L):
        for e in range(E):
            du = delta[k, e] * u[k, e]
            acc = D[e] * u[k, e]
            for s in range(S):
                val = np.exp(delta[k, e] * A[e, s]) * prev[e, s] + du * B[k, s]
                h[k, e, s] = val
                prev[e, s] = val
                acc += val * C[k, s]
            y[k, e] = acc
    return y, h


@njit
def scan_backward_nb(u, delta, A, B, C, D, h, gy):
    L, E = u.shape
    S = A.shape[1]
    gu = np.zeros((L, E))
    gdelta = np.zeros((L, E))
    gA = np.zeros((E, S))
    gB = np.zeros((L, S))
    gC = np.zeros((L, S))
    gD = np.zeros(E)
    gh = np.zeros((E, S))
    for k in range(L - 1, -1, -1):
        for e in range(E):
            g = gy[k, e]
            gD[e] += g * u[k, e]
            gu[k, e] += g * D[e]
            du = delta[k, e] * u[k, e]
            gdu = 0.0
            gd = 0.0
            for s in range(S):
                gC[k, s] += g * h[k, e, s]
                ghs = gh[e, s] + g * C[k, s]
                gB[k, s] += ghs * du
                gdu += ghs * B[k, s]
                dA = np.exp(delta[k, e] * A[e, s])
                hp = h[k - 1, e, s] if k > 0 else 0.0
                t = ghs * hp * dA
                gd += t * A[e, s]
                gA[e, s] += t * delta[k, e]
                gh[e, s] = ghs * dA
            gdelta[k, e] += gd + gdu * u[k, e]
            gu[k, e] += gdu * delta[k, e]
    return gu, gdelta, gA, gB, gC, gD


def scan_forward_np(u, delta, A, B, C, D):
    L, E = u.shape
    dA = np.exp(delta[:, :, None] * A[None])
    drive = (delta * u)[:, :, None] * B[:, None, :]
    h = np.empty((L, E, A.shape[1]))
    prev = np.zeros((E, A.shape[1]))
    for k in range(L):
        prev = dA[k] * prev + drive[k]
        h[k] = prev
    y = np.einsum("kes,ks->ke", h, C) + D * u
    return y, h


def scan_backward_np(u, delta, A, B, C, D, h, gy):
    L, E = u.shape
    dA = np.exp(delta[:, :, None] * A[None])
    gC = np.einsum("ke,kes->ks", gy, h)
    gD = np.sum(gy * u, axis=0)
    gu = gy * D
    gdelta = np.zeros((L, E))
    gA = np.zeros_like(A)
    gB = np.zeros((L, A.shape[1]))
    gh = np.zeros((E, A.shape[1]))
    for k in range(L - 1, -1, -1):
        gh = gh + gy[k][:, None] * C[k][None, :]
        du = delta[k] * u[k]
        gB[k] = du @ gh
        gdu = gh @ B[k]
        hp = h[k - 1] if k > 0 else np.zeros_like(gh)
        t = gh * hp * dA[k]
        gdelta[k] = (t * A).sum(axis=1) + gdu * u[k]
        gA += t * delta[k][:, None]
        gu[k] += gdu * delta[k]
        gh = gh * dA[k]
    return gu, gdelta, gA, gB, gC, gD
