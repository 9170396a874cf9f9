"""Differentiable additive cross-section renderer.

A pixel at 3-D position ``x_p`` receives ``sum_i f_i * exp(-0.5 (x_p - mu_i)^T Sigma_i^-1 (x_p - mu_i))``
over every Gaussian that survives slab culling. Image planes are split into
16x16 tiles; each tile carries the Gaussians whose ``cutoff * sigma_max`` ball
reaches it, in ascending index order, so sums have a fixed order.

Gradients are reduced per Gaussian from per-tile partials in tile order, which
keeps results bit-identical for any number of worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .gaussians import GaussianGroup, inverse_covariance, quat_to_rotmat, rotmat_grad_to_quat
from .kernels import render as K

# a dropped kernel tail is below exp(-cutoff**2 / 2) ~ 6.7e-10 of that Gaussian's peak
DEFAULT_CUTOFF = 6.5
AXES = ("x", "y", "z")


@dataclass(frozen=True)
class RenderPlane:
    """Virtual imaging plane; pixel (i, j) sits at ``origin + (j+.5)*spacing*u + (i+.5)*spacing*v``."""

    origin: tuple
    u: tuple
    v: tuple
    rows: int
    cols: int
    spacing: float = 1.0
    half_width: float = 0.5

    def __post_init__(self):
        o, u, v = (np.asarray(a, float).reshape(3) for a in (self.origin, self.u, self.v))
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9:
            raise ValueError("plane basis vectors must be unit length")
        if abs(u @ v) > 1e-9:
            raise ValueError("plane basis vectors must be orthogonal")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("plane needs at least one pixel")
        if not self.half_width > 0 or not self.spacing > 0:
            raise ValueError("half_width and spacing must be positive")
        object.__setattr__(self, "origin", tuple(o))
        object.__setattr__(self, "u", tuple(u))
        object.__setattr__(self, "v", tuple(v))

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def pixel_positions(self) -> np.ndarray:
        """(rows, cols, 3) array of pixel-center positions."""
        i, j = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return K.plane_pixel(
            np.asarray(self.origin), np.asarray(self.u), np.asarray(self.v),
            self.spacing, i[..., None], j[..., None],
        )


@dataclass
class RenderOutput:
    image: np.ndarray
    counts: np.ndarray | None = None


@dataclass
class GaussianGrads:
    """Gradients with respect to the raw parameters of a group."""

    positions: np.ndarray
    features: np.ndarray
    scales: np.ndarray
    quats: np.ndarray

    @classmethod
    def zeros_like(cls, g: GaussianGroup) -> "GaussianGrads":
        return cls(np.zeros_like(g.positions), np.zeros_like(g.features),
                   np.zeros_like(g.scales), np.zeros_like(g.quats))

    def __iadd__(self, other: "GaussianGrads"):
        for k in ("positions", "features", "scales", "quats"):
            getattr(self, k).__iadd__(getattr(other, k))
        return self

    def scaled(self, a: float) -> "GaussianGrads":
        return GaussianGrads(self.positions * a, self.features * a, self.scales * a, self.quats * a)

    def as_dict(self) -> dict:
        return {"positions": self.positions, "features": self.features,
                "scales": self.scales, "quats": self.quats}


def axis_slice(axis: str, index: int, dims) -> RenderPlane:
    """Axis-aligned plane matching slice ``index`` of a (D, H, W) grid.

    ``z`` slices image ``volume[k]`` (rows=H, cols=W), ``y`` slices
    ``volume[:, k]`` (rows=D, cols=W), ``x`` slices ``volume[:, :, k]`` (rows=D, cols=H).
    """
    D, H, W = dims
    ex, ey, ez = np.eye(3)
    if axis == "z":
        n, origin, u, v, rows, cols = D, (0, 0, index + 0.5), ex, ey, H, W
    elif axis == "y":
        n, origin, u, v, rows, cols = H, (0, index + 0.5, 0), ex, ez, D, W
    elif axis == "x":
        n, origin, u, v, rows, cols = W, (index + 0.5, 0, 0), ey, ez, D, H
    else:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    if not 0 <= index < n:
        raise IndexError(f"{axis}-slice index {index} outside [0, {n})")
    return RenderPlane(origin, u, v, rows, cols, 1.0, 0.5)


def volume_slice(data: np.ndarray, axis: str, index: int) -> np.ndarray:
    """The (rows, cols, C) ground-truth counterpart of ``axis_slice``."""
    if axis == "z":
        return data[index]
    if axis == "y":
        return data[:, index]
    if axis == "x":
        return data[:, :, index]
    raise ValueError(f"axis must be one of x, y, z, got {axis!r}")


def all_axis_slices(dims):
    return [(a, k) for a, n in zip(("z", "y", "x"), dims) for k in range(n)]


# ------------------------------------------------------------ render context


class RenderContext:
    """Binned Gaussians for a batch of planes; reusable for the backward pass."""

    def __init__(self, g: GaussianGroup, planes, cutoff: float = DEFAULT_CUTOFF,
                 features: np.ndarray | None = None, use_numba: bool | None = None):
        self.group = g
        self.planes = list(planes)
        self.cutoff = float(cutoff)
        self.use_numba = _accel.USE_NUMBA if use_numba is None else use_numba
        self.custom_features = features is not None
        self.mu = np.ascontiguousarray(g.positions, dtype=np.float64)
        M = g.count
        if M:
            self.R = quat_to_rotmat(g.quats)
            inv = inverse_covariance(g.scales, g.quats)
        else:
            self.R = np.zeros((0, 3, 3))
            inv = np.zeros((0, 3, 3))
        self.inv6 = np.ascontiguousarray(
            np.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 0, 2], inv[:, 1, 1], inv[:, 1, 2], inv[:, 2, 2]], axis=1)
            if M else np.zeros((0, 6))
        )
        self.smax = np.exp(g.scales.max(axis=1)) if M else np.zeros(0)
        feat = g.activated_features() if features is None else np.asarray(features, float)
        self.feat = np.ascontiguousarray(feat[:, None] if feat.ndim == 1 else feat, dtype=np.float64)
        self._layout()
        self._bin()

    def _layout(self):
        P = len(self.planes)
        pl = self.planes
        self.origin = np.array([p.origin for p in pl], float).reshape(P, 3)
        self.u = np.array([p.u for p in pl], float).reshape(P, 3)
        self.v = np.array([p.v for p in pl], float).reshape(P, 3)
        self.spacing = np.array([p.spacing for p in pl], float)
        self.half_width = np.array([p.half_width for p in pl], float)
        self.rows = np.array([p.rows for p in pl], np.int64)
        self.cols = np.array([p.cols for p in pl], np.int64)
        npix = self.rows * self.cols
        self.pix_off = np.zeros(P, np.int64)
        self.pix_off[1:] = np.cumsum(npix)[:-1]
        self.n_pix = int(npix.sum())
        tiles_y = -(-self.rows // K.TILE)
        self.tiles_x = -(-self.cols // K.TILE)
        per_plane = tiles_y * self.tiles_x
        self.tile_base = np.zeros(P, np.int64)
        self.tile_base[1:] = np.cumsum(per_plane)[:-1]
        tp, r0, c0, nr, nc = [], [], [], [], []
        for p in range(P):
            for ti in range(tiles_y[p]):
                for tj in range(self.tiles_x[p]):
                    tp.append(p)
                    r0.append(ti * K.TILE)
                    c0.append(tj * K.TILE)
                    nr.append(min(K.TILE, self.rows[p] - ti * K.TILE))
                    nc.append(min(K.TILE, self.cols[p] - tj * K.TILE))
        as64 = lambda a: np.asarray(a, np.int64)
        self.tplane, self.tr0, self.tc0, self.tnr, self.tnc = map(as64, (tp, r0, c0, nr, nc))
        self.n_tiles = len(tp)

    def _bin(self):
        bin_fn = K.kernels(self.use_numba)[0]
        if self.group.count == 0 or self.n_tiles == 0:
            self.start = np.zeros(self.n_tiles + 1, np.int64)
            self.ids = np.zeros(0, np.int64)
            return
        self.start, self.ids = bin_fn(
            self.mu, self.smax, self.cutoff, self.origin, self.u, self.v, self.spacing,
            self.half_width, self.rows, self.cols, self.tile_base, self.tiles_x, self.n_tiles,
        )

    @property
    def _cut2(self) -> float:
        return math.inf if math.isinf(self.cutoff) else self.cutoff ** 2

    def _geometry_args(self):
        return (self.origin, self.u, self.v, self.spacing, self.cols, self.pix_off,
                self.tplane, self.tr0, self.tc0, self.tnr, self.tnc, self.start, self.ids)

    def forward_flat(self) -> tuple[np.ndarray, np.ndarray]:
        N = self.feat.shape[1]
        out = np.zeros((self.n_pix, N))
        counts = np.zeros(self.n_pix, np.int64)
        if self.ids.size:
            fwd = K.kernels(self.use_numba)[1]
            fwd(self.mu, self.inv6, self.feat, self.smax, self.cutoff, self._cut2,
                *self._geometry_args(), out, counts)
        return out, counts

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [
            flat[o:o + p.rows * p.cols].reshape(p.rows, p.cols, *flat.shape[1:])
            for o, p in zip(self.pix_off, self.planes)
        ]

    def forward(self) -> list[np.ndarray]:
        return self.split(self.forward_flat()[0])

    def backward_flat(self, upstream: np.ndarray) -> GaussianGrads:
        g = self.group
        N = self.feat.shape[1]
        upstream = np.ascontiguousarray(upstream, dtype=np.float64).reshape(self.n_pix, N)
        width = 9 + N
        raw = np.zeros((g.count, width))
        if self.ids.size:
            _, _, bwd, red = K.kernels(self.use_numba)
            partial = np.zeros((self.ids.size, width))
            bwd(self.mu, self.inv6, self.feat, self.smax, self.cutoff, self._cut2,
                *self._geometry_args(), upstream, partial)
            red(self.ids, partial, raw)
        return self._chain(raw)

    def backward(self, upstreams) -> GaussianGrads:
        flat = np.concatenate([np.asarray(u, float).reshape(-1, self.feat.shape[1]) for u in upstreams])
        return self.backward_flat(flat)

    def _chain(self, raw: np.ndarray) -> GaussianGrads:
        """Map (d mu, d feat_act, d inv-cov) to raw-parameter gradients."""
        g = self.group
        N = self.feat.shape[1]
        d_pos = raw[:, :3].copy()
        d_feat_act = raw[:, 3:3 + N]
        if self.custom_features:
            d_feat = np.zeros_like(g.features)
        else:
            d_feat = d_feat_act * g.feature_activation_grad()
        s = raw[:, 3 + N:]
        G = np.empty((g.count, 3, 3))
        G[:, 0, 0], G[:, 0, 1], G[:, 0, 2] = s[:, 0], s[:, 1], s[:, 2]
        G[:, 1, 0], G[:, 1, 1], G[:, 1, 2] = s[:, 1], s[:, 3], s[:, 4]
        G[:, 2, 0], G[:, 2, 1], G[:, 2, 2] = s[:, 2], s[:, 4], s[:, 5]
        # inverse covariance = R diag(exp(-2 s)) R^T
        dvals = np.exp(-2.0 * g.scales)
        RtGR = np.swapaxes(self.R, 1, 2) @ G @ self.R
        d_scales = -2.0 * dvals * np.diagonal(RtGR, axis1=1, axis2=2)
        dR = 2.0 * (G @ self.R) * dvals[:, None, :]
        d_quats = rotmat_grad_to_quat(g.quats, dR) if g.count else np.zeros((0, 4))
        return GaussianGrads(d_pos, d_feat, d_scales, d_quats)


# ------------------------------------------------------------ public API


def render_planes(g: GaussianGroup, planes, cutoff: float = DEFAULT_CUTOFF) -> list[np.ndarray]:
    return RenderContext(g, planes, cutoff).forward()


def render_plane(g: GaussianGroup, plane: RenderPlane, cutoff: float = DEFAULT_CUTOFF,
                 with_counts: bool = False) -> RenderOutput:
    ctx = RenderContext(g, [plane], cutoff)
    flat, counts = ctx.forward_flat()
    image = ctx.split(flat)[0]
    return RenderOutput(image, ctx.split(counts)[0] if with_counts else None)


def render_plane_backward(g: GaussianGroup, plane: RenderPlane, upstream: np.ndarray,
                          cutoff: float = DEFAULT_CUTOFF) -> GaussianGrads:
    upstream = np.asarray(upstream, float)
    if upstream.shape[:2] != (plane.rows, plane.cols):
        raise ValueError(f"upstream shape {upstream.shape} does not match plane {plane.rows}x{plane.cols}")
    if not np.all(np.isfinite(upstream)):
        raise ValueError("upstream gradient must be finite")
    return RenderContext(g, [plane], cutoff).backward([upstream])


def grid_planes(dims) -> list[RenderPlane]:
    """One z-plane per depth level; slab culling disabled so every voxel sees the full field."""
    D, H, W = dims
    return [
        RenderPlane((0, 0, k + 0.5), (1, 0, 0), (0, 1, 0), H, W, 1.0, math.inf) for k in range(D)
    ]


def render_volume(g: GaussianGroup, dims, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """Activated features evaluated at every voxel center, shape (D, H, W, N)."""
    return np.stack(RenderContext(g, grid_planes(dims), cutoff).forward())


class DensityRender:
    """Clamped unit-amplitude density on the voxel grid, with its backward pass."""

    def __init__(self, g: GaussianGroup, dims, tau: float, cutoff: float = DEFAULT_CUTOFF):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.dims = tuple(dims)
        self.tau = float(tau)
        self.ctx = RenderContext(g, grid_planes(dims), cutoff, features=np.ones((g.count, 1)))
        flat, _ = self.ctx.forward_flat()
        self.raw = flat[:, 0].reshape(self.dims)
        self.value = np.minimum(self.raw, self.tau)

    def backward(self, upstream: np.ndarray) -> GaussianGrads:
        up = np.where(self.raw < self.tau, np.asarray(upstream, float), 0.0)
        return self.ctx.backward_flat(up.reshape(-1, 1))


def render_density(g: GaussianGroup, dims, tau: float, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    if g.count == 0:
        if not tau > 0:
            raise ValueError("tau must be positive")
        return np.zeros(tuple(dims))
    return DensityRender(g, dims, tau, cutoff).value
