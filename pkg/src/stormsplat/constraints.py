"""Reconstruction priors: pseudo-3D optical flow (local detail) and the clamped
density target (global trend)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _accel
from .gaussians import GaussianGroup
from .kernels import flow as FK
from .renderer import DEFAULT_CUTOFF, DensityRender, GaussianGrads
from .volume import Channel, RadarVolume


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    alpha: float = 10.0
    iterations: int = 100
    warps: int = 2
    slice_step: int = 4
    # images are rescaled jointly so their peak is this value before solving
    intensity_peak: float = 255.0
    gain_compensation: bool = True


@dataclass
class FlowGrid:
    """Per-voxel displacement (voxels/frame) on the (D, H, W) grid, components (x, y, z)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, float)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"flow grid must be (D, H, W, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("flow grid must be finite")

    @property
    def dims(self):
        return self.data.shape[:3]

    def lookup(self, positions: np.ndarray, trilinear: bool = False) -> np.ndarray:
        """Reference flow at each position: nearest voxel by default, clamped to the grid."""
        positions = np.asarray(positions, float)
        D, H, W = self.dims
        if trilinear:
            coords = np.stack([positions[:, 2], positions[:, 1], positions[:, 0]]) - 0.5
            return np.stack(
                [ndimage.map_coordinates(self.data[..., k], coords, order=1, mode="nearest") for k in range(3)],
                axis=1,
            )
        iw = np.clip(np.floor(positions[:, 0]).astype(np.int64), 0, W - 1)
        ih = np.clip(np.floor(positions[:, 1]).astype(np.int64), 0, H - 1)
        idd = np.clip(np.floor(positions[:, 2]).astype(np.int64), 0, D - 1)
        return self.data[idd, ih, iw]

    def to_volume(self, timestamp: int = 0) -> RadarVolume:
        chans = tuple(Channel(f"flow_{a}", "voxel/frame", False) for a in "xyz")
        return RadarVolume(self.data.astype(np.float32), timestamp=timestamp, channels=chans)

    @classmethod
    def from_volume(cls, v: RadarVolume) -> "FlowGrid":
        if v.n_channels != 3:
            raise ValueError("a flow volume has exactly 3 channels")
        return cls(v.data.astype(np.float64))


# ------------------------------------------------------------- 2-D flow


def _downsample(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 1.0, mode="nearest")[::2, ::2]


def _upsample_flow(flow: np.ndarray, shape) -> np.ndarray:
    H, W = shape
    h, w = flow.shape[:2]
    yy, xx = np.meshgrid((np.arange(H) + 0.5) * h / H - 0.5, (np.arange(W) + 0.5) * w / W - 0.5, indexing="ij")
    out = np.empty((H, W, 2))
    out[..., 0] = ndimage.map_coordinates(flow[..., 0], [yy, xx], order=1, mode="nearest") * (W / w)
    out[..., 1] = ndimage.map_coordinates(flow[..., 1], [yy, xx], order=1, mode="nearest") * (H / h)
    return out


def _warp(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    H, W = img.shape
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    return ndimage.map_coordinates(img, [yy + flow[..., 1], xx + flow[..., 0]], order=1, mode="nearest")


def flow_2d(a: np.ndarray, b: np.ndarray, cfg: FlowConfig = FlowConfig(),
            use_numba: bool | None = None) -> np.ndarray:
    """Dense displacement from image ``a`` to image ``b``.

    Coarse-to-fine Horn-Schunck with bilinear warping. Returns (rows, cols, 2)
    holding (d_col, d_row) per pixel.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"flow_2d needs two equal 2-D images, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("images must be finite")
    flow = np.zeros(a.shape + (2,))
    pa, pb = np.abs(a).max(), np.abs(b).max()
    if pa == 0 or pb == 0 or (np.ptp(a) == 0 and np.ptp(b) == 0):
        return flow
    sweeps = FK.hs_sweeps_nb if (_accel.USE_NUMBA if use_numba is None else use_numba) else FK.hs_sweeps_np
    if cfg.gain_compensation:
        # out-of-plane motion mostly rescales a slice; per-image gain keeps HS from reading it as flow
        a = a * (cfg.intensity_peak / pa)
        b = b * (cfg.intensity_peak / pb)
    else:
        peak = max(pa, pb)
        a = a * (cfg.intensity_peak / peak)
        b = b * (cfg.intensity_peak / peak)
    pyr = [(a, b)]
    for _ in range(cfg.levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape) < 32:  # coarser levels lose small cells entirely
            break
        pyr.append((_downsample(pa), _downsample(pb)))
    flow = np.zeros(pyr[-1][0].shape + (2,))
    alpha2 = cfg.alpha ** 2
    for level, (la, lb) in enumerate(reversed(pyr)):
        if level:
            flow = _upsample_flow(flow, la.shape)
        for _ in range(cfg.warps):
            wb = _warp(lb, flow)
            mean = 0.5 * (la + wb)
            Iy, Ix = np.gradient(mean)
            It = wb - la
            u0 = np.ascontiguousarray(flow[..., 0])
            v0 = np.ascontiguousarray(flow[..., 1])
            u, v = sweeps(u0.copy(), v0.copy(), u0, v0, Ix, Iy, It, alpha2, cfg.iterations)
            # the linearisation is only trusted about a pixel around the warp point
            step = np.stack([u - u0, v - v0], axis=-1)
            norm = np.sqrt(np.sum(step * step, axis=-1, keepdims=True))
            flow = flow + step * np.minimum(1.0, 1.0 / np.maximum(norm, 1e-12))
    return flow


def fuse_flow(flows_xy: np.ndarray, flows_xz: np.ndarray, flows_yz: np.ndarray) -> FlowGrid:
    """Average per-plane 2-D flows into one 3-D field.

    flows_xy: (D, H, W, 2) from z-slices, components (x, y)
    flows_xz: (H, D, W, 2) from y-slices, components (x, z)
    flows_yz: (W, D, H, 2) from x-slices, components (y, z)
    """
    flows_xy = np.asarray(flows_xy, float)
    D, H, W = flows_xy.shape[:3]
    xz = np.transpose(np.asarray(flows_xz, float), (1, 0, 2, 3))
    yz = np.transpose(np.asarray(flows_yz, float), (1, 2, 0, 3))
    if flows_xy.shape != (D, H, W, 2) or xz.shape != (D, H, W, 2) or yz.shape != (D, H, W, 2):
        raise ValueError(
            f"per-plane flow shapes disagree: {flows_xy.shape}, {np.shape(flows_xz)}, {np.shape(flows_yz)}"
        )
    out = np.empty((D, H, W, 3))
    out[..., 0] = 0.5 * (flows_xy[..., 0] + xz[..., 0])
    out[..., 1] = 0.5 * (flows_xy[..., 1] + yz[..., 0])
    out[..., 2] = 0.5 * (xz[..., 1] + yz[..., 1])
    return FlowGrid(out)


def _sampled_slices(n: int, step: int):
    """(solve index, covered range) per block of ``step`` consecutive slices."""
    step = max(1, int(step))
    for s in range(0, n, step):
        e = min(s + step, n)
        yield min(s + step // 2, e - 1), range(s, e)


def pseudo3d_flow(a: RadarVolume | np.ndarray, b: RadarVolume | np.ndarray,
                  cfg: FlowConfig = FlowConfig()) -> FlowGrid:
    """Fused flow from frame ``a`` to frame ``b`` using the primary channel."""
    fa = a.primary if isinstance(a, RadarVolume) else np.asarray(a)
    fb = b.primary if isinstance(b, RadarVolume) else np.asarray(b)
    fa = fa.astype(float)
    fb = fb.astype(float)
    D, H, W = fa.shape
    xy = np.zeros((D, H, W, 2))
    xz = np.zeros((H, D, W, 2))
    yz = np.zeros((W, D, H, 2))
    for k, cover in _sampled_slices(D, cfg.slice_step):
        xy[cover.start:cover.stop] = flow_2d(fa[k], fb[k], cfg)
    for k, cover in _sampled_slices(H, cfg.slice_step):
        xz[cover.start:cover.stop] = flow_2d(fa[:, k], fb[:, k], cfg)
    for k, cover in _sampled_slices(W, cfg.slice_step):
        yz[cover.start:cover.stop] = flow_2d(fa[:, :, k], fb[:, :, k], cfg)
    return fuse_flow(xy, xz, yz)


# ------------------------------------------------------------- local loss


def local_loss(prev_positions: np.ndarray, cur_positions: np.ndarray, flow: FlowGrid,
               trilinear: bool = False) -> tuple[float, np.ndarray]:
    """Mean squared gap between each Gaussian's displacement and its reference flow.

    The reference is read at the previous position. Returns the loss and its
    gradient with respect to ``cur_positions``.
    """
    prev_positions = np.asarray(prev_positions, float)
    cur_positions = np.asarray(cur_positions, float)
    if prev_positions.shape != cur_positions.shape:
        raise ValueError("previous and current positions differ in shape")
    M = len(cur_positions)
    if M == 0:
        return 0.0, np.zeros_like(cur_positions)
    ref = flow.lookup(prev_positions, trilinear)
    r = cur_positions - prev_positions - ref
    return float(np.sum(r * r) / M), 2.0 * r / M


# ------------------------------------------------------------- global loss


@dataclass
class TargetDistribution:
    values: np.ndarray
    tau: float

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def dims(self):
        return self.values.shape


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian blur with half-sample symmetric padding."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel_1d(sigma)
    out = np.asarray(field, float)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return out


def default_tau(smoothed: np.ndarray, nonnull: np.ndarray, fraction: float = 0.8,
                percentile: float = 95.0) -> float:
    vals = smoothed[nonnull]
    if vals.size == 0:
        vals = smoothed.ravel()
    tau = fraction * float(np.percentile(vals, percentile))
    return tau if tau > 0 else 1.0


def target_distribution(v: RadarVolume | np.ndarray, sigma_k: float = 2.0, tau: float | None = None,
                        null_threshold: float = 0.0, gain: float = 1.0) -> TargetDistribution:
    """min(blur(primary) * gain, tau); ``tau`` defaults to 0.8 x p95 over non-null voxels."""
    field = v.primary if isinstance(v, RadarVolume) else np.asarray(v)
    blurred = smooth(field.astype(float), sigma_k) * gain
    if tau is None:
        tau = default_tau(blurred, field > null_threshold)
    if not tau > 0:
        raise ValueError("tau must be positive")
    return TargetDistribution(np.minimum(blurred, tau), float(tau))


def density_mass(n_gaussians: int, scale: float = 1.0) -> float:
    """Integral of ``n`` unit-amplitude isotropic kernels of the given scale."""
    return n_gaussians * (2.0 * math.pi) ** 1.5 * scale ** 3


def density_target(v: RadarVolume, n_gaussians: int, sigma_k: float = 2.0, scale: float = 1.0,
                   tau_fraction: float = 0.8, null_threshold: float = 0.0) -> TargetDistribution:
    """Target in density units: the blurred echo is rescaled so its mass equals the
    total mass of ``n_gaussians`` unit kernels, then clamped."""
    field = v.primary.astype(float)
    blurred = smooth(field, sigma_k)
    total = blurred.sum()
    gain = density_mass(n_gaussians, scale) / total if total > 0 else 0.0
    blurred = blurred * gain
    tau = default_tau(blurred, field > null_threshold, tau_fraction)
    return TargetDistribution(np.minimum(blurred, tau), tau)


def global_loss(g: GaussianGroup, p: TargetDistribution,
                cutoff: float = DEFAULT_CUTOFF) -> tuple[float, GaussianGrads]:
    """Mean squared voxelwise gap between the clamped Gaussian density and ``p``."""
    dims = p.dims
    V = float(np.prod(dims))
    if g.count == 0:
        return float(np.mean(p.values ** 2)), GaussianGrads.zeros_like(g)
    dens = DensityRender(g, dims, p.tau, cutoff)
    diff = dens.value - p.values
    grads = dens.backward(2.0 * diff / V)
    return float(np.sum(diff * diff) / V), grads
