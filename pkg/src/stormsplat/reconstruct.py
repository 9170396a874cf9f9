"""Bidirectional reconstruction of a radar sequence into one tracked Gaussian set.

A backward, position-only pass carries Gaussians from the last frame to the
first; the forward pass then starts from a mix of those and fresh samples and
fits every frame in turn, recording each frame as a raw-space delta to frame 0.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .constraints import (
    FlowConfig,
    FlowGrid,
    TargetDistribution,
    density_target,
    global_loss,
    local_loss,
    pseudo3d_flow,
)
from .gaussians import GaussianGroup, GaussianSequence, inverse_softplus
from .metrics import psnr, ssim_2d_grad
from .renderer import DEFAULT_CUTOFF, GaussianGrads, RenderContext, axis_slice, volume_slice
from .volume import RadarVolume, VolumeSequence, voxel_centers

log = logging.getLogger(__name__)

BLOCKS = ("positions", "features", "scales", "quats")


class NullVolumeWarning(UserWarning):
    """Initialisation found no non-null voxel and fell back to uniform sampling."""


@dataclass
class ReconConfig:
    n_gaussians: int = 49152
    nonnull_fraction: float = 0.10
    null_threshold: float = 0.0
    jitter: float = 0.5
    init_scale: float = 1.0
    iters_backward: int = 5000
    iters_forward_position: int = 5000
    iters_forward_full: int = 5000
    lr_start: float = 0.002
    lr_end: float = 0.0002
    # per-block multipliers; positions also scale with the grid extent, features with the data range
    lr_position: float = 1.0
    lr_feature: float = 1.0
    lr_scale: float = 2.5
    lr_quat: float = 0.5
    lambda_rec: float = 1.0
    lambda_ssim: float = 0.2
    lambda_local: float = 0.03
    lambda_global: float = 0.01
    slices_per_axis: int = 8
    sigma_k: float = 2.0
    tau_fraction: float = 0.8
    forward_mix: float = 0.5
    # extra share of the forward budgets spent on frame 0 before the even per-frame split
    warmup_share: float = 0.0
    skip_backward: bool = False
    flow_levels: int = 3
    flow_alpha: float = 10.0
    flow_iterations: int = 100
    flow_warps: int = 2
    flow_slice_step: int = 4
    flow_trilinear: bool = False
    render_cutoff: float = DEFAULT_CUTOFF
    log_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        for name in ("nonnull_fraction", "forward_mix"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {val}")
        for name in ("iters_backward", "iters_forward_position", "iters_forward_full", "slices_per_axis"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.warmup_share < 1:
            raise ValueError(f"warmup_share must lie in [0, 1), got {self.warmup_share}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("learning rates need lr_start >= lr_end > 0")
        if not self.sigma_k > 0 or not 0 < self.tau_fraction:
            raise ValueError("sigma_k and tau_fraction must be positive")
        if self.jitter < 0 or not self.init_scale > 0 or not self.render_cutoff > 0:
            raise ValueError("jitter must be >= 0; init_scale and render_cutoff > 0")

    @classmethod
    def desk(cls, **overrides) -> "ReconConfig":
        """Laptop-scale preset (a few thousand Gaussians, short budgets)."""
        base = dict(n_gaussians=4096, iters_backward=700, iters_forward_position=800,
                    iters_forward_full=2400, render_cutoff=4.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown reconstruction config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(self.flow_levels, self.flow_alpha, self.flow_iterations, self.flow_warps,
                          self.flow_slice_step)


# ------------------------------------------------------------------ Adam


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    incidents: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)

    def to_arrays(self, prefix: str) -> dict:
        out = {}
        for k in self.m:
            out[f"{prefix}m_{k}"] = self.m[k]
            out[f"{prefix}v_{k}"] = self.v[k]
            out[f"{prefix}n_{k}"] = np.array(self.steps[k])
        return out

    @classmethod
    def from_arrays(cls, arrays, prefix: str) -> "OptimizerState":
        s = cls()
        for key in arrays:
            if key.startswith(prefix + "m_"):
                k = key[len(prefix) + 2:]
                s.m[k] = np.array(arrays[key])
                s.v[k] = np.array(arrays[f"{prefix}v_{k}"])
                s.steps[k] = int(arrays[f"{prefix}n_{k}"])
        return s


def adam_step(params: dict, grads: dict, state: OptimizerState, lr) -> dict:
    """One bias-corrected Adam update per block; ``lr`` is a float or a per-block dict.

    A block whose gradient is not finite is left untouched and the incident recorded.
    """
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        p = np.asarray(p, float)
        g = np.asarray(g, float)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        rate = lr[k] if isinstance(lr, dict) else lr
        if not np.all(np.asarray(rate) > 0):
            raise ValueError("learning rate must be positive")
        if not np.all(np.isfinite(g)):
            state.incidents.append({"block": k, "step": state.steps.get(k, 0)})
            log.warning("skipping Adam step for %s: non-finite gradient", k)
            out[k] = p
            continue
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        n = state.steps.get(k, 0) + 1
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** n)
        vhat = v / (1 - state.beta2 ** n)
        out[k] = p - rate * mhat / (np.sqrt(vhat) + state.eps)
        state.m[k], state.v[k], state.steps[k] = m, v, n
    return out


def exp_lr(i: int, n: int, start: float, end: float) -> float:
    if n <= 1:
        return start
    return start * (end / start) ** (i / (n - 1))


# ------------------------------------------------------------------ init


def _inverse_features(values: np.ndarray, nonneg: np.ndarray) -> np.ndarray:
    out = np.array(values, float)
    out[:, nonneg] = inverse_softplus(np.maximum(out[:, nonneg], 0.0))
    return out


def _nonneg_flags(v: RadarVolume) -> np.ndarray:
    return np.array([c.nonneg for c in v.channels], bool)


def _sample_fresh(v: RadarVolume, budget: int, cfg: ReconConfig, rng: np.random.Generator):
    flat = v.data.reshape(-1, v.n_channels)
    primary = flat[:, 0]
    nonnull = np.flatnonzero(primary > cfg.null_threshold)
    null = np.flatnonzero(primary <= cfg.null_threshold)
    if nonnull.size == 0:
        warnings.warn("volume has no non-null voxel; sampling Gaussians uniformly", NullVolumeWarning,
                      stacklevel=3)
    n_nn = min(int(math.floor(cfg.nonnull_fraction * nonnull.size)), budget)
    chosen = rng.choice(nonnull, n_nn, replace=False) if n_nn else np.zeros(0, np.int64)
    rest = budget - n_nn
    pool = null if null.size else np.arange(primary.size)
    filler = rng.choice(pool, rest, replace=rest > pool.size) if rest else np.zeros(0, np.int64)
    return np.concatenate([chosen, filler]).astype(np.int64)


def _voxel_lookup(v: RadarVolume, positions: np.ndarray) -> np.ndarray:
    D, H, W = v.dims
    iw = np.clip(np.floor(positions[:, 0]).astype(np.int64), 0, W - 1)
    ih = np.clip(np.floor(positions[:, 1]).astype(np.int64), 0, H - 1)
    idd = np.clip(np.floor(positions[:, 2]).astype(np.int64), 0, D - 1)
    return v.data[idd, ih, iw].astype(float)


def init_gaussians(v: RadarVolume, cfg: ReconConfig, extra_sources: GaussianGroup | None = None,
                   rng: np.random.Generator | None = None) -> GaussianGroup:
    """Seed M Gaussians on ``v``; with ``extra_sources`` a ``forward_mix`` share is drawn from it."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    M = cfg.n_gaussians
    nonneg = _nonneg_flags(v)
    pos_parts, feat_parts = [], []
    n_extra = 0
    if extra_sources is not None and extra_sources.count:
        n_extra = min(int(round(cfg.forward_mix * M)), M)
        pick = rng.choice(extra_sources.count, n_extra, replace=n_extra > extra_sources.count)
        p = extra_sources.positions[np.sort(pick)]
        pos_parts.append(p)
        feat_parts.append(_inverse_features(_voxel_lookup(v, p), nonneg))
    idx = _sample_fresh(v, M - n_extra, cfg, rng)
    centers = voxel_centers(v.dims).reshape(-1, 3)[idx]
    pos_parts.append(centers + rng.uniform(-cfg.jitter, cfg.jitter, centers.shape))
    feat_parts.append(_inverse_features(v.data.reshape(-1, v.n_channels)[idx], nonneg))
    positions = np.concatenate(pos_parts)
    quats = np.zeros((M, 4))
    quats[:, 0] = 1.0
    return GaussianGroup(positions, np.concatenate(feat_parts),
                         np.full((M, 3), math.log(cfg.init_scale)), quats, nonneg)


# ------------------------------------------------------------------ losses


def sample_planes(dims, per_axis: int, rng: np.random.Generator):
    """``per_axis`` distinct random slices along each of z, y, x (all of them if fewer)."""
    out = []
    for axis, n in zip(("z", "y", "x"), dims):
        k = min(per_axis, n)
        out.extend((axis, int(i)) for i in np.sort(rng.choice(n, k, replace=False)))
    return out


def reconstruction_loss(g: GaussianGroup, v: RadarVolume, sampled_planes, lambda_ssim: float = 0.2,
                        data_scale=None, cutoff: float = DEFAULT_CUTOFF) -> tuple[float, GaussianGrads]:
    """Mean over planes of L1 + lambda_ssim (1 - SSIM) between rendered and true slices.

    Residuals are divided by ``data_scale`` (per channel; 1 by default) before scoring.
    """
    sampled_planes = list(sampled_planes)
    if not sampled_planes:
        return 0.0, GaussianGrads.zeros_like(g)
    N = v.n_channels
    scale = np.ones(N) if data_scale is None else np.broadcast_to(np.asarray(data_scale, float), (N,))
    planes = [axis_slice(a, k, v.dims) for a, k in sampled_planes]
    ctx = RenderContext(g, planes, cutoff)
    images = ctx.forward()
    P = len(planes)
    total = 0.0
    upstreams = []
    for (axis, k), img in zip(sampled_planes, images):
        truth = volume_slice(v.data, axis, k).astype(float)
        x = img / scale
        y = truth / scale
        r = x - y
        n = r.size
        total += np.abs(r).sum() / n
        up = np.sign(r) / n
        if lambda_ssim:
            for c in range(N):
                s, ds = ssim_2d_grad(x[..., c], y[..., c], 1.0)
                total += lambda_ssim * (1.0 - s) / N
                up[..., c] -= lambda_ssim * ds / N
        upstreams.append(up / scale / P)
    return total / P, ctx.backward(upstreams)


def frame_data_scale(seq: VolumeSequence) -> np.ndarray:
    peak = np.max([np.abs(f.data).reshape(-1, f.n_channels).max(axis=0) for f in seq.frames], axis=0)
    return np.where(peak > 0, peak, 1.0)


# ------------------------------------------------------------------ flows


@dataclass
class FlowSet:
    """``forward[k]``: flow k -> k+1; ``backward[k]``: flow k+1 -> k."""

    forward: list
    backward: list


def compute_flows(seq: VolumeSequence, cfg: ReconConfig) -> FlowSet:
    fc = cfg.flow_config()
    fwd, bwd = [], []
    for k in range(len(seq) - 1):
        fwd.append(pseudo3d_flow(seq[k], seq[k + 1], fc))
        bwd.append(pseudo3d_flow(seq[k + 1], seq[k], fc))
    return FlowSet(fwd, bwd)


# ------------------------------------------------------------------ optimisation core


class _Run:
    """Shared state of one reconstruction: rng, targets, logger, counters."""

    def __init__(self, seq: VolumeSequence, cfg: ReconConfig, logger: Callable | None, rng):
        self.seq = seq
        self.cfg = cfg
        self.logger = logger
        self.rng = rng
        self.scale = frame_data_scale(seq)
        self._targets: dict[int, TargetDistribution] = {}
        self.incidents: list = []
        ext = max(seq.dims)
        self.lr_mult = {
            "positions": cfg.lr_position * ext,
            "features": cfg.lr_feature * self.scale[None, :],
            "scales": cfg.lr_scale,
            "quats": cfg.lr_quat,
        }

    def target(self, t: int) -> TargetDistribution:
        if t not in self._targets:
            self._targets[t] = density_target(self.seq[t], self.cfg.n_gaussians, self.cfg.sigma_k,
                                              self.cfg.init_scale, self.cfg.tau_fraction,
                                              self.cfg.null_threshold)
        return self._targets[t]

    def probe_psnr(self, g: GaussianGroup, t: int) -> float:
        """PSNR on the three central axis slices; cheap enough to log."""
        v = self.seq[t]
        D, H, W = v.dims
        probes = (("x", W // 2), ("y", H // 2), ("z", D // 2))
        images = RenderContext(g, [axis_slice(a, k, v.dims) for a, k in probes], self.cfg.render_cutoff).forward()
        truth = [volume_slice(v.data, a, k) for a, k in probes]
        rng = float(v.data.max() - v.data.min()) or 1.0
        return psnr(np.concatenate([i.ravel() for i in images]), np.concatenate([x.ravel() for x in truth]), rng)

    def objective(self, g: GaussianGroup, t: int, prev_positions, flow: FlowGrid | None, with_rec: bool):
        cfg = self.cfg
        grads = GaussianGrads.zeros_like(g)
        terms = {}
        total = 0.0
        if cfg.lambda_local and flow is not None:
            val, dpos = local_loss(prev_positions, g.positions, flow, cfg.flow_trilinear)
            grads.positions += cfg.lambda_local * dpos
            terms["local"] = val
            total += cfg.lambda_local * val
        if cfg.lambda_global:
            val, gg = global_loss(g, self.target(t), cfg.render_cutoff)
            # the priors shape where Gaussians sit; scale and rotation answer to the data term only
            grads.positions += cfg.lambda_global * gg.positions
            terms["global"] = val
            total += cfg.lambda_global * val
        if with_rec and cfg.lambda_rec:
            planes = sample_planes(self.seq.dims, cfg.slices_per_axis, self.rng)
            val, gg = reconstruction_loss(g, self.seq[t], planes, cfg.lambda_ssim, self.scale, cfg.render_cutoff)
            grads += gg.scaled(cfg.lambda_rec)
            terms["rec"] = val
            total += cfg.lambda_rec * val
        return total, terms, grads

    def optimise(self, g: GaussianGroup, t: int, blocks, n_iter: int, state: OptimizerState,
                 prev_positions, flow, with_rec: bool, stage: str, lr_offset: int = 0, lr_span: int | None = None):
        cfg = self.cfg
        span = n_iter if lr_span is None else lr_span
        for i in range(n_iter):
            total, terms, grads = self.objective(g, t, prev_positions, flow, with_rec)
            base = exp_lr(lr_offset + i, span, cfg.lr_start, cfg.lr_end)
            lrs = {k: base * self.lr_mult[k] for k in blocks}
            params = {k: getattr(g, k) for k in blocks}
            new = adam_step(params, {k: getattr(grads, k) for k in blocks}, state, lrs)
            g = _with(g, new)
            if self.logger and cfg.log_every and (i % cfg.log_every == 0 or i == n_iter - 1):
                self.logger({"stage": stage, "frame": t, "iter": i, "lr": base, "loss": total, **terms,
                             "psnr": self.probe_psnr(g, t)})
        for inc in state.incidents:
            self.incidents.append({"stage": stage, "frame": t, **inc})
        state.incidents.clear()
        return g


def _with(g: GaussianGroup, new: dict) -> GaussianGroup:
    parts = {k: new.get(k, getattr(g, k)) for k in BLOCKS}
    return GaussianGroup(parts["positions"], parts["features"], parts["scales"], parts["quats"], g.nonneg)


def _split(total: int, parts: int) -> list[int]:
    """Even integer split with the remainder given to the earliest parts."""
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def _forward_split(total: int, frames: int, warmup_share: float) -> list[int]:
    """Per-frame forward budget: frame 0 first takes ``warmup_share`` of the total."""
    head = int(round(warmup_share * total))
    out = _split(total - head, frames)
    out[0] += head
    return out


# ------------------------------------------------------------------ passes


def backward_pass(seq: VolumeSequence, flows: FlowSet | list, cfg: ReconConfig, logger=None,
                  rng: np.random.Generator | None = None, _run: _Run | None = None) -> GaussianGroup:
    """Position-only pass from the last frame back to frame 0; features stay frozen."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    run = _run or _Run(seq, cfg, logger, rng)
    T = len(seq)
    g = init_gaussians(seq[T - 1], cfg, rng=run.rng)
    if T == 1:
        return g
    bflows = flows.backward if isinstance(flows, FlowSet) else list(flows)
    state = OptimizerState()
    for t, n_iter in zip(range(T - 1, 0, -1), _split(cfg.iters_backward, T - 1)):
        prev = g.positions.copy()
        g = run.optimise(g, t - 1, ("positions",), n_iter, state, prev, bflows[t - 1], False, "backward")
    return g


def forward_pass(seq: VolumeSequence, flows: FlowSet | list, g0: GaussianGroup, cfg: ReconConfig, logger=None,
                 rng: np.random.Generator | None = None, _run: _Run | None = None,
                 _resume: dict | None = None, _on_frame: Callable | None = None) -> GaussianSequence:
    """Fit frames 0..T-1 in order, each warm-started from the previous result."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    run = _run or _Run(seq, cfg, logger, rng)
    T = len(seq)
    fflows = flows.forward if isinstance(flows, FlowSet) else list(flows)
    pos_iters = _forward_split(cfg.iters_forward_position, T, cfg.warmup_share)
    full_iters = _forward_split(cfg.iters_forward_full, T, cfg.warmup_share)
    if _resume:
        groups = _resume["groups"]
        s_pos, s_full = _resume["state_pos"], _resume["state_full"]
        start = len(groups)
        g = groups[-1]
    else:
        groups = []
        s_pos, s_full = OptimizerState(), OptimizerState()
        start = 0
        g = g0
    for t in range(start, T):
        prev = g.positions.copy()
        flow = fflows[t - 1] if t > 0 else None
        span = pos_iters[t] + full_iters[t]
        g = run.optimise(g, t, ("positions",), pos_iters[t], s_pos, prev, flow, False, "forward_position",
                         0, span)
        g = run.optimise(g, t, BLOCKS, full_iters[t], s_full, prev, flow, True, "forward_full",
                         pos_iters[t], span)
        groups.append(g)
        if _on_frame:
            _on_frame(groups, s_pos, s_full)
    return GaussianSequence.from_groups(groups, seq.dims, tuple(c.name for c in seq[0].channels))


# ------------------------------------------------------------------ pipeline


@dataclass
class ReconResult:
    sequence: GaussianSequence
    backward_group: GaussianGroup | None
    incidents: list


def _save_checkpoint(path: Path, stage: str, rng, back: GaussianGroup | None, groups, s_pos, s_full):
    arrays = {}
    if back is not None:
        arrays["back"] = back.to_matrix()
    for k, g in enumerate(groups):
        arrays[f"group_{k}"] = g.to_matrix()
    if s_pos is not None:
        arrays.update(s_pos.to_arrays("pos_"))
        arrays.update(s_full.to_arrays("full_"))
    meta = {"stage": stage, "frames_done": len(groups), "rng": rng.bit_generator.state}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_checkpoint(path: Path, n_features: int, nonneg):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    back = GaussianGroup.from_matrix(arrays["back"], n_features, nonneg) if "back" in arrays else None
    groups = [GaussianGroup.from_matrix(arrays[f"group_{k}"], n_features, nonneg) for k in range(meta["frames_done"])]
    return meta, back, groups, OptimizerState.from_arrays(arrays, "pos_"), OptimizerState.from_arrays(arrays, "full_")


def reconstruct(seq: VolumeSequence, cfg: ReconConfig, flows: FlowSet | None = None, logger=None,
                checkpoint: str | Path | None = None, resume: bool = False) -> ReconResult:
    """Full bidirectional reconstruction. Checkpoints are written at frame boundaries."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if flows is None:
        flows = compute_flows(seq, cfg)
    run = _Run(seq, cfg, logger, rng)
    nonneg = _nonneg_flags(seq[0])
    N = seq[0].n_channels
    ckpt = Path(checkpoint) if checkpoint else None
    back = None
    resume_state = None
    if resume and ckpt is not None and ckpt.exists():
        meta, back, groups, s_pos, s_full = _load_checkpoint(ckpt, N, nonneg)
        rng.bit_generator.state = meta["rng"]
        if groups:
            resume_state = {"groups": groups, "state_pos": s_pos, "state_full": s_full}
        if logger:
            logger({"stage": "resume", "frames_done": len(groups)})
    since = [0]

    def on_frame(groups, s_pos, s_full):
        t = len(groups) - 1
        since[0] += (_forward_split(cfg.iters_forward_position, len(seq), cfg.warmup_share)[t]
                     + _forward_split(cfg.iters_forward_full, len(seq), cfg.warmup_share)[t])
        if ckpt is not None and cfg.checkpoint_every and since[0] >= cfg.checkpoint_every:
            _save_checkpoint(ckpt, "forward", rng, back, groups, s_pos, s_full)
            since[0] = 0

    if resume_state is None:
        if back is None and not cfg.skip_backward and len(seq) > 1:
            back = backward_pass(seq, flows, cfg, rng=rng, _run=run)
            if ckpt is not None and cfg.checkpoint_every:
                _save_checkpoint(ckpt, "backward", rng, back, [], None, None)
        g0 = init_gaussians(seq[0], cfg, extra_sources=back, rng=rng)
    else:
        g0 = resume_state["groups"][0]
    result = forward_pass(seq, flows, g0, cfg, rng=rng, _run=run, _resume=resume_state, _on_frame=on_frame)
    return ReconResult(result, back, run.incidents)


def rendered_sequence(gseq: GaussianSequence, dims=None, cutoff: float = DEFAULT_CUTOFF, channels=None):
    """Render every frame of ``gseq`` back onto its voxel grid as RadarVolumes."""
    from .renderer import render_volume
    from .volume import DEFAULT_CHANNELS

    dims = tuple(dims or gseq.dims)
    chans = channels or DEFAULT_CHANNELS
    out = []
    for t, g in enumerate(gseq.frames()):
        data = render_volume(g, dims, cutoff)
        nonneg = np.array([c.nonneg for c in chans], bool)
        data[..., nonneg] = np.maximum(data[..., nonneg], 0.0)
        out.append(RadarVolume(data.astype(np.float32), timestamp=t, channels=tuple(chans)))
    return out
