"""Radar volumes, the ``.rvol`` file format, and a synthetic storm generator.

Coordinates: a volume array is indexed ``[d, h, w, c]``. Continuous positions are
``(x, y, z)`` in voxel units with ``x`` along ``w``, ``y`` along ``h`` and ``z``
along ``d``; the center of voxel ``(d, h, w)`` sits at ``(w + .5, h + .5, d + .5)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RVOL_MAGIC = b"RVOL0001"
_HEADER = struct.Struct("<8s4I3f")
_MAX_VOXELS = 1 << 34


class FormatError(ValueError):
    """Raised when a persisted file does not match its declared layout."""


@dataclass(frozen=True)
class Channel:
    name: str = "reflectivity"
    unit: str = "dBZ"
    nonneg: bool = True


DEFAULT_CHANNELS = (Channel(),)


@dataclass(frozen=True, eq=False)
class RadarVolume:
    """One timestamped multi-channel frame on a regular voxel grid."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    timestamp: int = 0
    channels: tuple[Channel, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or data.size == 0:
            raise ValueError(f"volume data must be a non-empty (D, H, W, C) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        channels = tuple(self.channels)
        if len(channels) != data.shape[3]:
            if len(channels) == 1:
                channels = channels + tuple(
                    Channel(f"channel{i}", "", False) for i in range(1, data.shape[3])
                )
            else:
                raise ValueError(f"{len(channels)} channel descriptors for {data.shape[3]} channels")
        for c, ch in enumerate(channels):
            if ch.nonneg and np.any(data[..., c] < 0):
                raise ValueError(f"channel {ch.name!r} is declared non-negative but has negative values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    @property
    def primary(self) -> np.ndarray:
        return self.data[..., 0]

    def __eq__(self, other):
        if not isinstance(other, RadarVolume):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.spacing == other.spacing
            and self.timestamp == other.timestamp
            and self.channels == other.channels
        )

    __hash__ = None


@dataclass(frozen=True)
class VolumeSequence:
    frames: tuple[RadarVolume, ...]
    frame_interval: float = 6.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        first = frames[0]
        for k, f in enumerate(frames[1:], start=1):
            if f.data.shape != first.data.shape or f.spacing != first.spacing:
                raise ValueError(f"frame {k} has dims {f.data.shape}, expected {first.data.shape}")
            if f.timestamp != frames[k - 1].timestamp + 1:
                raise ValueError("timestamps must increase by exactly 1")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> RadarVolume:
        return self.frames[i]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.frames[0].dims


def null_mask(volume: RadarVolume, threshold: float = 0.0) -> np.ndarray:
    """Voxels whose primary channel is at or below ``threshold``."""
    return volume.primary <= threshold


# --------------------------------------------------------------------------- I/O


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def write_volume(volume: RadarVolume, path, frame_interval: float | None = None) -> None:
    """Write ``volume`` as ``.rvol`` plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    D, H, W, C = volume.data.shape
    header = _HEADER.pack(RVOL_MAGIC, D, H, W, C, *volume.spacing)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    meta = {
        "timestamp": volume.timestamp,
        "channels": [{"name": c.name, "unit": c.unit, "nonneg": c.nonneg} for c in volume.channels],
    }
    if frame_interval is not None:
        meta["frame_interval_min"] = frame_interval
    _meta_path(path).write_text(json.dumps(meta, indent=2))


def read_volume(path) -> RadarVolume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated ({len(raw)} of {_HEADER.size} bytes)")
    magic, D, H, W, C, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RVOL_MAGIC!r}")
    for name, n in (("D", D), ("H", H), ("W", W), ("C", C)):
        if n == 0:
            raise FormatError(f"{path}: dimension {name} is zero")
    n_values = D * H * W * C
    if n_values > _MAX_VOXELS:
        raise FormatError(f"{path}: dimension overflow, D*H*W*C = {n_values} exceeds {_MAX_VOXELS}")
    expected = _HEADER.size + 4 * n_values
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {4 * n_values}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(D, H, W, C).astype(np.float32)
    timestamp, channels = 0, None
    meta = _meta_path(path)
    if meta.exists():
        info = json.loads(meta.read_text())
        timestamp = int(info.get("timestamp", 0))
        if "channels" in info:
            channels = tuple(Channel(**c) for c in info["channels"])
    if channels is None:
        channels = (Channel(),) + tuple(Channel(f"channel{i}", "", False) for i in range(1, C))
    return RadarVolume(data, (sx, sy, sz), timestamp, channels)


def write_sequence(seq: VolumeSequence, directory, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(seq.frames):
        p = directory / f"{prefix}_{k:04d}.rvol"
        write_volume(frame, p, seq.frame_interval)
        paths.append(p)
    return paths


def list_volumes(directory, prefix: str = "frame") -> list[Path]:
    return sorted(Path(directory).glob(f"{prefix}_*.rvol"))


def read_sequence(directory, prefix: str = "frame") -> VolumeSequence:
    paths = list_volumes(directory, prefix)
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.rvol files in {directory}")
    frames = [read_volume(p) for p in paths]
    interval = 6.0
    meta = _meta_path(paths[0])
    if meta.exists():
        interval = float(json.loads(meta.read_text()).get("frame_interval_min", interval))
    t0 = frames[0].timestamp
    frames = [
        f if f.timestamp == t0 + k else RadarVolume(f.data, f.spacing, t0 + k, f.channels)
        for k, f in enumerate(frames)
    ]
    return VolumeSequence(tuple(frames), interval)


# ------------------------------------------------------------------- synthesis


@dataclass
class Blob:
    center: tuple[float, float, float]
    sigma: tuple[float, float, float] = (3.0, 3.0, 2.0)
    amplitude: float = 50.0
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    growth: float = 0.0
    dissipation_frame: int | None = None

    def amplitude_at(self, t: int) -> float:
        if self.dissipation_frame is not None and t >= self.dissipation_frame:
            return 0.0
        return float(self.amplitude) * (1.0 + float(self.growth)) ** t

    def center_at(self, t: int) -> np.ndarray:
        return np.asarray(self.center, float) + t * np.asarray(self.velocity, float)


@dataclass
class SynthSpec:
    """Blob storm description; ``seed`` fixes the noise draw.

    ``growth`` is a per-frame relative rate, so amplitude(t) = amplitude * (1 + growth)**t.
    Voxels below ``floor`` are zeroed after noise, giving a true null region.
    """

    blobs: list[Blob] = field(default_factory=list)
    noise: float = 0.0
    floor: float = 0.0
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    frame_interval: float = 6.0
    channel_gains: tuple[float, ...] = (1.0,)
    channels: tuple[Channel, ...] = DEFAULT_CHANNELS

    def __post_init__(self):
        self.blobs = [b if isinstance(b, Blob) else Blob(**b) for b in self.blobs]
        for b in self.blobs:
            if b.amplitude < 0:
                raise ValueError("blob amplitudes must be non-negative")
            if not np.all(np.isfinite(b.velocity)):
                raise ValueError("blob velocities must be finite")
        self.channels = tuple(c if isinstance(c, Channel) else Channel(**c) for c in self.channels)
        if len(self.channel_gains) != len(self.channels):
            raise ValueError("one gain per channel required")

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        raw = json.loads(text)
        raw.pop("dims", None)
        for key in ("spacing", "channel_gains"):
            if key in raw:
                raw[key] = tuple(raw[key])
        if "channels" in raw:
            raw["channels"] = tuple(Channel(**c) for c in raw["channels"])
        return cls(**raw)


def voxel_centers(dims) -> np.ndarray:
    """(D, H, W, 3) array of voxel-center positions in (x, y, z) order."""
    D, H, W = dims
    z, y, x = np.meshgrid(
        np.arange(D) + 0.5, np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij"
    )
    return np.stack([x, y, z], axis=-1)


def blob_field(blob: Blob, t: int, centers: np.ndarray) -> np.ndarray:
    a = blob.amplitude_at(t)
    d = centers - blob.center_at(t)
    m = np.sum((d / np.asarray(blob.sigma, float)) ** 2, axis=-1)
    return a * np.exp(-0.5 * m)


def synth_sequence(spec: SynthSpec, frames: int, dims) -> tuple[VolumeSequence, list[np.ndarray]]:
    """Render ``frames`` frames of the blob storm on a ``dims`` = (D, H, W) grid.

    Returns the sequence and, for each consecutive pair, the (D, H, W, 3) true
    displacement field (voxels/frame). Where several blobs overlap, a voxel moves
    with the contribution-weighted mean of their velocities.
    """
    if not spec.blobs:
        raise ValueError("synthetic spec has no blobs")
    if frames < 2:
        raise ValueError("need at least 2 frames")
    dims = tuple(int(n) for n in dims)
    centers = voxel_centers(dims)
    rng = np.random.default_rng(spec.seed)
    gains = np.asarray(spec.channel_gains, float)
    vols, flows = [], []
    for t in range(frames):
        field_ = np.zeros(dims)
        for b in spec.blobs:
            field_ += blob_field(b, t, centers)
        data = field_[..., None] * gains
        if spec.noise > 0:
            data = data + rng.normal(0.0, spec.noise, size=data.shape)
        for c, ch in enumerate(spec.channels):
            if ch.nonneg:
                np.maximum(data[..., c], 0.0, out=data[..., c])
        if spec.floor > 0:
            data[np.abs(data) < spec.floor] = 0.0
        vols.append(RadarVolume(data.astype(np.float32), spec.spacing, t, spec.channels))
        if t < frames - 1:
            flows.append(_true_flow(spec.blobs, t, centers))
    return VolumeSequence(tuple(vols), spec.frame_interval), flows


def _true_flow(blobs, t, centers) -> np.ndarray:
    logw = []
    for b in blobs:
        a = b.amplitude_at(t)
        d = centers - b.center_at(t)
        m = np.sum((d / np.asarray(b.sigma, float)) ** 2, axis=-1)
        logw.append(np.log(a) - 0.5 * m if a > 0 else np.full(m.shape, -np.inf))
    logw = np.stack(logw)
    peak = logw.max(axis=0)
    alive = np.isfinite(peak)
    w = np.zeros_like(logw)
    w[:, alive] = np.exp(logw[:, alive] - peak[alive])
    w_sum = w.sum(axis=0)
    vel = np.stack([np.asarray(b.velocity, float) for b in blobs])
    flow = np.einsum("b...,bk->...k", w, vel)
    flow[alive] /= w_sum[alive][:, None]
    return flow
