"""Gaussian groups: raw parameter storage, activations, covariance, Morton order, ``.gseq`` I/O.

All parameters are kept in raw (pre-activation) form:

* ``positions`` (M, 3) in voxel units, (x, y, z) order
* ``features`` (M, N); softplus for channels flagged non-negative, identity otherwise
* ``scales`` (M, 3); effective scale is ``exp(scales)``
* ``quats`` (M, 4) as (w, x, y, z); normalized lazily wherever a rotation is needed
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import FormatError

GSEQ_MAGIC = b"GSEQ0001"
_GSEQ_HEADER = struct.Struct("<8s3I")
FIELDS = ("positions", "features", "scales", "quats")
DEFAULT_MORTON_BITS = 10


class DegenerateRotationError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y, floor: float = 1e-4):
    y = np.maximum(np.asarray(y, float), floor)
    # log(expm1(y)) overflows for large y; there softplus is the identity to fp precision
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _as2d(a, cols, name):
    a = np.array(a, dtype=np.float64)
    if a.ndim == 1 and cols is not None and a.size == cols:
        a = a[None]
    if a.ndim != 2 or (cols is not None and a.shape[1] != cols):
        raise ValueError(f"{name} must have shape (M, {cols}), got {a.shape}")
    return a


@dataclass(eq=False)
class GaussianGroup:
    positions: np.ndarray
    features: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    nonneg: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = _as2d(self.positions, 3, "positions")
        self.features = _as2d(self.features, None, "features")
        self.scales = _as2d(self.scales, 3, "scales")
        self.quats = _as2d(self.quats, 4, "quats")
        M = self.positions.shape[0]
        for name in FIELDS[1:]:
            if getattr(self, name).shape[0] != M:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {M}")
        if self.nonneg is None:
            self.nonneg = np.zeros(self.features.shape[1], bool)
            if self.features.shape[1]:
                self.nonneg[0] = True
        self.nonneg = np.asarray(self.nonneg, bool).reshape(-1)
        if self.nonneg.size != self.features.shape[1]:
            raise ValueError("one activation flag per feature channel required")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self) -> int:
        return self.count

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def param_dim(self) -> int:
        return 3 + self.n_features + 3 + 4

    def check_finite(self) -> None:
        for name in FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    def activated_features(self) -> np.ndarray:
        return np.where(self.nonneg, softplus(self.features), self.features)

    def feature_activation_grad(self) -> np.ndarray:
        """d(activated)/d(raw), elementwise."""
        return np.where(self.nonneg, sigmoid(self.features), 1.0)

    def effective_scales(self) -> np.ndarray:
        return np.exp(self.scales)

    def normalized_quats(self) -> np.ndarray:
        return normalize_quats(self.quats)

    def covariances(self) -> np.ndarray:
        return covariance(self.scales, self.quats)

    def copy(self) -> "GaussianGroup":
        return GaussianGroup(
            self.positions.copy(), self.features.copy(), self.scales.copy(),
            self.quats.copy(), self.nonneg.copy(),
        )

    def subset(self, index) -> "GaussianGroup":
        return GaussianGroup(
            self.positions[index], self.features[index], self.scales[index],
            self.quats[index], self.nonneg.copy(),
        )

    def to_matrix(self) -> np.ndarray:
        """Raw parameters flattened to (M, P) in positions|features|scales|quats order."""
        return np.concatenate([self.positions, self.features, self.scales, self.quats], axis=1)

    @classmethod
    def from_matrix(cls, mat: np.ndarray, n_features: int, nonneg=None) -> "GaussianGroup":
        mat = np.asarray(mat, float)
        n = n_features
        return cls(mat[:, :3], mat[:, 3:3 + n], mat[:, 3 + n:6 + n], mat[:, 6 + n:10 + n], nonneg)

    def allclose(self, other: "GaussianGroup", atol: float = 0.0) -> bool:
        return all(
            np.allclose(getattr(self, k), getattr(other, k), rtol=0.0, atol=atol) for k in FIELDS
        )

    @classmethod
    def concat(cls, groups) -> "GaussianGroup":
        groups = list(groups)
        return cls(
            *(np.concatenate([getattr(g, k) for g in groups]) for k in FIELDS),
            nonneg=groups[0].nonneg.copy(),
        )


@dataclass(eq=False)
class DiffGaussians:
    """Per-Gaussian raw-parameter deltas relative to the anchor group."""

    positions: np.ndarray
    features: np.ndarray
    scales: np.ndarray
    quats: np.ndarray

    @classmethod
    def zeros_like(cls, g: GaussianGroup) -> "DiffGaussians":
        return cls(*(np.zeros_like(getattr(g, k)) for k in FIELDS))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def to_matrix(self) -> np.ndarray:
        return np.concatenate([self.positions, self.features, self.scales, self.quats], axis=1)

    @classmethod
    def from_matrix(cls, mat: np.ndarray, n_features: int) -> "DiffGaussians":
        n = n_features
        return cls(mat[:, :3].copy(), mat[:, 3:3 + n].copy(), mat[:, 3 + n:6 + n].copy(),
                   mat[:, 6 + n:10 + n].copy())


def normalize_quats(q) -> np.ndarray:
    q = np.asarray(q, float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    return q / norm


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for quaternions (w, x, y, z); input is normalized first."""
    q = normalize_quats(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, dR) -> np.ndarray:
    """Back-propagate dL/dR (..., 3, 3) to the raw, unnormalized quaternion."""
    q = np.asarray(q, float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial component of the normalization
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def covariance(s_raw, q) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(s_raw)); works on single or batched inputs."""
    s_raw = np.asarray(s_raw, float)
    q = np.asarray(q, float)
    if not (np.all(np.isfinite(s_raw)) and np.all(np.isfinite(q))):
        raise ValueError("covariance inputs must be finite")
    R = quat_to_rotmat(q)
    RS = R * np.exp(s_raw)[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


def inverse_covariance(s_raw, q) -> np.ndarray:
    R = quat_to_rotmat(q)
    RS = R * np.exp(-s_raw)[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


# ---------------------------------------------------------------- Morton order


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_encode(ix, iy, iz) -> np.ndarray:
    """Interleave quantized coordinates: x -> bit 3i, y -> bit 3i+1, z -> bit 3i+2."""
    return (
        _spread_bits(np.asarray(ix))
        | (_spread_bits(np.asarray(iy)) << np.uint64(1))
        | (_spread_bits(np.asarray(iz)) << np.uint64(2))
    )


def quantize_positions(positions: np.ndarray, bits: int) -> np.ndarray:
    """Min-max normalize the group's bounding box onto [0, 2**bits - 1] per axis."""
    positions = np.asarray(positions, float)
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    top = (1 << bits) - 1
    safe = np.where(span > 0, span, 1.0)
    q = np.floor((positions - lo) / safe * top + 0.5)
    q[:, span <= 0] = 0
    return np.clip(q, 0, top).astype(np.uint64)


def morton_codes(g: GaussianGroup, bits_per_axis: int = DEFAULT_MORTON_BITS) -> np.ndarray:
    if not 1 <= bits_per_axis <= 21:
        raise ValueError("bits_per_axis must be in [1, 21]")
    if not np.all(np.isfinite(g.positions)):
        raise ValueError("positions must be finite")
    if g.count == 0:
        return np.zeros(0, np.uint64)
    q = quantize_positions(g.positions, bits_per_axis)
    return morton_encode(q[:, 0], q[:, 1], q[:, 2])


def morton_sort(g: GaussianGroup, bits_per_axis: int = DEFAULT_MORTON_BITS) -> np.ndarray:
    """Permutation ordering ``g`` along the Z-order curve, ties kept in index order."""
    return np.argsort(morton_codes(g, bits_per_axis), kind="stable")


# ------------------------------------------------------------ delta algebra


def compose(g0: GaussianGroup, d: DiffGaussians) -> GaussianGroup:
    """Raw-parameter addition. Quaternions stay raw; every rotation use normalizes them."""
    if d.count != g0.count or d.features.shape != g0.features.shape:
        raise ValueError(f"cardinality mismatch: anchor has {g0.count}, delta has {d.count}")
    return GaussianGroup(
        g0.positions + d.positions, g0.features + d.features,
        g0.scales + d.scales, g0.quats + d.quats, g0.nonneg.copy(),
    )


def decompose(g: GaussianGroup, g0: GaussianGroup) -> DiffGaussians:
    if g.count != g0.count or g.features.shape != g0.features.shape:
        raise ValueError(f"cardinality mismatch: group has {g.count}, anchor has {g0.count}")
    return DiffGaussians(*(getattr(g, k) - getattr(g0, k) for k in FIELDS))


# ------------------------------------------------------------- sequences


@dataclass(eq=False)
class GaussianSequence:
    anchor: GaussianGroup
    deltas: list[DiffGaussians] = field(default_factory=list)
    dims: tuple[int, int, int] | None = None
    channel_names: tuple[str, ...] = ()

    def __post_init__(self):
        for k, d in enumerate(self.deltas):
            if d.count != self.anchor.count or d.features.shape[1] != self.anchor.n_features:
                raise ValueError(f"delta {k + 1} has cardinality {d.count}, anchor has {self.anchor.count}")

    def __len__(self) -> int:
        return 1 + len(self.deltas)

    def frame(self, t: int) -> GaussianGroup:
        if t == 0:
            return self.anchor.copy()
        return compose(self.anchor, self.deltas[t - 1])

    def frames(self) -> list[GaussianGroup]:
        return [self.frame(t) for t in range(len(self))]

    def delta(self, t: int) -> DiffGaussians:
        return DiffGaussians.zeros_like(self.anchor) if t == 0 else self.deltas[t - 1]

    @classmethod
    def from_groups(cls, groups, dims=None, channel_names=()) -> "GaussianSequence":
        groups = list(groups)
        g0 = groups[0]
        return cls(g0.copy(), [decompose(g, g0) for g in groups[1:]], dims, tuple(channel_names))


def _block_bytes(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def write_gseq(seq: GaussianSequence, path) -> None:
    path = Path(path)
    g0 = seq.anchor
    M, N, T = g0.count, g0.n_features, len(seq)
    parts = [_GSEQ_HEADER.pack(GSEQ_MAGIC, M, N, T), _block_bytes(getattr(g0, k) for k in FIELDS)]
    parts += [_block_bytes(getattr(d, k) for k in FIELDS) for d in seq.deltas]
    path.write_bytes(b"".join(parts))
    meta = {
        "dims": list(seq.dims) if seq.dims is not None else None,
        "channel_names": list(seq.channel_names),
        "nonneg": [bool(b) for b in g0.nonneg],
    }
    path.with_name(path.stem + ".meta.json").write_text(json.dumps(meta, indent=2))


def read_gseq(path) -> GaussianSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _GSEQ_HEADER.size:
        raise FormatError(f"{path}: header truncated, expected {_GSEQ_HEADER.size} bytes, got {len(raw)}")
    magic, M, N, T = _GSEQ_HEADER.unpack_from(raw)
    if magic[:4] != GSEQ_MAGIC[:4]:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if magic != GSEQ_MAGIC:
        raise FormatError(f"{path}: version mismatch, file is {magic!r}, reader supports {GSEQ_MAGIC!r}")
    if T < 1:
        raise FormatError(f"{path}: frame count T must be >= 1")
    block = M * (3 + N + 3 + 4)
    expected = _GSEQ_HEADER.size + 4 * block * T
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated, expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(
            f"{path}: cardinality inconsistency, header M={M} N={N} T={T} implies {expected} bytes, got {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=_GSEQ_HEADER.size).astype(np.float64)
    widths = (3, N, 3, 4)

    def split(b):
        chunk = flat[b * block:(b + 1) * block]
        out, off = [], 0
        for w in widths:
            out.append(chunk[off:off + M * w].reshape(M, w).copy())
            off += M * w
        return out

    meta_path = path.with_name(path.stem + ".meta.json")
    dims, names, nonneg = None, (), None
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        dims = tuple(meta["dims"]) if meta.get("dims") else None
        names = tuple(meta.get("channel_names", ()))
        nonneg = meta.get("nonneg")
    anchor = GaussianGroup(*split(0), nonneg=nonneg)
    deltas = [DiffGaussians(*split(b)) for b in range(1, T)]
    return GaussianSequence(anchor, deltas, dims, names)
