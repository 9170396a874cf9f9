"""Volume verification scores: ME/MAE, PSNR, windowed SSIM and pooled CSI."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .volume import RadarVolume

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
CSI_THRESHOLDS = (20.0, 30.0, 40.0)
CSI_POOL = 4


def _values(v) -> np.ndarray:
    a = v.data if isinstance(v, RadarVolume) else np.asarray(v)
    a = a.astype(np.float64)
    return a[..., None] if a.ndim == 3 else a


def _pair(pred, truth):
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs truth {t.shape}")
    return p, t


def _default_range(t: np.ndarray, data_range) -> float:
    if data_range is not None:
        if not data_range > 0:
            raise ValueError("data_range must be positive")
        return float(data_range)
    r = float(t.max() - t.min()) if t.size else 0.0
    return r if r > 0 else 1.0


def me_mae(pred, truth) -> tuple[float, float]:
    p, t = _pair(pred, truth)
    d = p - t
    return float(d.mean()), float(np.abs(d).mean())


def psnr(pred, truth, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE), capped at 100 dB."""
    p, t = _pair(pred, truth)
    rng = _default_range(t, data_range)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(rng * rng / mse))


# ------------------------------------------------------------------ SSIM


def gaussian_window_1d(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


@lru_cache(maxsize=64)
def filter_matrix(n: int, sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    """Dense (n, n) operator for the reflect-padded 1-D window, so ``F @ x`` filters ``x``."""
    F = ndimage.correlate1d(np.eye(n), gaussian_window_1d(sigma, radius), axis=0, mode="reflect")
    F.setflags(write=False)
    return F


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float):
    Fr = filter_matrix(x.shape[0])
    Fc = filter_matrix(x.shape[1])

    def filt(a):
        return Fr @ a @ Fc.T

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    return Fr, Fc, mx, my, a1, a2, b1, b2


def ssim_2d(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    """Mean SSIM map of two images (11x11 Gaussian window, reflect borders)."""
    _, _, _, _, a1, a2, b1, b2 = _ssim_terms(np.asarray(x, float), np.asarray(y, float), data_range)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_2d_grad(x: np.ndarray, y: np.ndarray, data_range: float) -> tuple[float, np.ndarray]:
    """``ssim_2d`` and its gradient with respect to ``x``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    Fr, Fc, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y, data_range)
    den = b1 * b2
    s = a1 * a2 / den
    n = s.size
    # partials of the mean map with respect to the filtered moments
    g_mx = (2 * my * a2 - 2 * my * a1 + (-2 * mx) * s * b2 + 2 * mx * s * b1) / den / n
    g_xy = 2 * a1 / den / n
    g_xx = -s / b2 / n

    def adj(a):
        return Fr.T @ a @ Fc

    grad = adj(g_mx) + 2 * x * adj(g_xx) + y * adj(g_xy)
    return float(s.mean()), grad


def ssim(pred, truth, data_range: float | None = None) -> float:
    """SSIM averaged over every z-slice and channel."""
    p, t = _pair(pred, truth)
    rng = _default_range(t, data_range)
    vals = [ssim_2d(p[k, :, :, c], t[k, :, :, c], rng) for c in range(p.shape[3]) for k in range(p.shape[0])]
    return float(np.mean(vals))


# ------------------------------------------------------------------ CSI


def pooled_events(field: np.ndarray, threshold: float, pool: int = CSI_POOL) -> np.ndarray:
    """Binarize at ``>= threshold`` then max-pool every z-slice (stride = pool, edge windows kept)."""
    b = field >= threshold
    D, H, W = b.shape
    hp, wp = -(-H // pool), -(-W // pool)
    padded = np.zeros((D, hp * pool, wp * pool), bool)
    padded[:, :H, :W] = b
    return padded.reshape(D, hp, pool, wp, pool).any(axis=(2, 4))


def csi_counts(pred, truth, threshold: float, pool: int = CSI_POOL) -> tuple[int, int, int]:
    p, t = _pair(pred, truth)
    pe = pooled_events(p[..., 0], threshold, pool)
    te = pooled_events(t[..., 0], threshold, pool)
    hits = int(np.sum(pe & te))
    misses = int(np.sum(~pe & te))
    fa = int(np.sum(pe & ~te))
    return hits, misses, fa


def csi_pooled(pred, truth, threshold: float, pool: int = CSI_POOL) -> float:
    """Hits / (Hits + Misses + FalseAlarms) on the primary channel; 1.0 when nothing happens."""
    h, m, f = csi_counts(pred, truth, threshold, pool)
    denom = h + m + f
    return 1.0 if denom == 0 else h / denom


# ------------------------------------------------------------------ report


@dataclass
class FrameScores:
    frame: int
    me: float
    mae: float
    psnr: float
    ssim: float
    csi: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    frames: list[FrameScores]
    thresholds: tuple = CSI_THRESHOLDS
    pool: int = CSI_POOL
    data_range: float = 1.0

    @property
    def aggregate(self) -> dict:
        if not self.frames:
            return {}
        out = {k: float(np.mean([getattr(f, k) for f in self.frames])) for k in ("me", "mae", "psnr", "ssim")}
        out["csi"] = {
            key: float(np.mean([f.csi[key] for f in self.frames])) for key in self.frames[0].csi
        }
        return out

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "pool": self.pool,
            "data_range": self.data_range,
            "aggregate": self.aggregate,
            "frames": [asdict(f) for f in self.frames],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        keys = [f"csi_{k}" for k in (self.frames[0].csi if self.frames else {})]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "me", "mae", "psnr", "ssim", *keys])
            for f in self.frames:
                w.writerow([f.frame, repr(f.me), repr(f.mae), repr(f.psnr), repr(f.ssim),
                            *(repr(v) for v in f.csi.values())])


def evaluate(preds, truths, data_range: float | None = None, thresholds=CSI_THRESHOLDS,
             pool: int = CSI_POOL) -> EvalReport:
    """Score paired frame lists. ``data_range`` defaults to the truth sequence's global range."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError(f"frame count mismatch: {len(preds)} predicted vs {len(truths)} truth frames")
    if data_range is None:
        allt = np.concatenate([_values(t).ravel() for t in truths]) if truths else np.zeros(1)
        data_range = _default_range(allt, None)
    frames = []
    for k, (p, t) in enumerate(zip(preds, truths)):
        me, mae = me_mae(p, t)
        frames.append(FrameScores(
            k, me, mae, psnr(p, t, data_range), ssim(p, t, data_range),
            {f"{thr:g}": csi_pooled(p, t, thr, pool) for thr in thresholds},
        ))
    return EvalReport(frames, tuple(thresholds), pool, float(data_range))
