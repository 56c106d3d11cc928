"""Distortion metrics (l2, l-infinity, SSIM), defended accuracy, and per-round curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .core import Dataset, Rng

__all__ = [
    "MetricReport",
    "l2_norm",
    "linf_norm",
    "ssim",
    "ssim_terms",
    "metric_report",
    "evaluate_clean_accuracy",
    "curves_from_traces",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class MetricReport:
    l2: float
    linf: float
    ssim: float

    def __post_init__(self):
        if self.l2 < 0 or self.linf < 0 or self.ssim > 1.0 + 1e-12:
            raise ValueError(f"inconsistent metric report {self}")


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def l2_norm(x, y) -> float:
    """Root-mean-square difference per pixel (over every H*W*C entry)."""
    x, y = _pair(x, y)
    if x.size == 0:
        return 0.0
    d = x - y
    return float(np.sqrt(np.mean(d * d)))


def linf_norm(x, y) -> float:
    x, y = _pair(x, y)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x - y)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation of a 2-D array, keeping only fully covered windows."""
    half = len(w) // 2
    out = correlate1d(correlate1d(a, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half : a.shape[0] - half, half : a.shape[1] - half]


def ssim_terms(x, y):
    """Per-channel SSIM maps split into ``(luminance, contrast_structure)`` factors.

    SSIM is their product.  The second factor only sees local variances and
    covariance, so it is unchanged when both images shift by the same constant.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image side must be at least {SSIM_WINDOW} for SSIM, got {x.shape[:2]}")
    w = _gaussian_window()
    lum, cs = [], []
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
        var_a = _filter_valid(a * a, w) - mu_a * mu_a
        var_b = _filter_valid(b * b, w) - mu_b * mu_b
        cov = _filter_valid(a * b, w) - mu_a * mu_b
        lum.append((2 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1))
        cs.append((2 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2))
    return np.stack(lum, axis=-1), np.stack(cs, axis=-1)


def ssim(x, y) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5), mean over valid windows and channels."""
    x, y = _pair(x, y)
    if np.array_equal(x, y):
        # the ratio form can land one ulp away from 1 for identical inputs
        if min(x.shape[:2]) < SSIM_WINDOW:
            raise ValueError(f"image side must be at least {SSIM_WINDOW} for SSIM")
        return 1.0
    lum, cs = ssim_terms(x, y)
    return float(np.mean(lum * cs))


def metric_report(x, y) -> MetricReport:
    return MetricReport(l2_norm(x, y), linf_norm(x, y), ssim(x, y))


def evaluate_clean_accuracy(model, defense, data: Dataset, trials_per_image: int, rng: Rng) -> float:
    """Fraction of (image, trial) pairs for which ``argmax f(g(x))`` is the true label.

    Image ``i`` uses the stream ``rng.child(f"img{i}")`` so the answer does not
    depend on evaluation order.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    if trials_per_image < 1:
        raise ValueError("trials_per_image must be at least 1")
    hits = 0
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        stream = rng.child(f"img{i}")
        batch = np.stack([defense.apply(img, stream) for _ in range(trials_per_image)])
        hits += int(np.sum(model.predict(batch) == label))
    return hits / (len(data) * trials_per_image)


def curves_from_traces(traces: Sequence, max_round: int) -> np.ndarray:
    """Per-round ``(round, acc, asr)`` rows for rounds ``0..max_round``.

    A trace that stopped early keeps its last recorded prediction, so ACC
    carries terminal states forward.  ASR(r) is the fraction that had
    succeeded at some round ``<= r``.
    """
    if len(traces) == 0:
        raise ValueError("no traces to aggregate")
    rows = np.zeros((max_round + 1, 3))
    rows[:, 0] = np.arange(max_round + 1)
    for tr in traces:
        records = {rec.round: rec for rec in tr.rounds}
        last = None
        won = False
        for r in range(max_round + 1):
            if r in records:
                last = records[r]
                won = won or last.success
            if last is not None and last.pred == tr.label:
                rows[r, 1] += 1
            if won:
                rows[r, 2] += 1
    rows[:, 1:] /= len(traces)
    return rows
