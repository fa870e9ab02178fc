"""Score calibration: reliability measurement and the exponential map.

Forest scores for non-background labels systematically underestimate the
empirical probability that the label is correct.  A single scalar-parameter
map  w -> 1 - exp(-beta * w)  fit per scale corrects this before predictions
from different scales are fused.  Background scores pass through untouched;
compositing never reads them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ReliabilityCurve",
    "CalibrationModel",
    "reliability",
    "fit_beta",
    "apply_calibration",
]


@dataclass
class ReliabilityCurve:
    """Empirical P(correct | score in bin) over score bins of half-width eps."""

    centers: np.ndarray
    empirical: np.ndarray
    counts: np.ndarray
    stderr: np.ndarray
    eps: float

    def as_table(self) -> str:
        lines = ["score\tempirical\tcount\tstderr"]
        for c, p, n, s in zip(self.centers, self.empirical, self.counts, self.stderr):
            lines.append(f"{c:.6f}\t{p:.6f}\t{int(n)}\t{s:.6f}")
        return "\n".join(lines) + "\n"


def reliability(scores: np.ndarray, labels: np.ndarray, eps: float = 0.025) -> ReliabilityCurve:
    """Bin scores into [c - eps, c + eps) cells and average the indicators.

    labels may be soft (multi-annotator averages in [0, 1]).  Empty bins are
    omitted; stderr is the standard error of the per-bin mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("need at least one validation pair")
    if eps <= 0:
        raise ValueError("eps must be positive")
    width = 2.0 * eps
    idx = np.floor(scores / width).astype(np.int64)
    idx = np.maximum(idx, 0)
    nbins = int(idx.max()) + 1
    counts = np.bincount(idx, minlength=nbins).astype(np.float64)
    sums = np.bincount(idx, weights=labels, minlength=nbins)
    sq = np.bincount(idx, weights=labels**2, minlength=nbins)
    keep = counts > 0
    mean = sums[keep] / counts[keep]
    var = np.maximum(sq[keep] / counts[keep] - mean**2, 0.0)
    stderr = np.sqrt(var / counts[keep])
    centers = (np.flatnonzero(keep) + 0.5) * width
    return ReliabilityCurve(centers, mean, counts[keep], stderr, eps)


def _sse(beta: float, w: np.ndarray, ind: np.ndarray) -> float:
    r = ind - (1.0 - np.exp(-beta * w))
    return float(r @ r)


def fit_beta(
    scores: np.ndarray,
    indicators: np.ndarray,
    lo: float = 1e-6,
    hi: float = 100.0,
    tol: float = 1e-6,
) -> float:
    """Least-squares fit of 1 - exp(-beta w) to raw indicator pairs.

    Golden-section search over beta in (0, 100]; the objective is smooth in
    beta.  Fitting raw pairs rather than binned averages weights every
    example equally.  Raises ValueError when all scores are zero (the map is
    then independent of beta).
    """
    w = np.asarray(scores, dtype=np.float64).ravel()
    ind = np.asarray(indicators, dtype=np.float64).ravel()
    if w.shape != ind.shape or w.size == 0:
        raise ValueError("scores and indicators must be equal-length, nonempty")
    if not (w > 0).any():
        raise ValueError("all scores are zero; beta is unidentifiable")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = _sse(c, w, ind), _sse(d, w, ind)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _sse(c, w, ind)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _sse(d, w, ind)
    return 0.5 * (a + b)


@dataclass(frozen=True)
class CalibrationModel:
    """Per-scale monotone score map.

    mode "exponential": w -> 1 - exp(-beta w);  mode "fast_approx":
    w -> min(1, w), the cheap stand-in for sparse voting scores.
    """

    beta: float = 8.0
    mode: str = "exponential"

    def __post_init__(self):
        if self.mode not in ("exponential", "fast_approx"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if self.mode == "exponential" and not self.beta > 0:
            raise ValueError("beta must be positive")

    def map_scores(self, w: np.ndarray) -> np.ndarray:
        if self.mode == "fast_approx":
            return np.minimum(1.0, w)
        return 1.0 - np.exp(-self.beta * w)


def apply_calibration(model: CalibrationModel, scores: np.ndarray) -> np.ndarray:
    """Calibrate a score vector or volume along its last (class) axis.

    Entry 0 (background) passes through unchanged; the remaining entries are
    mapped elementwise.  The map is strictly monotone, so per-pixel argmax
    labels are preserved.
    """
    w = np.asarray(scores)
    out = np.array(w, dtype=np.float32, copy=True)
    out[..., 1:] = model.map_scores(w[..., 1:])
    return out
