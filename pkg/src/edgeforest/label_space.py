"""Discrete (distance, orientation) label space for local straight edges.

A patch either contains no boundary near its center (label 0) or is assigned
one of K = n_dist_bins * n_orient_bins classes describing the straight edge
nearest the patch center: a signed center-to-edge distance d together with an
undirected tangent orientation theta.

Conventions used throughout the package:

* image coordinates are (x, y) = (column, row), y increasing downwards;
* theta is the tangent angle of the edge, wrapped to (-pi/2, pi/2];
* d is signed: flipping the tangent direction (theta -> theta + pi) flips the
  side a point lies on, so (d, theta) and (-d, theta + pi) describe the same
  physical edge.  Binning respects this identification exactly, which glues
  the two orientation ends of the parameter space with a half-twist.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabelSpaceConfig",
    "bin_params",
    "decode",
    "labels_for_orientation",
    "orientation_bin_centers",
    "distance_bin_centers",
    "wrap_params",
]


@dataclass(frozen=True)
class LabelSpaceConfig:
    """Geometry of the edge-label space.

    patch_size: side of the square analysis patch, in pixels (even, >= 4).
    n_dist_bins: number of signed-distance bins (odd, so a d=0 bin exists).
    n_orient_bins: number of orientation bins (>= 2).
    """

    patch_size: int = 16
    n_dist_bins: int = 15
    n_orient_bins: int = 8

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 2 != 0:
            raise ValueError("patch_size must be even and >= 4")
        if self.n_dist_bins < 1 or self.n_dist_bins % 2 != 1:
            raise ValueError("n_dist_bins must be odd and >= 1")
        if self.n_orient_bins < 2:
            raise ValueError("n_orient_bins must be >= 2")

    @property
    def n_labels(self) -> int:
        """K = number of edge classes (excluding background)."""
        return self.n_dist_bins * self.n_orient_bins

    @property
    def n_classes(self) -> int:
        """K + 1, including the background class 0."""
        return self.n_labels + 1

    @property
    def orient_step(self) -> float:
        """Angular width of one orientation bin, radians."""
        return math.pi / self.n_orient_bins

    @property
    def max_dist(self) -> float:
        """Patches farther than this from any edge are background."""
        return self.patch_size / 2.0


def wrap_params(d: float, theta: float) -> tuple[float, float]:
    """Wrap theta into (-pi/2, pi/2], flipping the sign of d per half turn."""
    half = math.pi / 2.0
    while theta > half:
        theta -= math.pi
        d = -d
    while theta <= -half:
        theta += math.pi
        d = -d
    return d, theta


def orientation_bin_centers(cfg: LabelSpaceConfig) -> np.ndarray:
    """Bin-center angles in radians: pi/2 - j*pi/m for j = 0..m-1.

    Bin 0 is centered on vertical edges (90 deg); with m=8, bin 4 is
    horizontal (0 deg).
    """
    m = cfg.n_orient_bins
    return np.pi / 2.0 - np.arange(m) * (np.pi / m)


def distance_bin_centers(cfg: LabelSpaceConfig) -> np.ndarray:
    """Signed-distance bin centers, one pixel apart: -(n-1)/2 .. (n-1)/2."""
    n = cfg.n_dist_bins
    h = (n - 1) // 2
    return np.arange(-h, h + 1, dtype=np.float64)


def _dist_bin(d: float, cfg: LabelSpaceConfig) -> int:
    # Nearest integer center, rounding half away from zero, clipped to range.
    h = (cfg.n_dist_bins - 1) // 2
    c = int(math.floor(abs(d) + 0.5)) * (1 if d >= 0 else -1)
    c = max(-h, min(h, c))
    return c + h


def _orient_bin(d: float, theta: float, cfg: LabelSpaceConfig) -> tuple[int, float]:
    # Returns (theta_bin, d) where d may have been sign-flipped when theta
    # falls nearest the wrapped copy of bin 0 across the -pi/2 seam.
    # Continuous coordinate u = how many bin-widths theta sits below pi/2;
    # exact bin boundaries (u = j + 0.5) go to the lower-index bin.
    u = (math.pi / 2.0 - theta) / cfg.orient_step
    j = math.ceil(u - 0.5)
    if j >= cfg.n_orient_bins:
        return 0, -d
    return j, d


def bin_params(d: float, theta: float, cfg: LabelSpaceConfig) -> int:
    """Map edge parameters (d, theta) to a class label k in 1..K.

    theta may be any angle; it is wrapped into (-pi/2, pi/2] with the
    accompanying sign flip of d.  Raises ValueError for |d| >= patch_size/2
    (such a patch should have been labeled background by the caller).
    """
    if abs(d) >= cfg.max_dist:
        raise ValueError(f"|d|={abs(d):g} >= patch_size/2={cfg.max_dist:g}; label background instead")
    d, theta = wrap_params(d, theta)
    tb, d = _orient_bin(d, theta, cfg)
    db = _dist_bin(d, cfg)
    return encode(db, tb, cfg)


def encode(dist_bin: int, orient_bin: int, cfg: LabelSpaceConfig) -> int:
    """Pack (distance bin, orientation bin) into a label k >= 1."""
    n, m = cfg.n_dist_bins, cfg.n_orient_bins
    if not (0 <= dist_bin < n and 0 <= orient_bin < m):
        raise ValueError(f"bin indices ({dist_bin}, {orient_bin}) out of range ({n}, {m})")
    return 1 + orient_bin * n + dist_bin


def decode_bins(k: int, cfg: LabelSpaceConfig) -> tuple[int, int]:
    """Inverse of encode: label k -> (distance bin, orientation bin)."""
    if not (1 <= k <= cfg.n_labels):
        raise ValueError(f"label {k} outside 1..{cfg.n_labels}")
    return (k - 1) % cfg.n_dist_bins, (k - 1) // cfg.n_dist_bins


def decode(k: int, cfg: LabelSpaceConfig) -> tuple[float, float]:
    """Label k -> bin-center parameters (d_center pixels, theta_center radians).

    Raises ValueError for the background label 0.
    """
    db, tb = decode_bins(k, cfg)
    d = db - (cfg.n_dist_bins - 1) // 2
    theta = math.pi / 2.0 - tb * cfg.orient_step
    return float(d), theta


def labels_for_orientation(orient_bin: int, cfg: LabelSpaceConfig) -> list[int]:
    """All n_dist_bins labels compatible with one orientation bin."""
    if not (0 <= orient_bin < cfg.n_orient_bins):
        raise ValueError(f"orientation bin {orient_bin} outside 0..{cfg.n_orient_bins - 1}")
    base = 1 + orient_bin * cfg.n_dist_bins
    return list(range(base, base + cfg.n_dist_bins))
