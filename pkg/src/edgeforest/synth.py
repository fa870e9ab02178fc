"""Synthetic polygon/ellipse scenes with exact segmentations.

A desk-scale stand-in for a human-annotated boundary dataset: random convex
polygons and ellipses over a background, flat region colors with a gentle
illumination ramp and Gaussian noise, plus one exact segmentation map and
optional perturbed "annotator" copies (smooth random warps of the id map).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.draw import polygon as draw_polygon

__all__ = ["SynthConfig", "SynthScene", "generate_scene", "generate_dataset"]


@dataclass(frozen=True)
class SynthConfig:
    width: int = 128
    height: int = 96
    min_shapes: int = 2
    max_shapes: int = 5
    min_radius: float = 9.0
    max_radius: float = 34.0
    noise_sigma: float = 0.025
    illumination: float = 0.06
    n_annotators: int = 2
    annotator_jitter: float = 1.0  # px amplitude of the warp fields
    min_contrast: float = 0.08


@dataclass
class SynthScene:
    image: np.ndarray  # (H, W, 3) uint8
    segs: list[np.ndarray]  # int32 id maps, segs[0] exact


def _random_colors(rng: np.random.Generator, n: int, min_contrast: float) -> np.ndarray:
    """Region colors; adjacent draws are re-rolled until they contrast."""
    cols = [rng.uniform(0.08, 0.92, size=3)]
    for _ in range(n - 1):
        for _ in range(40):
            c = rng.uniform(0.05, 0.95, size=3)
            if np.abs(c - cols[-1]).mean() >= min_contrast:
                break
        cols.append(c)
    return np.array(cols)


def _convex_polygon(rng, cx, cy, radius, n_pts):
    ang = np.sort(rng.uniform(0, 2 * np.pi, size=n_pts))
    rad = radius * rng.uniform(0.6, 1.0, size=n_pts)
    return cy + rad * np.sin(ang), cx + rad * np.cos(ang)


def _ellipse_points(rng, cx, cy, radius):
    a = radius * rng.uniform(0.5, 1.0)
    b = radius * rng.uniform(0.35, 0.9)
    rot = rng.uniform(0, np.pi)
    t = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    xs = a * np.cos(t)
    ys = b * np.sin(t)
    xr = xs * np.cos(rot) - ys * np.sin(rot)
    yr = xs * np.sin(rot) + ys * np.cos(rot)
    return cy + yr, cx + xr


def _smooth_field(rng, h, w, amplitude):
    coarse = rng.normal(0, amplitude, size=(4, 4))
    from .fusion import resize_bilinear

    return resize_bilinear(coarse.astype(np.float32), (h, w))


def _perturb_seg(rng, seg, amplitude):
    """Warp the id map with a smooth displacement field (nearest lookup)."""
    h, w = seg.shape
    dy = _smooth_field(rng, h, w, amplitude)
    dx = _smooth_field(rng, h, w, amplitude)
    yy, xx = np.mgrid[0:h, 0:w]
    sy = np.clip(np.rint(yy + dy), 0, h - 1).astype(np.int64)
    sx = np.clip(np.rint(xx + dx), 0, w - 1).astype(np.int64)
    return seg[sy, sx]


def generate_scene(seed: int, cfg: SynthConfig = SynthConfig()) -> SynthScene:
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    seg = np.ones((h, w), dtype=np.int32)
    for i in range(n_shapes):
        cx = rng.uniform(0.15 * w, 0.85 * w)
        cy = rng.uniform(0.15 * h, 0.85 * h)
        radius = rng.uniform(cfg.min_radius, cfg.max_radius)
        if rng.uniform() < 0.5:
            ys, xs = _convex_polygon(rng, cx, cy, radius, int(rng.integers(3, 8)))
        else:
            ys, xs = _ellipse_points(rng, cx, cy, radius)
        rr, cc = draw_polygon(ys, xs, shape=seg.shape)
        seg[rr, cc] = i + 2

    # fully occluded shapes drop out of the id set; color the survivors
    ids = np.unique(seg)
    colors = _random_colors(rng, len(ids), cfg.min_contrast)
    img = np.zeros((h, w, 3))
    for sid, c in zip(ids, colors):
        img[seg == sid] = c

    gy = rng.uniform(-1, 1)
    gx = rng.uniform(-1, 1)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (gy * (yy / h - 0.5) + gx * (xx / w - 0.5)) * cfg.illumination
    img += ramp[..., None]
    img += rng.normal(0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0, 1)

    segs = [seg]
    for _ in range(max(0, cfg.n_annotators - 1)):
        segs.append(_perturb_seg(rng, seg, cfg.annotator_jitter))
    return SynthScene((img * 255).astype(np.uint8), segs)


def generate_dataset(n_images: int, seed: int, cfg: SynthConfig = SynthConfig()) -> list[SynthScene]:
    """n_images scenes; scene i depends only on (seed, i)."""
    return [generate_scene(seed * 100_003 + i, cfg) for i in range(n_images)]
