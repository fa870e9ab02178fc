"""Edge fusion: from per-pixel score vectors to an oriented boundary map.

Every edge label k = (d, theta) owes a p x p binary mask: the straight
bin-center line, optionally "sharpened" by re-segmenting patch pixels near
the line toward the closer of the two side mean colors.  Compositing sums,
for every pixel and orientation, the mask values of all overlapping patch
predictions weighted by their calibrated scores.

The collapsed fast path translates every d-channel of the score volume onto
the d=0 channel of its orientation (shift by the rounded offset vector) and
composites a single channel per orientation, cutting the sharpening work by
the number of distance bins at a sub-pixel approximation cost.

Geometry conventions match the labeling code: x right, y down, tangent
u = (cos theta, sin theta), and the mask line of label (d, theta) is the
zero set of f(a, b) = u_x*b - u_y*a + d over patch offsets (a, b) from the
center.  Masks are the inner 4-neighbor boundary of the f >= 0 side, which
makes the unsharpened mask an exact fixpoint of sharpening on ideal step
edges.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from skimage.morphology import thin as _thin

from .calibration import CalibrationModel, apply_calibration
from .features import compute_channels
from .label_space import LabelSpaceConfig, decode, labels_for_orientation, orientation_bin_centers

__all__ = [
    "PyramidConfig",
    "sharpen_mask",
    "composite",
    "composite_collapsed",
    "detect_multiscale",
    "nms",
    "resize_bilinear",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PyramidConfig:
    """Scales, per-scale sharpen levels, and per-scale calibration betas."""

    scales: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    sharpen: tuple[int, ...] = (1, 1, 2, 2)
    betas: tuple[float, ...] = (8.0, 8.0, 8.0, 8.0)

    def __post_init__(self):
        if not all(s > 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be sorted ascending")
        if len(self.sharpen) != len(self.scales) or len(self.betas) != len(self.scales):
            raise ValueError("need one sharpen level and one beta per scale")
        if not all(sh in (0, 1, 2) for sh in self.sharpen):
            raise ValueError("sharpen levels must be 0, 1, or 2")


# ----------------------------------------------------------------------
# Per-label mask geometry (static; cached per config/label/sharpen)
# ----------------------------------------------------------------------

@dataclass
class _LabelGeom:
    mask0: np.ndarray      # (nm, 2) static mask offsets (dy, dx)
    band: np.ndarray       # (nb, 2) reassignable offsets, |f| <= sh
    bplus: np.ndarray      # (nbp, 2) candidate mask offsets, |f| <= sh + 1
    self_idx: np.ndarray   # (nbp,) column in the extended side matrix
    nbr_idx: np.ndarray    # (4, nbp) columns of the 4-neighbors
    rows_a: np.ndarray     # (p, 2) inclusive [lo, hi] dx of the f>=0 side per row
    n_a: int               # pixels on the f>=0 side inside the patch


def _tangent(theta: float) -> tuple[float, float]:
    """Unit tangent with exact zeros for axis-aligned orientations."""
    ux, uy = math.cos(theta), math.sin(theta)
    if abs(ux) < 1e-9:
        ux, uy = 0.0, math.copysign(1.0, uy)
    elif abs(uy) < 1e-9:
        ux, uy = math.copysign(1.0, ux), 0.0
    return ux, uy


def _line_f(cfg: LabelSpaceConfig, k: int):
    d, theta = decode(k, cfg)
    ux, uy = _tangent(theta)
    half = cfg.patch_size // 2
    ext = np.arange(-half - 1, half + 1)  # extended grid, one ring beyond the patch
    bb, aa = np.meshgrid(ext, ext, indexing="ij")  # bb = dy, aa = dx
    f = ux * bb - uy * aa + d
    return f, ext


def _inner_boundary(side_ext: np.ndarray) -> np.ndarray:
    """Inner 4-boundary of the True side, evaluated on the in-patch window."""
    c = side_ext[1:-1, 1:-1]
    nbr_all = (
        side_ext[:-2, 1:-1] & side_ext[2:, 1:-1] & side_ext[1:-1, :-2] & side_ext[1:-1, 2:]
    )
    return c & ~nbr_all


@lru_cache(maxsize=4096)
def _label_geometry(cfg: LabelSpaceConfig, k: int, sh: int) -> _LabelGeom:
    p = cfg.patch_size
    half = p // 2
    f, ext = _line_f(cfg, k)
    s0_ext = f >= 0

    mask0_grid = _inner_boundary(s0_ext)
    mask0 = np.argwhere(mask0_grid) - half  # (dy, dx) offsets

    inpatch_f = f[1:-1, 1:-1]
    band_grid = np.abs(inpatch_f) <= sh if sh > 0 else np.zeros_like(inpatch_f, dtype=bool)
    bplus_grid = np.abs(inpatch_f) <= sh + 1 if sh > 0 else np.zeros_like(band_grid)
    band = np.argwhere(band_grid) - half
    bplus = np.argwhere(bplus_grid) - half

    nb = len(band)
    band_col = np.full((p + 2, p + 2), -1, dtype=np.int32)  # indexed on the ext grid
    if nb:
        band_col[band[:, 0] + half + 1, band[:, 1] + half + 1] = np.arange(nb)

    def column_of(dy: int, dx: int) -> int:
        gy, gx = dy + half + 1, dx + half + 1
        c = band_col[gy, gx]
        if c >= 0:
            return int(c)
        return nb + int(s0_ext[gy, gx])  # dummy: constant straight side

    self_idx = np.array([column_of(dy, dx) for dy, dx in bplus], dtype=np.int64)
    nbr_idx = np.array(
        [
            [column_of(dy + oy, dx + ox) for dy, dx in bplus]
            for oy, ox in ((-1, 0), (1, 0), (0, -1), (0, 1))
        ],
        dtype=np.int64,
    )

    s0_in = s0_ext[1:-1, 1:-1]
    rows_a = np.zeros((p, 2), dtype=np.int64)
    n_a = 0
    for r in range(p):
        cols = np.flatnonzero(s0_in[r])
        if len(cols):
            rows_a[r] = (cols[0] - half, cols[-1] - half)
            n_a += len(cols)
        else:
            rows_a[r] = (0, -1)  # empty interval
    return _LabelGeom(mask0, band, bplus, self_idx, nbr_idx, rows_a, n_a)


# ----------------------------------------------------------------------
# Single-patch sharpened mask (reference implementation of the geometry)
# ----------------------------------------------------------------------

def _as_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None].repeat(3, axis=-1)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def sharpen_mask(image: np.ndarray, center_xy, k: int, sh: int, cfg: LabelSpaceConfig) -> np.ndarray:
    """p x p boundary mask of label k for the patch at center (x, y).

    sh == 0 returns the content-independent straight-line mask.  For sh > 0,
    patch pixels within sh of the line move to the nearer of the two side
    mean colors before the boundary is re-extracted; if either side is empty
    the straight mask is returned unchanged.
    """
    if sh not in (0, 1, 2):
        raise ValueError("sh must be 0, 1, or 2")
    p = cfg.patch_size
    half = p // 2
    f, _ = _line_f(cfg, k)
    side = f >= 0
    if sh > 0:
        img = _as_float_image(image)
        x, y = int(center_xy[0]), int(center_xy[1])
        pad = half + 1
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        patch = padded[y + 1 : y + 1 + p, x + 1 : x + 1 + p]  # ext offset +pad-half
        s_in = side[1:-1, 1:-1]
        na = int(s_in.sum())
        if 0 < na < p * p:
            mean_a = patch[s_in].mean(axis=0)
            mean_b = patch[~s_in].mean(axis=0)
            bandsel = np.abs(f[1:-1, 1:-1]) <= sh
            cols = patch[bandsel]
            da = ((cols - mean_a) ** 2).sum(axis=1)
            db = ((cols - mean_b) ** 2).sum(axis=1)
            new_side = side.copy()
            new_side[1:-1, 1:-1][bandsel] = da <= db
            side = new_side
    return _inner_boundary(side)


# ----------------------------------------------------------------------
# Compositing
# ----------------------------------------------------------------------

def _integral_rows(padded: np.ndarray) -> np.ndarray:
    """Horizontal prefix sums with a leading zero column, per channel."""
    ii = np.zeros((padded.shape[0], padded.shape[1] + 1, padded.shape[2]), dtype=np.float64)
    np.cumsum(padded, axis=1, out=ii[:, 1:])
    return ii


def _sharpened_contributions(
    geom: _LabelGeom,
    ys: np.ndarray,
    xs: np.ndarray,
    padded_img: np.ndarray,
    ii_rows: np.ndarray,
    img_pad: int,
    cfg: LabelSpaceConfig,
):
    """(n, nbp) sharpened-mask values over the bplus offsets of one label.

    ys, xs are image coordinates of the patch centers; color reads go
    through the reflect-padded image.  Row intervals stored as [0, -1]
    (empty) contribute zero automatically since lo == hi + 1.
    """
    p = cfg.patch_size
    half = p // 2
    n = len(ys)
    rows = ys[:, None] + (np.arange(p) - half)[None, :] + img_pad  # (n, p)
    lo = xs[:, None] + geom.rows_a[None, :, 0] + img_pad
    hi = xs[:, None] + geom.rows_a[None, :, 1] + img_pad + 1
    sum_a = (ii_rows[rows, hi] - ii_rows[rows, lo]).sum(axis=1)  # (n, 3)
    full_lo = (xs - half + img_pad)[:, None]
    full_hi = (xs + half + img_pad)[:, None]
    sum_p = (ii_rows[rows, full_hi] - ii_rows[rows, full_lo]).sum(axis=1)

    n_a = geom.n_a
    n_b = p * p - n_a
    mean_a = sum_a / n_a
    mean_b = (sum_p - sum_a) / n_b

    cols = padded_img[
        ys[:, None] + geom.band[None, :, 0] + img_pad,
        xs[:, None] + geom.band[None, :, 1] + img_pad,
    ]  # (n, nb, 3)
    da = ((cols - mean_a[:, None, :]) ** 2).sum(axis=2)
    db = ((cols - mean_b[:, None, :]) ** 2).sum(axis=2)
    s_band = da <= db  # (n, nb)

    s_cols = np.empty((n, len(geom.band) + 2), dtype=bool)
    s_cols[:, : len(geom.band)] = s_band
    s_cols[:, len(geom.band)] = False
    s_cols[:, len(geom.band) + 1] = True

    s_self = s_cols[:, geom.self_idx]
    nr = s_cols[:, geom.nbr_idx[0]]
    for r in range(1, 4):
        nr = nr & s_cols[:, geom.nbr_idx[r]]
    return s_self & ~nr  # (n, nbp)


def _paste_static(canvas_t, w_k: np.ndarray, offsets: np.ndarray, pad: int, h: int, w: int):
    for dy, dx in offsets:
        canvas_t[pad + dy : pad + dy + h, pad + dx : pad + dx + w] += w_k


def _composite_channels(
    weights_per_theta,  # iterable of (theta_bin, label_k, w_k 2-D array over the center grid)
    image: np.ndarray,
    sh: int,
    cfg: LabelSpaceConfig,
    grid_origin: int,  # center-grid coordinate of image pixel (0, 0)
    out_shape: tuple[int, int],
    min_weight: float,
) -> np.ndarray:
    """Shared compositing core for the naive and collapsed paths.

    The center grid may extend past the image by grid_origin pixels on every
    side (collapsed translations move weight off-image); masks are pasted at
    image coordinates and clipped to the output.
    """
    h, w = out_shape
    m = cfg.n_orient_bins
    half = cfg.patch_size // 2
    pad = half + grid_origin + 1
    canvas = np.zeros((m, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    cw = canvas.shape[2]

    img = _as_float_image(image)
    img_pad = half + grid_origin + 1
    padded_img = np.pad(img, ((img_pad, img_pad), (img_pad, img_pad), (0, 0)), mode="reflect")
    ii_rows = _integral_rows(padded_img) if sh > 0 else None

    for tb, k, w_k in weights_per_theta:
        geom = _label_geometry(cfg, k, sh)
        gh, gw = w_k.shape
        if sh == 0 or geom.n_a in (0, cfg.patch_size**2):
            # grid (0,0) sits at image (-grid_origin,-grid_origin); with
            # canvas pad = half + grid_origin + 1 the paste start for offset
            # dy is dy + half + 1 regardless of the grid extension.
            _paste_static(canvas[tb], w_k, geom.mask0, half + 1, gh, gw)
            continue
        ys, xs = np.nonzero(w_k > min_weight)
        if len(ys) == 0:
            continue
        ys0, xs0 = ys - grid_origin, xs - grid_origin  # image coordinates
        mask = _sharpened_contributions(geom, ys0, xs0, padded_img, ii_rows, img_pad, cfg)
        vals = w_k[ys, xs].astype(np.float64)
        base = (ys0 + pad) * cw + (xs0 + pad)
        tgt = base[:, None] + geom.bplus[:, 0][None, :] * cw + geom.bplus[:, 1][None, :]
        sel = mask.ravel()
        contrib = np.broadcast_to(vals[:, None], mask.shape).ravel()[sel]
        flat = np.bincount(tgt.ravel()[sel], weights=contrib, minlength=canvas[tb].size)
        canvas[tb] += flat.reshape(canvas[tb].shape)

    out = canvas[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(np.moveaxis(out, 0, -1))


def composite(
    scores: np.ndarray,
    image: np.ndarray,
    sh: int,
    cfg: LabelSpaceConfig,
    min_weight: float = 0.0,
) -> np.ndarray:
    """Exact compositing of a full (H, W, K+1) score volume.

    Returns E of shape (H, W, n_orient_bins).  With sh == 0 the masks are
    content-independent and the operation reduces to a correlation of each
    score channel with its fixed mask.  min_weight > 0 skips low-weight
    locations in the sharpened path (a speed knob; 0 is exact).
    """
    h, w = scores.shape[:2]
    if scores.shape[2] != cfg.n_classes:
        raise ValueError("score volume does not match the label space")

    def gen():
        for tb in range(cfg.n_orient_bins):
            for k in labels_for_orientation(tb, cfg):
                w_k = scores[:, :, k]
                if w_k.any():
                    yield tb, k, w_k

    return _composite_channels(gen(), image, sh, cfg, 0, (h, w), min_weight)


def collapse_scores(scores: np.ndarray, cfg: LabelSpaceConfig) -> tuple[np.ndarray, int]:
    """Translate every d-channel onto d=0 per orientation and sum.

    Returns (collapsed, margin): collapsed has shape
    (m, H + 2*margin, W + 2*margin); the margin admits centers pushed past
    the image border by the translation.
    """
    h, w, _ = scores.shape
    n, m = cfg.n_dist_bins, cfg.n_orient_bins
    margin = (n - 1) // 2
    out = np.zeros((m, h + 2 * margin, w + 2 * margin), dtype=np.float64)
    for tb in range(m):
        for k in labels_for_orientation(tb, cfg):
            w_k = scores[:, :, k]
            if not w_k.any():
                continue
            d, theta = decode(k, cfg)
            ux, uy = _tangent(theta)
            tx = int(np.rint(d * uy))
            ty = int(np.rint(-d * ux))
            out[tb, margin + ty : margin + ty + h, margin + tx : margin + tx + w] += w_k
    return out, margin


def composite_collapsed(
    scores: np.ndarray,
    image: np.ndarray,
    sh: int,
    cfg: LabelSpaceConfig,
    min_weight: float = 0.0,
) -> np.ndarray:
    """Fast compositing through the orientation-collapsed score stack.

    Exact when the rounded translation vectors are exact (axis-aligned
    orientations with integer d); within half a pixel otherwise.
    """
    h, w = scores.shape[:2]
    collapsed, margin = collapse_scores(scores, cfg)
    center_bin = (cfg.n_dist_bins - 1) // 2

    def gen():
        for tb in range(cfg.n_orient_bins):
            k0 = 1 + tb * cfg.n_dist_bins + center_bin
            if collapsed[tb].any():
                yield tb, k0, collapsed[tb]

    return _composite_channels(gen(), image, sh, cfg, margin, (h, w), min_weight)


# ----------------------------------------------------------------------
# Multiscale detection
# ----------------------------------------------------------------------

def resize_bilinear(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Plain bilinear resample (half-pixel centers), channels preserved."""
    h, w = arr.shape[:2]
    oh, ow = out_shape
    if (oh, ow) == (h, w):
        return arr.astype(np.float32, copy=True)
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)
    fx = (xs - x0).astype(np.float32)
    a = arr.astype(np.float32)
    if a.ndim == 2:
        a = a[..., None]
        squeeze = True
    else:
        squeeze = False
    top = a[y0][:, x0] * (1 - fx)[None, :, None] + a[y0][:, x1] * fx[None, :, None]
    bot = a[y1][:, x0] * (1 - fx)[None, :, None] + a[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[..., 0] if squeeze else out


def detect_multiscale(
    image: np.ndarray,
    forest,
    pyr: PyramidConfig,
    mode: str = "average",
    calibrate: bool = True,
    collapsed: bool = True,
    min_weight: float = 0.0,
    return_components: bool = False,
):
    """Run the detector over an image pyramid and average the results.

    Each scale is resized bilinearly, run densely, calibrated with its own
    beta, composited at its sharpen level, and resized back; the final map is
    the unweighted mean over usable scales.  Scales where the resized image
    is smaller than the patch are skipped with a warning.
    """
    from .forest import predict_image

    img = _as_float_image(image)
    h, w = img.shape[:2]
    cfg = forest.label_cfg
    comp = composite_collapsed if collapsed else composite
    total = np.zeros((h, w, cfg.n_orient_bins), dtype=np.float64)
    used = 0
    per_scale = {}
    for s, sh, beta in zip(pyr.scales, pyr.sharpen, pyr.betas):
        hs, ws = int(round(h * s)), int(round(w * s))
        if min(hs, ws) < cfg.patch_size:
            log.warning("scale %g gives %dx%d < patch %d; skipping", s, hs, ws, cfg.patch_size)
            continue
        im_s = resize_bilinear(img, (hs, ws))
        stack = compute_channels(im_s, cfg)
        vol = predict_image(forest, stack, mode)
        if calibrate:
            vol = apply_calibration(CalibrationModel(beta=beta), vol)
        e_s = comp(vol, im_s, sh, cfg, min_weight)
        e_up = resize_bilinear(e_s, (h, w))
        per_scale[s] = e_up
        total += e_up
        used += 1
    if used == 0:
        raise ValueError("image too small for every scale in the pyramid")
    out = (total / used).astype(np.float32)
    if return_components:
        return out, per_scale
    return out


# ----------------------------------------------------------------------
# Non-maximum suppression
# ----------------------------------------------------------------------

def _bilinear_at(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples with zero outside the array."""
    h, w = arr.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros_like(out)
            vals[ok] = arr[yy[ok], xx[ok]]
            out += wgt * vals
    return out


def nms(E: np.ndarray, cfg: LabelSpaceConfig, margin: float = 1.01, thin_output: bool = True) -> np.ndarray:
    """Suppress non-maxima along the orientation normal; returns (H, W).

    Per pixel the strongest orientation bin supplies strength and direction;
    a pixel survives when margin * strength is at least the bilinear samples
    one pixel away on both sides along the normal.  A final support thinning
    breaks the remaining two-pixel plateaus.
    """
    if E.ndim != 3:
        raise ValueError("expected an (H, W, orientations) map")
    strength = E.max(axis=2).astype(np.float64)
    ob = E.argmax(axis=2)
    theta = orientation_bin_centers(cfg)[ob]
    nx = -np.sin(theta)
    ny = np.cos(theta)
    h, w = strength.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    keep = np.ones_like(strength, dtype=bool)
    for sgn in (-1.0, 1.0):
        sample = _bilinear_at(strength, xx + sgn * nx, yy + sgn * ny)
        keep &= strength * margin >= sample
    out = np.where(keep, strength, 0.0)
    if thin_output and out.any():
        support = _thin(out > 0)
        out = np.where(support, out, 0.0)
    return out.astype(np.float32)
