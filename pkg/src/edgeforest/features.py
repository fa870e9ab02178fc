"""Per-image feature channels and scalar feature reads for the trees.

An input color image is expanded into 13 channels at half resolution:

* 3 color-opponent channels (luminance + two chroma),
* 2 gradient-magnitude channels (luminance gradients at smoothing radii 0, 2),
* 8 oriented-gradient channels (magnitude split over 4 gradient-orientation
  bins, at the same two smoothing radii).

Trees never see patches directly: a split reads either one channel pixel or
the difference of two pixels of the same channel, at fixed offsets inside the
(patch_size/2)^2 window the patch occupies in channel coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .label_space import LabelSpaceConfig

__all__ = [
    "ChannelStack",
    "FeatureId",
    "compute_channels",
    "read_feature",
    "enumerate_feature_pool",
    "N_CHANNELS",
    "CHANNEL_NAMES",
]

N_ORIENT_CHANNELS = 4
SMOOTH_RADII = (0, 2)

CHANNEL_NAMES = tuple(
    ["luma", "chroma_rg", "chroma_by"]
    + [
        name
        for r in SMOOTH_RADII
        for name in ([f"gradmag_r{r}"] + [f"orientgrad_r{r}_o{o}" for o in range(N_ORIENT_CHANNELS)])
    ]
)
N_CHANNELS = len(CHANNEL_NAMES)


@dataclass(frozen=True)
class FeatureId:
    """One scalar feature: a channel read, or a same-channel pixel difference.

    Offsets are (dy, dx) in channel coordinates, relative to the channel pixel
    the patch center falls in; (dy2, dx2) is ignored when kind == "single".
    """

    kind: str  # "single" | "diff"
    channel: int
    dy1: int
    dx1: int
    dy2: int = 0
    dx2: int = 0


class ChannelStack:
    """Immutable stack of feature channels for one image.

    channels has shape (C, Hc, Wc) with (Hc, Wc) = ceil(image_shape / 2).
    `padded` carries a reflect-padded copy so any patch window read, including
    near borders, is a plain array access.
    """

    def __init__(self, channels: np.ndarray, patch_size: int, image_shape: tuple[int, int]):
        if channels.ndim != 3:
            raise ValueError("channels must be (C, Hc, Wc)")
        self.channels = channels
        self.patch_size = patch_size
        self.image_shape = image_shape
        self.pad = patch_size // 4 + 1
        self.padded = np.pad(
            channels, ((0, 0), (self.pad, self.pad), (self.pad, self.pad)), mode="reflect"
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]

    def center_coords(self, x, y):
        """Channel coordinates of the patch centered at image pixel (x, y)."""
        return np.asarray(x) // 2, np.asarray(y) // 2


def _smooth(a: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return a
    # Two box passes approximate a triangle filter of the given radius.
    size = 2 * radius + 1
    out = ndimage.uniform_filter(a, size=size, mode="reflect")
    return ndimage.uniform_filter(out, size=size, mode="reflect")


def _downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 box-average downsample to ceil(shape/2), edge rows/cols replicated."""
    h, w = a.shape
    if h % 2 or w % 2:
        a = np.pad(a, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def compute_channels(image: np.ndarray, cfg: LabelSpaceConfig | None = None) -> ChannelStack:
    """Build the 13-channel stack for a color image.

    image: (H, W, 3) uint8 or float array; floats are assumed in [0, 1].
    Raises ValueError if the image is smaller than the patch on either side.
    """
    cfg = cfg or LabelSpaceConfig()
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) color image")
    h, w = img.shape[:2]
    if min(h, w) < cfg.patch_size:
        raise ValueError(f"image {h}x{w} smaller than patch size {cfg.patch_size}")
    img = img.astype(np.float32)
    if image.dtype == np.uint8:
        img /= 255.0

    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    luma = (r + g + b) / 3.0
    chroma_rg = 0.5 * (r - g)
    chroma_by = 0.5 * (b - 0.5 * (r + g))

    chans = [luma, chroma_rg, chroma_by]
    for radius in SMOOTH_RADII:
        base = _smooth(luma, radius)
        gy, gx = np.gradient(base)
        mag = np.hypot(gx, gy)
        chans.append(mag)
        # Gradient orientation in [0, pi), hard-assigned to 4 bins.
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        obin = np.floor(ang / (np.pi / N_ORIENT_CHANNELS) + 0.5).astype(np.int32) % N_ORIENT_CHANNELS
        for o in range(N_ORIENT_CHANNELS):
            chans.append(np.where(obin == o, mag, 0.0))

    stack = np.stack([_downsample2(c).astype(np.float32) for c in chans], axis=0)
    return ChannelStack(stack, cfg.patch_size, (h, w))


def read_feature(stack: ChannelStack, center_xy: tuple[int, int], f: FeatureId) -> float:
    """Evaluate one feature for the patch centered at image pixel (x, y)."""
    cx, cy = stack.center_coords(*center_xy)
    pad = stack.pad
    ch = stack.padded[f.channel]
    v = ch[cy + f.dy1 + pad, cx + f.dx1 + pad]
    if f.kind == "diff":
        v = v - ch[cy + f.dy2 + pad, cx + f.dx2 + pad]
    return float(v)


def offset_range(cfg: LabelSpaceConfig) -> tuple[int, int]:
    """Valid channel-coordinate offsets for a patch: [-q, q-1], q = patch/4."""
    q = cfg.patch_size // 4
    return -q, q - 1


def enumerate_feature_pool(
    cfg: LabelSpaceConfig,
    n_single: int,
    n_pairdiff: int,
    seed: int,
    n_channels: int = N_CHANNELS,
) -> list[FeatureId]:
    """Deterministic pseudo-random feature pool.

    Channels and window offsets are drawn uniformly; the pool is reproducible
    from the seed alone.
    """
    if n_single < 0 or n_pairdiff < 0 or n_single + n_pairdiff < 1:
        raise ValueError("pool must contain at least one feature")
    rng = np.random.default_rng(seed)
    lo, hi = offset_range(cfg)
    pool: list[FeatureId] = []
    for _ in range(n_single):
        ch = int(rng.integers(0, n_channels))
        dy, dx = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        pool.append(FeatureId("single", ch, dy, dx))
    for _ in range(n_pairdiff):
        ch = int(rng.integers(0, n_channels))
        dy1, dx1, dy2, dx2 = (int(v) for v in rng.integers(lo, hi + 1, size=4))
        pool.append(FeatureId("diff", ch, dy1, dx1, dy2, dx2))
    return pool


def feature_table(pool: list[FeatureId]) -> tuple[np.ndarray, ...]:
    """Columnar view of a feature pool for vectorized evaluation.

    Returns (is_diff u8, channel i32, dy1, dx1, dy2, dx2) arrays.
    """
    is_diff = np.array([f.kind == "diff" for f in pool], dtype=np.uint8)
    cols = [np.array([getattr(f, name) for f in pool], dtype=np.int32)
            for name in ("channel", "dy1", "dx1", "dy2", "dx2")]
    return (is_diff, *cols)


def evaluate_features(
    stack: ChannelStack,
    xs: np.ndarray,
    ys: np.ndarray,
    table: tuple[np.ndarray, ...],
    out: np.ndarray,
    rows: np.ndarray | None = None,
) -> None:
    """Fill `out[rows, :]` with all pool features for patches at (xs, ys).

    xs, ys are image pixel coordinates of patch centers.  `out` must be a
    float32 array of shape (n_patches_total, n_features).
    """
    is_diff, ch, dy1, dx1, dy2, dx2 = table
    cx, cy = stack.center_coords(xs, ys)
    pad = stack.pad
    padded = stack.padded
    if rows is None:
        rows = np.arange(len(cx))
    for j in range(len(ch)):
        col = padded[ch[j], cy + dy1[j] + pad, cx + dx1[j] + pad]
        if is_diff[j]:
            col = col - padded[ch[j], cy + dy2[j] + pad, cx + dx2[j] + pad]
        out[rows, j] = col
