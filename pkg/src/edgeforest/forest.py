"""Randomized decision forest over the edge-label space.

Trees are grown greedily on bootstrap samples with randomized node
optimization: each node draws a random subset of pool features and a fixed
number of quantile thresholds per feature, then keeps the pair minimizing the
weighted Gini impurity of the children.  Leaves store the unsmoothed
empirical class histogram.

Ensemble outputs can be fused by averaging the leaf posteriors or by one
argmax vote per tree; voting needs only the leaf argmax, so a forest can be
saved in a compact argmax-only form that cannot serve averaging.
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import (
    N_CHANNELS,
    ChannelStack,
    enumerate_feature_pool,
    evaluate_features,
    feature_table,
)
from .groundtruth import LabeledPatchSet
from .label_space import LabelSpaceConfig

__all__ = [
    "TrainParams",
    "Tree",
    "Forest",
    "train_tree",
    "train_forest",
    "predict_average",
    "predict_vote",
    "predict_points",
    "predict_image",
    "save_forest",
    "load_forest",
    "ModelFormatError",
    "ConfigMismatchError",
]

log = logging.getLogger(__name__)

MAGIC = b"EDGEFRST"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Corrupt, truncated, or wrong-version model file."""


class ConfigMismatchError(Exception):
    """Model was trained under an incompatible configuration."""


@dataclass(frozen=True)
class TrainParams:
    """Forest training hyperparameters.

    n_features_per_node == 0 selects round(sqrt(pool size)) at runtime.
    bootstrap_size == 0 uses the full training-set size.
    """

    n_trees: int = 8
    max_depth: int = 64
    min_leaf_count: int = 8
    n_features_per_node: int = 0
    n_thresholds_per_feature: int = 8
    n_single: int = 256
    n_pairdiff: int = 256
    bootstrap_size: int = 0

    def mtry(self, pool_size: int) -> int:
        if self.n_features_per_node > 0:
            return min(self.n_features_per_node, pool_size)
        return max(1, int(round(np.sqrt(pool_size))))


@dataclass
class Tree:
    """Struct-of-arrays binary tree; nodes are stored in preorder.

    Internal node i tests feature (kind/channel/offsets)[i] < threshold[i];
    left[i] == -1 marks a leaf whose histogram lives at row leaf[i] of
    posteriors (or argmax[leaf[i]] in argmax-only trees).
    """

    kind: np.ndarray  # u8: 0 single, 1 diff
    channel: np.ndarray  # i16
    offsets: np.ndarray  # i8 (n, 4): dy1 dx1 dy2 dx2
    threshold: np.ndarray  # f32
    left: np.ndarray  # i32
    right: np.ndarray  # i32
    leaf: np.ndarray  # i32 (leaf row, -1 for internal)
    leaf_counts: np.ndarray  # u32 (n_leaves,)
    posteriors: np.ndarray | None  # f32 (n_leaves, K+1)
    leaf_argmax: np.ndarray  # u16 (n_leaves,)

    @property
    def n_nodes(self) -> int:
        return len(self.threshold)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_counts)

    def node_bytes(self) -> int:
        per_node = 1 + 2 + 4 + 4 + 4 + 4 + 4  # kind,channel,offsets,thr,left,right,leaf
        return self.n_nodes * per_node

    def leaf_bytes(self) -> int:
        if self.posteriors is not None:
            return self.posteriors.nbytes + self.leaf_counts.nbytes
        return self.leaf_argmax.nbytes + self.leaf_counts.nbytes


@dataclass
class Forest:
    trees: list[Tree]
    label_cfg: LabelSpaceConfig
    params: TrainParams
    n_channels: int = N_CHANNELS
    seeds: list[int] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_classes(self) -> int:
        return self.label_cfg.n_classes

    @property
    def argmax_only(self) -> bool:
        return any(t.posteriors is None for t in self.trees)

    def model_size_bytes(self) -> int:
        return sum(t.node_bytes() + t.leaf_bytes() for t in self.trees)

    def require_compatible(self, cfg: LabelSpaceConfig) -> None:
        if cfg != self.label_cfg:
            raise ConfigMismatchError(
                f"model label space {self.label_cfg} != pipeline {cfg}"
            )


# ----------------------------------------------------------------------
# Split search
# ----------------------------------------------------------------------

def split_candidates(values: np.ndarray, n_thresholds: int) -> np.ndarray:
    """Interior quantile thresholds for one feature at one node.

    Linear-interpolated quantiles at (j+1)/(T+1), computed from one sort
    (equivalent to np.quantile's default method, much less overhead).
    """
    qs = (np.arange(n_thresholds) + 1.0) / (n_thresholds + 1.0)
    v = np.sort(values.astype(np.float64))
    pos = qs * (len(v) - 1)
    lo = pos.astype(np.int64)
    hi = np.minimum(lo + 1, len(v) - 1)
    frac = pos - lo
    t = v[lo] * (1 - frac) + v[hi] * frac
    return np.unique(t)


def weighted_gini_counts(left_counts: np.ndarray, right_counts: np.ndarray) -> float:
    """n * weighted Gini impurity of a split, from integer class counts."""
    nl = left_counts.sum()
    nr = right_counts.sum()
    score = 0.0
    if nl > 0:
        score += nl - float((left_counts.astype(np.int64) ** 2).sum()) / nl
    if nr > 0:
        score += nr - float((right_counts.astype(np.int64) ** 2).sum()) / nr
    return float(score)


def best_split(
    X: np.ndarray,
    y: np.ndarray,
    rows: np.ndarray,
    feat_ids: np.ndarray,
    n_thresholds: int,
    min_leaf: int,
    n_classes: int,
):
    """Best (feature, threshold) over the candidate grid, or None.

    Candidates are scanned in (feature order, ascending threshold) order and
    the first strict minimum wins, so results are deterministic.  Splits
    leaving a child below min_leaf are skipped.
    """
    n = len(rows)
    yn = y[rows]
    best = None  # (score, feat_id, threshold)
    for fi in feat_ids:
        v = X[rows, fi]
        ts = split_candidates(v, n_thresholds)
        if len(ts) == 0:
            continue
        # Bucket j holds samples with #(t <= v) == j, so the `v < t_j` side
        # of threshold t_j is exactly buckets 0..j.
        idx = np.searchsorted(ts, v, side="right")
        hist = np.bincount(idx * n_classes + yn, minlength=(len(ts) + 1) * n_classes)
        hist = hist.reshape(len(ts) + 1, n_classes)
        cum = np.cumsum(hist, axis=0)
        total = cum[-1]
        for j in range(len(ts)):
            lc = cum[j]
            nl = int(lc.sum())
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            score = weighted_gini_counts(lc, total - lc)
            if best is None or score < best[0]:
                best = (score, int(fi), float(ts[j]))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, pool, rng, params: TrainParams, n_classes: int) -> Tree:
    kind, channel, offsets, threshold = [], [], [], []
    left, right, leaf = [], [], []
    leaf_counts: list[int] = []
    posteriors: list[np.ndarray] = []
    pool_size = len(pool)
    mtry = params.mtry(pool_size)

    def add_leaf(rows: np.ndarray) -> int:
        i = len(threshold)
        kind.append(0)
        channel.append(0)
        offsets.append((0, 0, 0, 0))
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(len(leaf_counts))
        counts = np.bincount(y[rows], minlength=n_classes).astype(np.float64)
        leaf_counts.append(len(rows))
        posteriors.append((counts / counts.sum()).astype(np.float32))
        return i

    def grow(rows: np.ndarray, depth: int) -> int:
        n = len(rows)
        if n == 0:
            raise RuntimeError("empty node; min_leaf_count should prevent this")
        pure = (y[rows] == y[rows[0]]).all()
        if depth >= params.max_depth or n < 2 * params.min_leaf_count or pure:
            return add_leaf(rows)
        feat_ids = rng.choice(pool_size, size=mtry, replace=False)
        found = best_split(
            X, y, rows, feat_ids, params.n_thresholds_per_feature,
            params.min_leaf_count, n_classes,
        )
        if found is None:
            return add_leaf(rows)
        _, fi, thr = found
        f = pool[fi]
        i = len(threshold)
        kind.append(1 if f.kind == "diff" else 0)
        channel.append(f.channel)
        offsets.append((f.dy1, f.dx1, f.dy2, f.dx2))
        threshold.append(thr)
        left.append(0)
        right.append(0)
        leaf.append(-1)
        go_left = X[rows, fi] < thr
        left[i] = grow(rows[go_left], depth + 1)
        right[i] = grow(rows[~go_left], depth + 1)
        return i

    grow(np.arange(len(y)), 0)
    post = np.stack(posteriors) if posteriors else np.zeros((0, n_classes), np.float32)
    return Tree(
        kind=np.array(kind, dtype=np.uint8),
        channel=np.array(channel, dtype=np.int16),
        offsets=np.array(offsets, dtype=np.int8).reshape(-1, 4),
        threshold=np.array(threshold, dtype=np.float32),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        leaf=np.array(leaf, dtype=np.int32),
        leaf_counts=np.array(leaf_counts, dtype=np.uint32),
        posteriors=post,
        leaf_argmax=post.argmax(axis=1).astype(np.uint16),
    )


def _patch_features(
    patches: LabeledPatchSet,
    stacks: list[ChannelStack],
    rows: np.ndarray,
    pool,
) -> np.ndarray:
    """Feature matrix for a subset of patches, grouped by source image."""
    table = feature_table(pool)
    X = np.empty((len(rows), len(pool)), dtype=np.float32)
    items = patches.item[rows]
    for it in np.unique(items):
        sub = np.flatnonzero(items == it)
        evaluate_features(
            stacks[it], patches.x[rows[sub]], patches.y[rows[sub]], table, X, sub
        )
    return X


def train_tree(
    patches: LabeledPatchSet,
    stacks: list[ChannelStack],
    cfg: LabelSpaceConfig,
    params: TrainParams,
    seed: int,
) -> Tree:
    """Grow one tree on its own bootstrap sample, deterministically per seed."""
    rng = np.random.default_rng(seed)
    n = len(patches)
    size = params.bootstrap_size or n
    if size > n:
        log.warning("bootstrap_size %d exceeds data size %d; using %d", size, n, n)
        size = n
    rows = rng.integers(0, n, size=size)
    pool = enumerate_feature_pool(cfg, params.n_single, params.n_pairdiff, seed=seed)
    X = _patch_features(patches, stacks, rows, pool)
    y = patches.label[rows]
    return _grow_tree(X, y, pool, rng, params, cfg.n_classes)


def train_forest(
    patches: LabeledPatchSet,
    stacks: list[ChannelStack],
    cfg: LabelSpaceConfig,
    params: TrainParams,
    seed: int = 0,
    seeds: list[int] | None = None,
    threads: int = 1,
) -> Forest:
    """Train params.n_trees trees on independent bootstrap samples.

    Per-tree seeds default to seed*1000003 + tree index; passing an explicit
    seeds list (e.g. two equal seeds) reproduces identical trees.
    """
    if seeds is None:
        seeds = [seed * 1_000_003 + t for t in range(params.n_trees)]
    if len(seeds) != params.n_trees:
        raise ValueError("need one seed per tree")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            trees = list(ex.map(lambda s: train_tree(patches, stacks, cfg, params, s), seeds))
    else:
        trees = [train_tree(patches, stacks, cfg, params, s) for s in seeds]
    return Forest(trees=trees, label_cfg=cfg, params=params, seeds=list(seeds))


# ----------------------------------------------------------------------
# Prediction
# ----------------------------------------------------------------------

def _route(tree: Tree, padded: np.ndarray, pad: int, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
    """Leaf row for each point (cx, cy) in channel coordinates."""
    node = np.zeros(len(cx), dtype=np.int32)
    while True:
        internal = tree.left[node] >= 0
        if not internal.any():
            break
        sel = np.flatnonzero(internal)
        nd = node[sel]
        off = tree.offsets[nd]
        ch = tree.channel[nd]
        v = padded[ch, cy[sel] + off[:, 0] + pad, cx[sel] + off[:, 1] + pad]
        d = tree.kind[nd] == 1
        if d.any():
            v2 = padded[ch[d], cy[sel[d]] + off[d, 2] + pad, cx[sel[d]] + off[d, 3] + pad]
            v[d] -= v2
        node[sel] = np.where(v < tree.threshold[nd], tree.left[nd], tree.right[nd])
    return tree.leaf[node]


def predict_points(
    forest: Forest, stack: ChannelStack, xs: np.ndarray, ys: np.ndarray, mode: str = "average"
) -> np.ndarray:
    """Score vectors for patches centered at image pixels (xs, ys).

    mode "average" returns the mean of leaf posteriors (Kx+1 simplex);
    mode "vote" gives each tree one argmax vote (ties to the smallest label).
    """
    if mode not in ("average", "vote"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "average" and forest.argmax_only:
        raise ConfigMismatchError("argmax-only model cannot serve averaging")
    cx, cy = stack.center_coords(np.asarray(xs), np.asarray(ys))
    out = np.zeros((len(cx), forest.n_classes), dtype=np.float32)
    for tree in forest.trees:
        rows = _route(tree, stack.padded, stack.pad, cx, cy)
        if mode == "average":
            out += tree.posteriors[rows]
        else:
            np.add.at(out, (np.arange(len(rows)), tree.leaf_argmax[rows].astype(np.int64)), 1.0)
    out /= forest.n_trees
    return out


def predict_average(forest: Forest, stack: ChannelStack, center_xy) -> np.ndarray:
    """Mean-of-posteriors score vector for one patch."""
    return predict_points(forest, stack, [center_xy[0]], [center_xy[1]], "average")[0]


def predict_vote(forest: Forest, stack: ChannelStack, center_xy) -> np.ndarray:
    """One argmax vote per tree for one patch."""
    return predict_points(forest, stack, [center_xy[0]], [center_xy[1]], "vote")[0]


def predict_image(forest: Forest, stack: ChannelStack, mode: str = "average") -> np.ndarray:
    """Dense (H, W, K+1) score volume, one vector per image pixel.

    Channels live at half resolution, so the 2x2 pixel block over one channel
    cell shares a prediction; the volume is computed once per cell and
    expanded.
    """
    if mode == "average" and forest.argmax_only:
        raise ConfigMismatchError("argmax-only model cannot serve averaging")
    h, w = stack.image_shape
    h2, w2 = stack.shape
    cyg, cxg = np.mgrid[0:h2, 0:w2]
    cx, cy = cxg.ravel(), cyg.ravel()
    vol = np.zeros((h2 * w2, forest.n_classes), dtype=np.float32)
    for tree in forest.trees:
        rows = _route(tree, stack.padded, stack.pad, cx, cy)
        if mode == "average":
            vol += tree.posteriors[rows]
        else:
            np.add.at(vol, (np.arange(len(rows)), tree.leaf_argmax[rows].astype(np.int64)), 1.0)
    vol /= forest.n_trees
    vol = vol.reshape(h2, w2, -1)
    full = np.repeat(np.repeat(vol, 2, axis=0), 2, axis=1)
    return full[:h, :w]


# ----------------------------------------------------------------------
# Serialization (versioned little-endian binary; layout in docs/formats.md)
# ----------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIIIIIIIIIB3x")


def save_forest(forest: Forest, path, argmax_only: bool = False) -> None:
    """Write the model; argmax_only drops leaf posteriors (vote-only model)."""
    p = forest.params
    cfg = forest.label_cfg
    mode = 1 if (argmax_only or forest.argmax_only) else 0
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC, FORMAT_VERSION,
                cfg.patch_size, cfg.n_dist_bins, cfg.n_orient_bins,
                forest.n_channels, forest.n_trees,
                p.max_depth, p.min_leaf_count, p.n_features_per_node,
                p.n_thresholds_per_feature, p.n_single, p.n_pairdiff,
                mode,
            )
        )
        for t, tree in enumerate(forest.trees):
            seed = forest.seeds[t] if t < len(forest.seeds) else 0
            fh.write(struct.pack("<qII", seed, tree.n_nodes, tree.n_leaves))
            fh.write(tree.kind.astype("<u1").tobytes())
            fh.write(tree.channel.astype("<i2").tobytes())
            fh.write(tree.offsets.astype("<i1").tobytes())
            fh.write(tree.threshold.astype("<f4").tobytes())
            fh.write(tree.left.astype("<i4").tobytes())
            fh.write(tree.right.astype("<i4").tobytes())
            fh.write(tree.leaf.astype("<i4").tobytes())
            fh.write(tree.leaf_counts.astype("<u4").tobytes())
            if mode == 1:
                fh.write(tree.leaf_argmax.astype("<u2").tobytes())
            else:
                fh.write(tree.posteriors.astype("<f4").tobytes())


def _read_exact(fh, nbytes: int) -> bytes:
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise ModelFormatError("truncated model file")
    return buf


def load_forest(path) -> Forest:
    """Read a model written by save_forest; refuses other versions."""
    with open(path, "rb") as fh:
        try:
            head = _HEADER.unpack(_read_exact(fh, _HEADER.size))
        except struct.error as e:
            raise ModelFormatError(f"bad header: {e}") from e
        (magic, version, patch, ndist, norient, n_channels, n_trees,
         max_depth, min_leaf, mtry, nthr, n_single, n_pair, mode) = head
        if magic != MAGIC:
            raise ModelFormatError("not a forest model file")
        if version != FORMAT_VERSION:
            raise ModelFormatError(
                f"model format version {version} unsupported (expected {FORMAT_VERSION})"
            )
        cfg = LabelSpaceConfig(patch, ndist, norient)
        params = TrainParams(
            n_trees=n_trees, max_depth=max_depth, min_leaf_count=min_leaf,
            n_features_per_node=mtry, n_thresholds_per_feature=nthr,
            n_single=n_single, n_pairdiff=n_pair,
        )
        trees, seeds = [], []
        for _ in range(n_trees):
            seed, n_nodes, n_leaves = struct.unpack("<qII", _read_exact(fh, 16))
            seeds.append(seed)

            def arr(dtype, count):
                raw = _read_exact(fh, np.dtype(dtype).itemsize * count)
                return np.frombuffer(raw, dtype=dtype).copy()

            kind = arr("<u1", n_nodes)
            channel = arr("<i2", n_nodes)
            offsets = arr("<i1", n_nodes * 4).reshape(n_nodes, 4)
            threshold = arr("<f4", n_nodes)
            left = arr("<i4", n_nodes)
            right = arr("<i4", n_nodes)
            leaf = arr("<i4", n_nodes)
            counts = arr("<u4", n_leaves)
            if mode == 1:
                amax = arr("<u2", n_leaves)
                post = None
            else:
                post = arr("<f4", n_leaves * cfg.n_classes).reshape(n_leaves, cfg.n_classes)
                amax = post.argmax(axis=1).astype(np.uint16)
            trees.append(
                Tree(kind, channel, offsets, threshold, left, right, leaf, counts, post, amax)
            )
        extra = fh.read(1)
        if extra:
            raise ModelFormatError("trailing bytes after last tree")
    return Forest(trees=trees, label_cfg=cfg, params=params, n_channels=n_channels, seeds=seeds)
