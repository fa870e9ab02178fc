"""Ground-truth processing: segmentation maps -> per-pixel edge labels.

The pipeline is: mark pixels where the segment id changes, fill small holes,
thin to single-pixel lines, link boundary pixels into ordered lists broken at
junctions, drop short protruding spurs, then label patch centers with the
signed distance / tangent orientation of the nearest boundary pixel.

Tangent angles are estimated by fitting a quadratic (in arc length) to the
list pixels within a +-6 pixel window, which smooths over rasterization
staircases while tolerating moderate curvature.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import thin as _thin

from .label_space import LabelSpaceConfig, bin_params, wrap_params

__all__ = [
    "EdgePixelGraph",
    "LabeledPatchSet",
    "extract_boundaries",
    "remove_spurs",
    "build_graph",
    "estimate_theta",
    "label_patch",
    "label_map",
    "valid_center_mask",
    "sample_training_set",
]

log = logging.getLogger(__name__)

# 8-connectivity neighbor offsets, (dy, dx)
_NBR8 = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    dtype=np.int32,
)


@dataclass
class EdgePixelGraph:
    """Thinned boundary mask plus linked pixel lists.

    lists hold (L, 2) arrays of (y, x) in path order and contain no junction
    pixels; each junction is assigned to a host list (the chain it terminates)
    for tangent lookups, or forms a singleton list when it has no chain
    neighbor.  is_cycle marks closed lists.
    """

    mask: np.ndarray
    lists: list[np.ndarray]
    is_cycle: np.ndarray
    junctions: np.ndarray  # (J, 2) of (y, x)
    junction_host: dict = field(default_factory=dict)  # (y,x) -> (list_idx, end_pos)
    _membership: np.ndarray | None = None  # (H, W, 2): list idx, position
    _thetas: list | None = None
    _edt: tuple | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def n_boundary_pixels(self) -> int:
        return int(self.mask.sum())

    def membership(self) -> np.ndarray:
        """(H, W, 2) int32 of (list index, position in list); -1 off-boundary."""
        if self._membership is None:
            mem = np.full(self.mask.shape + (2,), -1, dtype=np.int32)
            for li, pts in enumerate(self.lists):
                mem[pts[:, 0], pts[:, 1], 0] = li
                mem[pts[:, 0], pts[:, 1], 1] = np.arange(len(pts))
            for (y, x), (li, pos) in self.junction_host.items():
                mem[y, x, 0] = li
                mem[y, x, 1] = pos
            self._membership = mem
        return self._membership

    def edt(self) -> tuple[np.ndarray, np.ndarray]:
        """Distance to the nearest boundary pixel and its (y, x) indices."""
        if self._edt is None:
            if self.mask.any():
                dist, idx = ndimage.distance_transform_edt(~self.mask, return_indices=True)
            else:
                dist = np.full(self.mask.shape, np.inf)
                idx = np.zeros((2,) + self.mask.shape, dtype=np.int32)
            self._edt = (dist, idx)
        return self._edt


def _boundary_mask(seg: np.ndarray) -> np.ndarray:
    """Mark the higher-id pixel of every horizontal/vertical id transition.

    Marking a consistent side keeps the marked ring of a region free of the
    one-pixel jogs a fixed left/top rule produces where a contour changes
    octant, which would otherwise contaminate tangent estimates.
    """
    seg = np.asarray(seg)
    if seg.ndim != 2:
        raise ValueError("segmentation map must be 2-D")
    mask = np.zeros(seg.shape, dtype=bool)
    a, b = seg[:, :-1], seg[:, 1:]
    d = a != b
    mask[:, :-1] |= d & (a > b)
    mask[:, 1:] |= d & (b > a)
    a, b = seg[:-1, :], seg[1:, :]
    d = a != b
    mask[:-1, :] |= d & (a > b)
    mask[1:, :] |= d & (b > a)
    return mask


def _fill_small_holes(mask: np.ndarray, max_area: int) -> np.ndarray:
    if max_area <= 0:
        return mask
    holes = ndimage.binary_fill_holes(mask) & ~mask
    if not holes.any():
        return mask
    lab, n = ndimage.label(holes)
    if n == 0:
        return mask
    areas = np.bincount(lab.ravel())
    small = np.flatnonzero(areas[1:] <= max_area) + 1
    if len(small):
        mask = mask | np.isin(lab, small)
    return mask


_RING = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)],
    dtype=np.int32,
)


def _ring_arcs(ringset: np.ndarray) -> np.ndarray:
    """Label connected arcs of set pixels around an 8-ring (circular).

    Returns per-position arc ids, -1 where unset; the number of distinct arcs
    is the number of branches meeting at the center pixel.
    """
    labels = np.full(8, -1, dtype=np.int32)
    if not ringset.any():
        return labels
    arc = -1
    prev = bool(ringset[-1])
    for i in range(8):
        if ringset[i]:
            if not prev:
                arc += 1
            labels[i] = arc
        prev = bool(ringset[i])
    if arc == -1:  # no transition anywhere: the whole ring is one arc
        labels[ringset] = 0
        return labels
    if ringset[0] and ringset[7] and labels[0] != labels[7]:
        labels[labels == labels[7]] = labels[0]
    return labels


def _link(mask: np.ndarray) -> EdgePixelGraph:
    h, w = mask.shape
    pts = np.argwhere(mask)
    if len(pts) == 0:
        return EdgePixelGraph(mask, [], np.zeros(0, dtype=bool), np.zeros((0, 2), dtype=np.int32))

    idmap = np.full((h, w), -1, dtype=np.int32)
    idmap[pts[:, 0], pts[:, 1]] = np.arange(len(pts))

    # Ring neighborhoods under 8-connectivity, kept in circular order.
    ringids = np.full((len(pts), 8), -1, dtype=np.int32)
    for r, (dy, dx) in enumerate(_RING):
        yy, xx = pts[:, 0] + dy, pts[:, 1] + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        ringids[ok, r] = idmap[yy[ok], xx[ok]]
    nbrs: list[list[int]] = [[int(j) for j in row if j >= 0] for row in ringids]

    # A junction is a pixel where >= 3 distinct branches (connected arcs of
    # its neighbor ring) meet.  Raw neighbor counts over-trigger on the
    # pixels next to a T-center because of diagonal shortcuts.
    arc_labels = [_ring_arcs(row >= 0) for row in ringids]
    n_branches = np.array([lbl.max() + 1 for lbl in arc_labels])
    is_junction = n_branches >= 3
    junctions = pts[is_junction]

    # Chain adjacency: 8-adjacency among non-junction pixels, minus diagonal
    # shortcuts between pixels on different branches of a common junction
    # (those must connect through the junction, not around it).
    cut: set[tuple[int, int]] = set()
    for j in np.flatnonzero(is_junction):
        lbl = arc_labels[j]
        ring = ringids[j]
        for a in range(8):
            ia = ring[a]
            if ia < 0 or is_junction[ia]:
                continue
            for b in range(a + 1, 8):
                ib = ring[b]
                if ib < 0 or is_junction[ib] or lbl[a] == lbl[b]:
                    continue
                if max(abs(pts[ia, 0] - pts[ib, 0]), abs(pts[ia, 1] - pts[ib, 1])) == 1:
                    cut.add((min(int(ia), int(ib)), max(int(ia), int(ib))))

    chain_nbrs = [
        []
        if is_junction[i]
        else [j for j in nbrs[i] if not is_junction[j] and (min(i, j), max(i, j)) not in cut]
        for i in range(len(pts))
    ]

    visited = is_junction.copy()
    lists: list[np.ndarray] = []
    cycles: list[bool] = []

    def walk(start: int) -> list[int]:
        path = [start]
        visited[start] = True
        cur = start
        while True:
            nxt = [j for j in chain_nbrs[cur] if not visited[j]]
            if not nxt:
                return path
            cur = nxt[0]
            visited[cur] = True
            path.append(cur)

    order = np.lexsort((pts[:, 1], pts[:, 0]))
    # Open chains first, traced from endpoints.
    for i in order:
        if visited[i] or len(chain_nbrs[i]) > 1:
            continue
        path = walk(i)
        lists.append(pts[path])
        cycles.append(False)
    # Whatever is left are cycles.
    for i in order:
        if visited[i]:
            continue
        path = walk(i)
        lists.append(pts[path])
        cycles.append(True)

    # Host each junction on an adjacent chain endpoint when one exists.
    endpoint_of: dict[int, tuple[int, int]] = {}
    for li, pth in enumerate(lists):
        if cycles[li]:
            continue
        endpoint_of[idmap[pth[0, 0], pth[0, 1]]] = (li, 0)
        endpoint_of[idmap[pth[-1, 0], pth[-1, 1]]] = (li, len(pth) - 1)

    host: dict[tuple[int, int], tuple[int, int]] = {}
    for j in np.flatnonzero(is_junction):
        cands = sorted(n for n in nbrs[j] if n in endpoint_of)
        y, x = int(pts[j, 0]), int(pts[j, 1])
        if cands:
            host[(y, x)] = endpoint_of[cands[0]]
        else:
            lists.append(pts[j : j + 1])
            cycles.append(False)

    return EdgePixelGraph(mask, lists, np.array(cycles, dtype=bool), junctions, host)


def extract_boundaries(seg: np.ndarray, max_hole_area: int = 4) -> EdgePixelGraph:
    """Thinned, linked boundary graph of a segmentation map.

    Holes up to max_hole_area pixels in the raw transition mask are filled
    before thinning so double-marked transitions do not split into parallel
    lines.  A uniform map yields an empty graph.
    """
    mask = _boundary_mask(seg)
    if not mask.any():
        return _link(mask)
    mask = _fill_small_holes(mask, max_hole_area)
    mask = _thin(mask)
    return _link(mask)


def remove_spurs(g: EdgePixelGraph, min_len: int = 7) -> EdgePixelGraph:
    """Delete protruding lists shorter than min_len pixels, then re-link.

    A spur is an open list that terminates at a junction on exactly one end
    while its other end is free.  Lists of min_len pixels or longer, bridges
    between two junctions, cycles, and fully isolated lists are kept.
    """
    if not g.junctions.size:
        return g
    jset = {(int(y), int(x)) for y, x in g.junctions}

    def junction_adjacent(y: int, x: int) -> bool:
        return any((y + dy, x + dx) in jset for dy, dx in _NBR8)

    doomed: list[np.ndarray] = []
    for li, pth in enumerate(g.lists):
        if g.is_cycle[li] or len(pth) >= min_len:
            continue
        if len(pth) == 1:
            y, x = int(pth[0, 0]), int(pth[0, 1])
            # A 1-pixel stub hanging off a junction is a spur; an unhosted
            # junction singleton is not.
            if (y, x) not in jset and junction_adjacent(y, x):
                doomed.append(pth)
            continue
        at_j = [junction_adjacent(int(pth[e, 0]), int(pth[e, 1])) for e in (0, -1)]
        if at_j[0] != at_j[1]:
            doomed.append(pth)
    if not doomed:
        return g
    mask = g.mask.copy()
    for pth in doomed:
        mask[pth[:, 0], pth[:, 1]] = False
    return _link(mask)


def build_graph(seg: np.ndarray, min_spur_len: int = 7, max_hole_area: int = 4) -> EdgePixelGraph:
    """extract_boundaries followed by remove_spurs."""
    return remove_spurs(extract_boundaries(seg, max_hole_area), min_spur_len)


# ----------------------------------------------------------------------
# Tangent estimation
# ----------------------------------------------------------------------

_CHAIN_SMOOTH_RADIUS = 2


def _smooth_chain(xy: np.ndarray, is_cycle: bool, radius: int) -> np.ndarray:
    """Boxcar-smooth chain coordinates to suppress 1-px rasterization jogs."""
    L = len(xy)
    if radius <= 0 or L <= 2 * radius + 1:
        return xy
    k = 2 * radius + 1
    ker = np.ones(k) / k
    if is_cycle:
        ext = np.concatenate([xy[-radius:], xy, xy[:radius]])
    else:
        ext = np.concatenate([np.repeat(xy[:1], radius, 0), xy, np.repeat(xy[-1:], radius, 0)])
    return np.stack(
        [np.convolve(ext[:, 0], ker, "valid"), np.convolve(ext[:, 1], ker, "valid")], axis=-1
    )


def _list_thetas(pts: np.ndarray, is_cycle: bool, window: int) -> np.ndarray:
    """Tangent angle in (-pi/2, pi/2] at every pixel of one list."""
    L = len(pts)
    if L == 1:
        return np.zeros(1)
    xy = pts[:, ::-1].astype(np.float64)  # (x, y)
    if L == 2:
        v = xy[1] - xy[0]
        th = wrap_params(0.0, math.atan2(v[1], v[0]))[1]
        return np.full(L, th)
    xy = _smooth_chain(xy, is_cycle, _CHAIN_SMOOTH_RADIUS)

    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(steps)])

    win = min(window, (L - 1) // 2) if is_cycle else window
    offs = np.arange(-win, win + 1)
    idx = np.arange(L)[:, None] + offs[None, :]
    if is_cycle:
        total = s[-1] + np.linalg.norm(xy[0] - xy[-1])
        pos = offs[None, :].repeat(L, 0)
        t = s[idx % L] - s[:, None]
        t[pos > 0] %= total
        t[pos < 0] = -((-t[pos < 0]) % total)
        valid = np.ones_like(idx, dtype=bool)
        idx = idx % L
    else:
        valid = (idx >= 0) & (idx < L)
        idx = np.clip(idx, 0, L - 1)
        t = s[idx] - s[:, None]

    # Weighted quadratic fit of x(t), y(t); tangent = linear coefficient at t=0.
    wgt = valid.astype(np.float64)
    phi = np.stack([np.ones_like(t), t, t * t], axis=-1)  # (L, W, 3)
    A = np.einsum("lw,lwi,lwj->lij", wgt, phi, phi)
    bx = np.einsum("lw,lwi,lw->li", wgt, phi, xy[idx][..., 0])
    by = np.einsum("lw,lwi,lw->li", wgt, phi, xy[idx][..., 1])
    thetas = np.zeros(L)
    chord = xy[-1] - xy[0]
    for i in range(L):
        try:
            cx = np.linalg.solve(A[i], bx[i])
            cy = np.linalg.solve(A[i], by[i])
            tang = (cx[1], cy[1])
        except np.linalg.LinAlgError:
            tang = (chord[0], chord[1])
        if tang == (0.0, 0.0):
            tang = (chord[0], chord[1]) if (chord != 0).any() else (1.0, 0.0)
        thetas[i] = wrap_params(0.0, math.atan2(tang[1], tang[0]))[1]
    return thetas


def _theta_table(g: EdgePixelGraph, window: int = 6) -> list[np.ndarray]:
    if g._thetas is None or len(g._thetas) != len(g.lists):
        g._thetas = [
            _list_thetas(pts, bool(cyc), window) for pts, cyc in zip(g.lists, g.is_cycle)
        ]
    return g._thetas


def estimate_theta(g: EdgePixelGraph, q: tuple[int, int], window: int = 6) -> float:
    """Tangent angle at boundary pixel q = (y, x), in (-pi/2, pi/2].

    Junction pixels report the tangent of the chain end they terminate.
    Raises ValueError if q is not a boundary pixel.
    """
    y, x = int(q[0]), int(q[1])
    if not g.mask[y, x]:
        raise ValueError(f"({y}, {x}) is not a boundary pixel")
    li, pos = g.membership()[y, x]
    thetas = _theta_table(g, window)
    return float(thetas[li][pos])


def theta_image(g: EdgePixelGraph, window: int = 6) -> np.ndarray:
    """(H, W) array of tangent angles at boundary pixels, NaN elsewhere."""
    out = np.full(g.shape, np.nan)
    thetas = _theta_table(g, window)
    for li, pts in enumerate(g.lists):
        out[pts[:, 0], pts[:, 1]] = thetas[li]
    for (y, x), (li, pos) in g.junction_host.items():
        out[y, x] = thetas[li][pos]
    return out


# ----------------------------------------------------------------------
# Patch labeling
# ----------------------------------------------------------------------

def _signed_distance(cx, cy, qx, qy, theta):
    """Distance to (qx, qy) signed by the side of the oriented tangent line.

    Positive when the center sits on the positive side of the tangent
    direction (cross(u, c - q) > 0 in image coordinates, y down); ties at
    cross == 0 take the positive sign.
    """
    vx = np.asarray(cx, dtype=np.float64) - qx
    vy = np.asarray(cy, dtype=np.float64) - qy
    ux, uy = np.cos(theta), np.sin(theta)
    cross = ux * vy - uy * vx
    dist = np.hypot(vx, vy)
    return np.where(cross < 0, -dist, dist)


def label_patch(g: EdgePixelGraph, center_xy: tuple[int, int], cfg: LabelSpaceConfig) -> int:
    """Edge label for the patch centered at image pixel (x, y).

    Background (0) when the nearest boundary pixel is patch_size/2 or farther
    away; otherwise the binned (signed distance, tangent) of that pixel.
    """
    x, y = int(center_xy[0]), int(center_xy[1])
    dist, idx = g.edt()
    if dist[y, x] >= cfg.max_dist:
        return 0
    qy, qx = int(idx[0, y, x]), int(idx[1, y, x])
    theta = estimate_theta(g, (qy, qx))
    d = float(_signed_distance(x, y, qx, qy, theta))
    return bin_params(d, theta, cfg)


def _bin_params_arrays(d: np.ndarray, theta: np.ndarray, cfg: LabelSpaceConfig) -> np.ndarray:
    """Vectorized bin_params for already-wrapped theta in (-pi/2, pi/2]."""
    m, n = cfg.n_orient_bins, cfg.n_dist_bins
    u = (np.pi / 2.0 - theta) / cfg.orient_step
    j = np.ceil(u - 0.5).astype(np.int64)
    flip = j >= m
    j = np.where(flip, 0, j)
    d = np.where(flip, -d, d)
    h = (n - 1) // 2
    c = np.floor(np.abs(d) + 0.5) * np.sign(d)
    c = np.clip(c, -h, h).astype(np.int64)
    return (1 + j * n + (c + h)).astype(np.int32)


def label_map(g: EdgePixelGraph, cfg: LabelSpaceConfig) -> np.ndarray:
    """(H, W) int32 edge label for a patch centered at every pixel.

    Patches that would extend past the image are still labeled; callers mask
    them out with valid_center_mask when sampling.
    """
    dist, idx = g.edt()
    out = np.zeros(g.shape, dtype=np.int32)
    near = dist < cfg.max_dist
    if not near.any():
        return out
    ys, xs = np.nonzero(near)
    qy, qx = idx[0, ys, xs], idx[1, ys, xs]
    thetas = theta_image(g)[qy, qx]
    d = _signed_distance(xs, ys, qx, qy, thetas)
    out[ys, xs] = _bin_params_arrays(d, thetas, cfg)
    return out


def window_id_counts(seg: np.ndarray, patch: int) -> np.ndarray:
    """Distinct segment ids inside every patch-sized window.

    Returns an (H-patch+1, W-patch+1) array aligned with window top-left
    corners.
    """
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(seg, (patch, patch))
    flat = win.reshape(win.shape[0], win.shape[1], -1)
    srt = np.sort(flat, axis=-1)
    return 1 + (np.diff(srt, axis=-1) != 0).sum(axis=-1)


def valid_center_mask(seg: np.ndarray, cfg: LabelSpaceConfig, max_segments: int = 2) -> np.ndarray:
    """True where a patch center keeps the window inside the image and the
    window spans at most max_segments distinct ids."""
    p = cfg.patch_size
    half = p // 2
    h, w = seg.shape
    out = np.zeros((h, w), dtype=bool)
    if h < p or w < p:
        return out
    counts = window_id_counts(seg, p)
    out[half : h - half + 1, half : w - half + 1] = counts <= max_segments
    return out


# ----------------------------------------------------------------------
# Balanced patch sampling
# ----------------------------------------------------------------------

@dataclass
class LabeledPatchSet:
    """Balanced set of training patches.

    Parallel arrays: item (dataset image index), annot (annotation index
    within the image), x, y (patch center), label (0..K).
    """

    item: np.ndarray
    annot: np.ndarray
    x: np.ndarray
    y: np.ndarray
    label: np.ndarray
    n_per_class: int
    n_classes: int

    def __len__(self) -> int:
        return len(self.label)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.label, minlength=self.n_classes)


def sample_training_set(
    seg_sets: list[list[np.ndarray]],
    cfg: LabelSpaceConfig,
    n_per_class: int,
    seed: int,
    max_draw_factor: int = 400,
) -> LabeledPatchSet:
    """Sample patch centers uniformly and balance counts across classes.

    seg_sets[i] holds the segmentation maps (one per annotator) of image i.
    Patches whose window covers more than two segment ids are rejected.  If
    some class cannot reach n_per_class within the draw budget, all classes
    are truncated to the achievable minimum (with a warning).
    """
    rng = np.random.default_rng(seed)
    labelmaps: list[list[np.ndarray]] = []
    validmaps: list[list[np.ndarray]] = []
    rejected = 0
    considered = 0
    for segs in seg_sets:
        lml, vml = [], []
        for seg in segs:
            g = build_graph(seg)
            lml.append(label_map(g, cfg))
            vm = valid_center_mask(seg, cfg)
            vml.append(vm)
        labelmaps.append(lml)
        validmaps.append(vml)

    n_classes = cfg.n_classes
    buckets: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n_classes)]
    need = np.full(n_classes, n_per_class, dtype=np.int64)
    budget = max(200_000, max_draw_factor * n_per_class * n_classes // 10)
    batch = 20_000
    drawn = 0
    while drawn < budget and (need > 0).any():
        items = rng.integers(0, len(seg_sets), size=batch)
        # Per-draw annotator and location, uniform within each image.
        for it in np.unique(items):
            rows = np.flatnonzero(items == it)
            segs = seg_sets[it]
            ann = rng.integers(0, len(segs), size=len(rows))
            h, w = segs[0].shape
            xs = rng.integers(0, w, size=len(rows))
            ys = rng.integers(0, h, size=len(rows))
            for a in np.unique(ann):
                sel = ann == a
                vx, vy = xs[sel], ys[sel]
                ok = validmaps[it][a][vy, vx]
                considered += len(vx)
                rejected += int((~ok).sum())
                vx, vy = vx[ok], vy[ok]
                labs = labelmaps[it][a][vy, vx]
                for xx, yy, lb in zip(vx, vy, labs):
                    if need[lb] > 0:
                        buckets[lb].append((it, a, int(xx), int(yy)))
                        need[lb] -= 1
        drawn += batch

    counts = np.array([len(b) for b in buckets])
    present = counts > 0
    if not present.any():
        raise ValueError("no valid training patches found")
    floor = int(counts[present].min())
    if floor < n_per_class:
        missing = np.flatnonzero(~present)
        log.warning(
            "patch sampling exhausted: balancing to %d per class (requested %d); "
            "%d classes have no examples",
            floor, n_per_class, len(missing),
        )
    take = min(floor, n_per_class)

    rows = []
    for lb in range(n_classes):
        rows.extend((it, a, x, y, lb) for it, a, x, y in buckets[lb][:take])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    if considered:
        log.info("patch sampling: %.1f%% of draws rejected (window >2 segments or border)",
                 100.0 * rejected / considered)
    return LabeledPatchSet(
        item=arr[:, 0].astype(np.int32),
        annot=arr[:, 1].astype(np.int32),
        x=arr[:, 2].astype(np.int32),
        y=arr[:, 3].astype(np.int32),
        label=arr[:, 4].astype(np.int32),
        n_per_class=take,
        n_classes=n_classes,
    )
