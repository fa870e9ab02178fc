"""Boundary precision-recall benchmark and output-histogram normalization.

Detected boundary pixels are matched one-to-one against each annotator's
ground-truth pixels within a radius proportional to the image diagonal,
using an exact minimum-cost assignment (maximum cardinality first, then
minimum total distance).  Counts aggregate into precision/recall curves with
three summaries: ODS (best fixed threshold), OIS (best per-image threshold),
and AP (step integral of precision over recall).

Thresholds are order statistics of the pooled detection values, so every
score produced by the sweep is exactly invariant under strictly increasing
transforms of the detector output; a fixed value grid would not be.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

__all__ = [
    "MatchConfig",
    "MatchCounts",
    "PRCurve",
    "match_boundaries",
    "evaluate",
    "histogram_normalize",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MatchConfig:
    """Benchmark protocol parameters.

    max_dist_frac scales the match radius by the image diagonal; 99
    thresholds replicates the standard boundary-benchmark sweep density.
    """

    max_dist_frac: float = 0.0075
    n_thresholds: int = 99
    ap_left_extension: bool = False

    def __post_init__(self):
        if self.max_dist_frac <= 0:
            raise ValueError("max_dist_frac must be positive")
        if self.n_thresholds < 1:
            raise ValueError("need at least one threshold")

    def radius(self, shape: tuple[int, int]) -> float:
        return self.max_dist_frac * float(np.hypot(*shape))


@dataclass
class MatchCounts:
    """Correspondence tallies for one detection map against all annotators."""

    tp_det: int  # detected pixels matched to at least one annotator
    n_det: int
    tp_gt: int  # ground-truth pixels matched, summed over annotators
    n_gt: int

    @property
    def fp(self) -> int:
        return self.n_det - self.tp_det

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp_gt

    def __iadd__(self, other: "MatchCounts"):
        self.tp_det += other.tp_det
        self.n_det += other.n_det
        self.tp_gt += other.tp_gt
        self.n_gt += other.n_gt
        return self


def _candidate_pairs(det: np.ndarray, gt: np.ndarray, r: float, gt_tree: cKDTree | None = None):
    """Index pairs (i det, j gt) with pixel distance <= r."""
    tree = gt_tree if gt_tree is not None else cKDTree(gt)
    dm = cKDTree(det).sparse_distance_matrix(tree, r, output_type="coo_matrix")
    return dm.row.astype(np.int64), dm.col.astype(np.int64), dm.data


def _match_one(
    det: np.ndarray, gt: np.ndarray, r: float, gt_tree: cKDTree | None = None
) -> tuple[np.ndarray, int]:
    """Exact min-cost assignment of detected to gt pixels within radius r.

    Returns (matched detected mask, number of matched gt pixels).  The
    bipartite graph splits into small connected components (the radius is a
    few pixels), each solved exactly; a large penalty on over-radius pairs
    makes the solver maximize valid matches before minimizing distance.
    """
    nd, ng = len(det), len(gt)
    matched_det = np.zeros(nd, dtype=bool)
    if nd == 0 or ng == 0:
        return matched_det, 0
    pi, pj, dist = _candidate_pairs(det, gt, r, gt_tree)
    if len(pi) == 0:
        return matched_det, 0

    # Union-find over det nodes (0..nd-1) and gt nodes (nd..nd+ng-1).
    parent = np.arange(nd + ng)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(pi, pj):
        ra, rb = find(int(i)), find(int(nd + j))
        if ra != rb:
            parent[ra] = rb

    comp_of_pair = np.fromiter((find(int(i)) for i in pi), dtype=np.int64, count=len(pi))
    order = np.argsort(comp_of_pair, kind="stable")
    comp_s, pi_s, pj_s, dist_s = comp_of_pair[order], pi[order], pj[order], dist[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(comp_s)) + 1, [len(comp_s)]])

    matched_gt = 0
    for s, e in zip(starts[:-1], starts[1:]):
        if e - s == 1:
            # isolated pair: its endpoints occur in no other pair
            matched_det[pi_s[s]] = True
            matched_gt += 1
            continue
        di = np.unique(pi_s[s:e])
        gj = np.unique(pj_s[s:e])
        big = (r + 1.0) * (len(di) + len(gj) + 1)
        cost = np.full((len(di), len(gj)), big)
        ii = np.searchsorted(di, pi_s[s:e])
        jj = np.searchsorted(gj, pj_s[s:e])
        cost[ii, jj] = dist_s[s:e]
        rows, cols = linear_sum_assignment(cost)
        ok = cost[rows, cols] <= r
        matched_det[di[rows[ok]]] = True
        matched_gt += int(ok.sum())
    return matched_det, matched_gt


def match_boundaries(
    detected: np.ndarray,
    groundtruths: list[np.ndarray],
    cfg: MatchConfig = MatchConfig(),
    _gt_cache: list | None = None,
) -> MatchCounts:
    """Match a thinned binary detection map against every annotator.

    A detected pixel counts as one true positive if it matches any
    annotator; each annotator's unmatched pixels accumulate false negatives.
    _gt_cache carries precomputed (pixels, KD-tree) pairs across a sweep.
    """
    det_px = np.argwhere(detected.astype(bool))
    r = cfg.radius(detected.shape)
    matched_any = np.zeros(len(det_px), dtype=bool)
    tp_gt = 0
    n_gt = 0
    if _gt_cache is None:
        _gt_cache = [_gt_entry(gt) for gt in groundtruths]
    for gt_px, tree in _gt_cache:
        n_gt += len(gt_px)
        m_det, m_gt = _match_one(det_px, gt_px, r, tree)
        matched_any |= m_det
        tp_gt += m_gt
    return MatchCounts(int(matched_any.sum()), len(det_px), tp_gt, n_gt)


def _gt_entry(gt: np.ndarray):
    px = np.argwhere(gt.astype(bool))
    return px, (cKDTree(px) if len(px) else None)


# ----------------------------------------------------------------------
# PR curve over the threshold sweep
# ----------------------------------------------------------------------

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    fmeasure: np.ndarray
    ods_threshold: float
    ods_precision: float
    ods_recall: float
    ods: float
    ois: float
    ap: float
    per_image_best: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "ODS": round(float(self.ods), 6),
            "OIS": round(float(self.ois), 6),
            "AP": round(float(self.ap), 6),
            "ods_threshold": float(self.ods_threshold),
        }

    def as_table(self) -> str:
        lines = ["threshold\trecall\tprecision\tfmeasure"]
        for t, r, p, f in zip(self.thresholds, self.recall, self.precision, self.fmeasure):
            lines.append(f"{t:.6g}\t{r:.6f}\t{p:.6f}\t{f:.6f}")
        return "\n".join(lines) + "\n"


def _prf(tp_det, n_det, tp_gt, n_gt):
    p = tp_det / n_det if n_det > 0 else 1.0
    r = tp_gt / n_gt if n_gt > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _order_stat_thresholds(maps: list[np.ndarray], n: int) -> np.ndarray:
    """Order-statistic threshold grid over pooled above-floor values.

    Using observed values (never interpolating between them) keeps the
    binarizations, and hence every benchmark number, exactly invariant under
    strictly increasing transforms of the detector output.
    """
    floor = min(float(m.min()) for m in maps)
    pooled = np.concatenate([m[m > floor].ravel() for m in maps])
    if pooled.size == 0:
        return np.array([np.inf])
    pooled.sort()
    qs = (np.arange(n) + 1.0) / (n + 1.0)
    idx = np.minimum(np.ceil(qs * pooled.size).astype(np.int64), pooled.size) - 1
    idx = np.maximum(idx, 0)
    return np.unique(pooled[idx])


def evaluate(
    detections: list[np.ndarray],
    groundtruths: list[list[np.ndarray]],
    cfg: MatchConfig = MatchConfig(),
) -> PRCurve:
    """Sweep thresholds over a detection set and aggregate PR statistics.

    detections are real-valued thinned maps (one per image); groundtruths
    holds the thinned binary annotator maps of each image.  Inputs are
    assumed pre-thinned: thresholding a thin map cannot create thick lines.
    """
    if len(detections) != len(groundtruths) or not detections:
        raise ValueError("detections and groundtruths must pair up, nonempty")
    for det, gts in zip(detections, groundtruths):
        for g in gts:
            if g.shape != det.shape:
                raise ValueError("detection/ground-truth shape mismatch")

    thresholds = _order_stat_thresholds(detections, cfg.n_thresholds)
    nt = len(thresholds)
    per_image = []
    for det, gts in zip(detections, groundtruths):
        cache = [_gt_entry(g) for g in gts]
        counts = []
        for t in thresholds:
            counts.append(match_boundaries(det >= t, gts, cfg, _gt_cache=cache))
        per_image.append(counts)

    agg = [MatchCounts(0, 0, 0, 0) for _ in range(nt)]
    for counts in per_image:
        for i, c in enumerate(counts):
            agg[i] += MatchCounts(c.tp_det, c.n_det, c.tp_gt, c.n_gt)

    precision = np.zeros(nt)
    recall = np.zeros(nt)
    fmeasure = np.zeros(nt)
    for i, c in enumerate(agg):
        precision[i], recall[i], fmeasure[i] = _prf(c.tp_det, c.n_det, c.tp_gt, c.n_gt)

    ods_i = int(np.argmax(fmeasure))

    # OIS: per image, its best threshold; sum the counts at those choices.
    ois_tot = MatchCounts(0, 0, 0, 0)
    per_image_best = []
    for counts in per_image:
        fs = [_prf(c.tp_det, c.n_det, c.tp_gt, c.n_gt)[2] for c in counts]
        bi = int(np.argmax(fs))
        per_image_best.append((float(thresholds[bi]), float(fs[bi])))
        c = counts[bi]
        ois_tot += MatchCounts(c.tp_det, c.n_det, c.tp_gt, c.n_gt)
    ois = _prf(ois_tot.tp_det, ois_tot.n_det, ois_tot.tp_gt, ois_tot.n_gt)[2]

    ap = _average_precision(recall, precision, cfg.ap_left_extension)

    return PRCurve(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        fmeasure=fmeasure,
        ods_threshold=float(thresholds[ods_i]),
        ods_precision=float(precision[ods_i]),
        ods_recall=float(recall[ods_i]),
        ods=float(fmeasure[ods_i]),
        ois=float(ois),
        ap=float(ap),
        per_image_best=per_image_best,
    )


def _average_precision(recall: np.ndarray, precision: np.ndarray, left_extension: bool) -> float:
    """Step integral of precision over recall, from a recall-0 baseline.

    Segments beyond the largest observed recall contribute nothing, so
    detectors whose curves stop short of full recall are penalized over the
    [0, 1] interval.  With left_extension, precision is first replaced by
    its running maximum from high recall downward (monotone envelope).
    """
    order = np.argsort(recall, kind="stable")
    r = recall[order]
    p = precision[order]
    if left_extension:
        p = np.maximum.accumulate(p[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for ri, pi in zip(r, p):
        ap += (ri - prev) * pi
        prev = ri
    return ap


# ----------------------------------------------------------------------
# Histogram normalization for visualization
# ----------------------------------------------------------------------

def histogram_normalize(
    maps: list[np.ndarray],
    reference: list[np.ndarray],
    n_grid: int = 257,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Monotone transform aligning map value histograms with a reference.

    Per map, the quantile-matching transform onto the pooled reference
    distribution is evaluated on a common value grid; the per-map transforms
    are averaged into one global monotone map which is applied to every
    input.  Returns (grid, transform, transformed maps).  Strict
    monotonicity is enforced with a vanishing linear ramp, so benchmark
    scores are unchanged.  Constant maps get the identity transform.
    """
    if not maps or not reference:
        raise ValueError("need nonempty map and reference sets")
    ref_sorted = np.sort(np.concatenate([np.asarray(r, np.float64).ravel() for r in reference]))
    vmax = max(1.0, max(float(np.asarray(m).max()) for m in maps))
    # Quantile-adaptive grid: equal input mass per cell bounds the
    # interpolation error even when values pile up near one end.
    pooled_in = np.sort(np.concatenate([np.asarray(m, np.float64).ravel() for m in maps]))
    qidx = np.linspace(0, pooled_in.size - 1, n_grid).astype(np.int64)
    grid = np.unique(np.concatenate([[0.0, vmax], pooled_in[qidx]]))

    transforms = []
    for m in maps:
        vals = np.sort(np.asarray(m, np.float64).ravel())
        if vals[0] == vals[-1]:
            transforms.append(grid.copy())  # constant map: identity
            continue
        q = np.searchsorted(vals, grid, side="right") / vals.size
        idx = np.clip(np.ceil(q * ref_sorted.size).astype(np.int64) - 1, 0, ref_sorted.size - 1)
        transforms.append(ref_sorted[idx])
    t_global = np.mean(np.stack(transforms), axis=0)
    t_global = np.maximum.accumulate(t_global)
    t_global = t_global + 1e-9 * grid  # strictly increasing

    out = [np.interp(np.asarray(m, np.float64), grid, t_global) for m in maps]
    return grid, t_global, out
