"""Configuration, dataset IO, and end-to-end pipeline orchestration.

File formats (see docs/formats.md):

* config: one JSON document, versioned;
* dataset: <root>/<split>/<image_id>/image.png plus annotator_<k>.png
  segment-id maps stored as 16-bit grayscale PNG;
* detector outputs: 16-bit grayscale PNG, value = round(clip(v, 0, 32) *
  2048), i.e. a fixed documented scale.
"""
from __future__ import annotations

import json
import logging
import resource
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .calibration import CalibrationModel, apply_calibration, fit_beta, reliability
from .features import compute_channels
from .forest import Forest, TrainParams, predict_points, train_forest
from .fusion import PyramidConfig, composite, composite_collapsed, detect_multiscale, nms, resize_bilinear
from .groundtruth import build_graph, label_map, sample_training_set, valid_center_mask
from .label_space import LabelSpaceConfig

__all__ = [
    "CONFIG_VERSION",
    "GRAY16_SCALE",
    "GRAY16_MAX_VALUE",
    "ConfigError",
    "DataError",
    "PipelineConfig",
    "DatasetItem",
    "load_config",
    "save_config",
    "read_image",
    "write_image",
    "read_seg",
    "write_seg",
    "read_map16",
    "write_map16",
    "load_split",
    "save_scene",
    "train_pipeline",
    "calibrate_pipeline",
    "detect_image",
    "gt_masks_for_item",
]

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
GRAY16_SCALE = 2048.0
GRAY16_MAX_VALUE = 65535


class ConfigError(Exception):
    """Malformed, inconsistent, or wrong-version configuration."""


class DataError(Exception):
    """Missing or malformed data files."""


@dataclass(frozen=True)
class PipelineConfig:
    label_space: LabelSpaceConfig = LabelSpaceConfig()
    forest: TrainParams = TrainParams()
    pyramid: PyramidConfig = PyramidConfig()
    n_per_class: int = 800
    mode: str = "average"
    collapsed: bool = True
    calibrate: bool = True
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported")
        if self.mode not in ("average", "vote"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "seed": self.seed,
            "label_space": asdict(self.label_space),
            "forest": asdict(self.forest),
            "pyramid": {
                "scales": list(self.pyramid.scales),
                "sharpen": list(self.pyramid.sharpen),
                "betas": list(self.pyramid.betas),
            },
            "sampling": {"n_per_class": self.n_per_class},
            "detect": {
                "mode": self.mode,
                "collapsed": self.collapsed,
                "calibrate": self.calibrate,
            },
        }
        return json.dumps(doc, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        try:
            pyr = doc.get("pyramid", {})
            return PipelineConfig(
                label_space=LabelSpaceConfig(**doc.get("label_space", {})),
                forest=TrainParams(**doc.get("forest", {})),
                pyramid=PyramidConfig(
                    scales=tuple(pyr.get("scales", (0.25, 0.5, 1.0, 2.0))),
                    sharpen=tuple(pyr.get("sharpen", (1, 1, 2, 2))),
                    betas=tuple(pyr.get("betas", (8.0, 8.0, 8.0, 8.0))),
                ),
                n_per_class=doc.get("sampling", {}).get("n_per_class", 800),
                mode=doc.get("detect", {}).get("mode", "average"),
                collapsed=doc.get("detect", {}).get("collapsed", True),
                calibrate=doc.get("detect", {}).get("calibrate", True),
                seed=doc.get("seed", 0),
                version=doc.get("version", CONFIG_VERSION),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config field: {e}") from e


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    return PipelineConfig.from_json(p.read_text())


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


# ----------------------------------------------------------------------
# Image and dataset IO
# ----------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image not found: {p}")
    try:
        return np.asarray(Image.open(p).convert("RGB"))
    except Exception as e:
        raise DataError(f"cannot read image {p}: {e}") from e


def write_image(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path)


def read_seg(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"segmentation not found: {p}")
    try:
        arr = np.asarray(Image.open(p))
    except Exception as e:
        raise DataError(f"cannot read segmentation {p}: {e}") from e
    if arr.ndim != 2:
        raise DataError(f"segmentation {p} is not single-channel")
    return arr.astype(np.int32)


def write_seg(path, seg: np.ndarray) -> None:
    arr = np.asarray(seg)
    if arr.min() < 0 or arr.max() > GRAY16_MAX_VALUE:
        raise DataError("segment ids must fit 16-bit unsigned")
    Image.fromarray(arr.astype(np.uint16), "I;16").save(path)


def write_map16(path, values: np.ndarray) -> None:
    """Detector map -> 16-bit PNG at the fixed documented scale."""
    q = np.clip(np.asarray(values, np.float64) * GRAY16_SCALE, 0, GRAY16_MAX_VALUE)
    Image.fromarray(np.round(q).astype(np.uint16), "I;16").save(path)


def read_map16(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"map not found: {p}")
    return np.asarray(Image.open(p)).astype(np.float64) / GRAY16_SCALE


@dataclass
class DatasetItem:
    image_id: str
    image: np.ndarray
    segs: list[np.ndarray]


def save_scene(root, split: str, image_id: str, image: np.ndarray, segs) -> None:
    d = Path(root) / split / image_id
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "image.png", image)
    for k, seg in enumerate(segs):
        write_seg(d / f"annotator_{k}.png", seg)


def load_split(root, split: str) -> list[DatasetItem]:
    d = Path(root) / split
    if not d.is_dir():
        raise DataError(f"split directory not found: {d}")
    items = []
    for sub in sorted(p for p in d.iterdir() if p.is_dir()):
        img_path = sub / "image.png"
        segs = sorted(sub.glob("annotator_*.png"))
        if not img_path.is_file() or not segs:
            raise DataError(f"incomplete item {sub}: need image.png and annotator_*.png")
        items.append(
            DatasetItem(sub.name, read_image(img_path), [read_seg(s) for s in segs])
        )
    if not items:
        raise DataError(f"no items under {d}")
    return items


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------

def _peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def train_pipeline(cfg: PipelineConfig, items: list[DatasetItem], threads: int = 1):
    """Sample balanced patches and train the forest; returns (forest, stats)."""
    ls = cfg.label_space
    t0 = time.monotonic()
    stacks = [compute_channels(it.image, ls) for it in items]
    patches = sample_training_set([it.segs for it in items], ls, cfg.n_per_class, cfg.seed)
    t_sample = time.monotonic() - t0
    tree_times = []
    trees = []
    seeds = [cfg.seed * 1_000_003 + t for t in range(cfg.forest.n_trees)]
    if threads > 1:
        forest = train_forest(patches, stacks, ls, cfg.forest, seeds=seeds, threads=threads)
        tree_times = [float("nan")] * cfg.forest.n_trees
    else:
        from .forest import train_tree

        for s in seeds:
            t1 = time.monotonic()
            trees.append(train_tree(patches, stacks, ls, cfg.forest, s))
            tree_times.append(time.monotonic() - t1)
        forest = Forest(trees=trees, label_cfg=ls, params=cfg.forest, seeds=seeds)
    stats = {
        "n_patches": len(patches),
        "n_per_class": patches.n_per_class,
        "sampling_seconds": round(t_sample, 3),
        "tree_seconds": [round(t, 3) for t in tree_times],
        "peak_rss_mb": round(_peak_rss_mb(), 1),
        "model_bytes": forest.model_size_bytes(),
    }
    return forest, stats


# ----------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------

def _resize_nearest(arr: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape
    oh, ow = out_shape
    ys = np.clip(np.rint((np.arange(oh) + 0.5) * (h / oh) - 0.5), 0, h - 1).astype(np.int64)
    xs = np.clip(np.rint((np.arange(ow) + 0.5) * (w / ow) - 0.5), 0, w - 1).astype(np.int64)
    return arr[ys][:, xs]


def collect_scale_pairs(
    forest: Forest,
    cfg: PipelineConfig,
    items: list[DatasetItem],
    scale: float,
    max_patches_per_image: int = 400,
):
    """Validation (score, soft indicator) pairs at one pyramid scale.

    Images and id maps are resized to the scale, patch centers sampled away
    from borders, and the per-annotator one-hot labels averaged into soft
    indicator vectors; only non-background components enter the fit.
    """
    ls = cfg.label_space
    rng = np.random.default_rng(cfg.seed + int(scale * 1000))
    all_scores, all_inds = [], []
    for it in items:
        h, w = it.image.shape[:2]
        hs, ws = int(round(h * scale)), int(round(w * scale))
        if min(hs, ws) < 2 * ls.patch_size:
            continue
        img_s = resize_bilinear(it.image.astype(np.float32) / 255.0, (hs, ws))
        stack = compute_channels(img_s, ls)
        segs_s = [_resize_nearest(seg, (hs, ws)) for seg in it.segs]
        lmaps = [label_map(build_graph(seg), ls) for seg in segs_s]
        valid = np.ones((hs, ws), dtype=bool)
        for seg in segs_s:
            valid &= valid_center_mask(seg, ls)
        vy, vx = np.nonzero(valid)
        if len(vy) == 0:
            continue
        take = min(max_patches_per_image, len(vy))
        sel = rng.choice(len(vy), size=take, replace=False)
        xs, ys = vx[sel], vy[sel]
        scores = predict_points(forest, stack, xs, ys, cfg.mode)
        soft = np.zeros_like(scores)
        for lm in lmaps:
            labs = lm[ys, xs]
            soft[np.arange(len(labs)), labs] += 1.0
        soft /= len(lmaps)
        all_scores.append(scores[:, 1:].ravel())
        all_inds.append(soft[:, 1:].ravel())
    if not all_scores:
        raise DataError(f"no usable validation patches at scale {scale}")
    return np.concatenate(all_scores), np.concatenate(all_inds)


def calibrate_pipeline(cfg: PipelineConfig, forest: Forest, items: list[DatasetItem]):
    """Fit one beta per pyramid scale; returns (new config, curves dict)."""
    forest.require_compatible(cfg.label_space)
    betas = []
    curves = {}
    for scale in cfg.pyramid.scales:
        scores, inds = collect_scale_pairs(forest, cfg, items, scale)
        beta = fit_beta(scores, inds)
        betas.append(beta)
        curves[scale] = reliability(scores, inds)
        log.info("scale %g: beta = %.3f from %d pairs", scale, beta, len(scores))
    new_pyr = PyramidConfig(cfg.pyramid.scales, cfg.pyramid.sharpen, tuple(betas))
    return replace(cfg, pyramid=new_pyr), curves


# ----------------------------------------------------------------------
# Detection
# ----------------------------------------------------------------------

def detect_image(
    cfg: PipelineConfig,
    forest: Forest,
    image: np.ndarray,
    return_components: bool = False,
):
    """Full detection for one image; returns dict of maps.

    Keys: "E" (H, W, m), "max" (H, W), "nms" (H, W); with return_components
    also "per_scale" {scale: E}.
    """
    forest.require_compatible(cfg.label_space)
    out = detect_multiscale(
        image,
        forest,
        cfg.pyramid,
        mode=cfg.mode,
        calibrate=cfg.calibrate,
        collapsed=cfg.collapsed,
        return_components=return_components,
    )
    e, per_scale = out if return_components else (out, None)
    result = {"E": e, "max": e.max(axis=2), "nms": nms(e, cfg.label_space)}
    if return_components:
        result["per_scale"] = per_scale
    return result


def gt_masks_for_item(item: DatasetItem) -> list[np.ndarray]:
    """Thinned boundary masks of every annotator of a dataset item."""
    return [build_graph(seg).mask for seg in item.segs]
