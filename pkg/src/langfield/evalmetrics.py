"""Metrics over annotated query sets (localization accuracy, IoU, mIoU,
pixel accuracy) and wall-clock benchmarks of the query path.

Conventions: bbox bounds and containment are pixel-inclusive; IoU of two
empty masks is 1 (the degenerate case never occurs in the source data, but
property tests need it pinned); mIoU and accuracy ignore pixels the ground
truth leaves unlabeled (label 0); "overall" rows are unweighted means over
scenes. Reports that participate in determinism checks carry no timing
fields; timings travel in their own report.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import AutoencoderParams
from .errors import DataFormatError
from .query import (
    DEFAULT_QUERY,
    CanonicalSet,
    Localization,
    QueryConfig,
    QueryEmbedding,
    localize,
    relevancy_from_image,
)
from .rasterizer import DEFAULT_RASTER, RasterConfig, render_channels, render_level
from .scene import Camera, GaussianScene, SemanticLevel


@dataclass
class BBox:
    """Inclusive pixel bounds."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int | None = None, height: int | None = None) -> None:
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise DataFormatError(f"empty bbox {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise DataFormatError(f"negative bbox corner {self}")
        if width is not None and (self.x1 >= width or self.y1 >= height):
            raise DataFormatError(f"bbox {self} leaves the {width}x{height} image")

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass
class GroundTruth:
    """Per-scene annotations: bboxes for localization queries, binary masks
    for segmentation queries, both keyed by (view id, query label)."""

    scene_id: str
    boxes: dict = field(default_factory=dict)   # (view, query) -> BBox
    masks: dict = field(default_factory=dict)   # (view, query) -> (H, W) bool

    def validate(self) -> None:
        for key, box in self.boxes.items():
            box.validate()
        for key, mask in self.masks.items():
            if mask.ndim != 2 or mask.dtype != np.bool_:
                raise DataFormatError(f"{key}: segmentation mask must be 2-D bool")


def load_ground_truth(path) -> GroundTruth:
    """Reads a scene annotation file; mask paths resolve relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or "scene" not in doc:
        raise DataFormatError(f"{path}: annotation file needs a 'scene' field")
    gt = GroundTruth(scene_id=str(doc["scene"]))
    for entry in doc.get("localization", []):
        try:
            gt.boxes[(entry["view"], entry["query"])] = BBox(*map(int, entry["bbox"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: bad localization entry {entry}") from e
    for entry in doc.get("segmentation", []):
        try:
            mask_path = path.parent / entry["mask"]
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("1"), dtype=bool)
            gt.masks[(entry["view"], entry["query"])] = mask
        except KeyError as e:
            raise DataFormatError(f"{path}: bad segmentation entry {entry}") from e
        except (FileNotFoundError, OSError) as e:
            raise DataFormatError(f"{path}: cannot read mask {entry.get('mask')}") from e
    gt.validate()
    return gt


def save_ground_truth(path, gt: GroundTruth) -> None:
    path = Path(path)
    loc = [
        {"view": view, "query": query, "bbox": [b.x0, b.y0, b.x1, b.y1]}
        for (view, query), b in sorted(gt.boxes.items())
    ]
    seg = []
    for (view, query), mask in sorted(gt.masks.items()):
        safe = "".join(c if c.isalnum() else "_" for c in f"{view}_{query}")
        name = f"gt_{safe}.png"
        Image.fromarray(mask.astype(np.uint8) * 255).convert("1").save(path.parent / name)
        seg.append({"view": view, "query": query, "mask": name})
    path.write_text(json.dumps(
        {"scene": gt.scene_id, "localization": loc, "segmentation": seg}, indent=1
    ))


# ------------------------------------------------------------------- metrics

def eval_localization(preds: list[tuple[int, int]], gts: list[BBox]) -> float:
    """Percent of predicted pixels inside their boxes (bounds inclusive)."""
    if len(preds) != len(gts):
        raise DataFormatError(f"{len(preds)} predictions vs {len(gts)} boxes")
    if not preds:
        raise DataFormatError("no localization pairs to evaluate")
    hits = sum(box.contains(x, y) for (x, y), box in zip(preds, gts))
    return 100.0 * hits / len(preds)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise DataFormatError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def eval_iou(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]) -> float:
    """Mean per-query IoU in percent."""
    if len(pred_masks) != len(gt_masks):
        raise DataFormatError(f"{len(pred_masks)} predictions vs {len(gt_masks)} masks")
    if not pred_masks:
        raise DataFormatError("no segmentation pairs to evaluate")
    return 100.0 * float(np.mean([mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]))


def eval_miou_accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray) -> tuple[float, float]:
    """Class-mean IoU and pixel accuracy over the labeled region (gt > 0)."""
    if pred_labels.shape != gt_labels.shape:
        raise DataFormatError("label grids differ in shape")
    labeled = gt_labels > 0
    if not labeled.any():
        raise DataFormatError("ground truth labels are empty")
    gt = gt_labels[labeled]
    pred = pred_labels[labeled]
    ious = []
    for c in np.unique(gt):
        gt_c = gt == c
        pred_c = pred == c
        union = np.logical_or(gt_c, pred_c).sum()
        ious.append(np.logical_and(gt_c, pred_c).sum() / union)
    accuracy = float((pred == gt).mean())
    return 100.0 * float(np.mean(ious)), 100.0 * accuracy


@dataclass
class SceneMetrics:
    localization_accuracy: float
    mean_iou: float
    miou: float
    accuracy: float

    def validate(self) -> None:
        for name in ("localization_accuracy", "mean_iou", "miou", "accuracy"):
            v = getattr(self, name)
            if not np.isfinite(v) or not 0.0 <= v <= 100.0:
                raise DataFormatError(f"{name} = {v} outside [0, 100]")


@dataclass
class MetricsReport:
    scenes: dict  # scene id -> SceneMetrics

    def validate(self) -> None:
        if not self.scenes:
            raise DataFormatError("report covers no scenes")
        for m in self.scenes.values():
            m.validate()

    def overall(self) -> SceneMetrics:
        """Unweighted mean over scenes."""
        self.validate()
        rows = list(self.scenes.values())
        return SceneMetrics(
            localization_accuracy=float(np.mean([m.localization_accuracy for m in rows])),
            mean_iou=float(np.mean([m.mean_iou for m in rows])),
            miou=float(np.mean([m.miou for m in rows])),
            accuracy=float(np.mean([m.accuracy for m in rows])),
        )

    def to_json(self) -> str:
        body = {
            sid: vars(m) for sid, m in sorted(self.scenes.items())
        }
        body["overall"] = vars(self.overall())
        return json.dumps(body, indent=1)

    def to_csv(self) -> str:
        lines = ["scene,localization_accuracy,mean_iou,miou,accuracy"]
        rows = sorted(self.scenes.items())
        rows.append(("overall", self.overall()))
        for sid, m in rows:
            lines.append(
                f"{sid},{m.localization_accuracy:.4f},{m.mean_iou:.4f},"
                f"{m.miou:.4f},{m.accuracy:.4f}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- benchmarks

@dataclass
class QueryTiming:
    render_s: float
    score_s: float
    protocol_s: float
    total_s: float
    n_queries: int

    @property
    def per_query_s(self) -> float:
        return self.total_s / self.n_queries

    def to_json(self) -> str:
        return json.dumps(
            {
                "render_s": self.render_s,
                "score_s": self.score_s,
                "protocol_s": self.protocol_s,
                "total_s": self.total_s,
                "n_queries": self.n_queries,
                "per_query_s": self.per_query_s,
            },
            indent=1,
        )


def benchmark_query(
    scene: GaussianScene,
    cameras: list[Camera],
    params: AutoencoderParams,
    queries: list[QueryEmbedding],
    canon: CanonicalSet,
    cfg: QueryConfig = DEFAULT_QUERY,
    raster: RasterConfig = DEFAULT_RASTER,
):
    """Times the full localization path per (camera, query) and returns
    (timing, results). Results carry the localization plus a digest of the
    three relevancy maps, so two runs can be compared for determinism while
    the timings stay in their own report."""
    if not cameras or not queries:
        raise DataFormatError("benchmark needs at least one camera and one query")
    render_s = score_s = protocol_s = 0.0
    results = []
    t_total = time.perf_counter()
    for cam in cameras:
        for query in queries:
            t = time.perf_counter()
            imgs = [render_level(scene, cam, level, raster) for level in SemanticLevel]
            render_s += time.perf_counter() - t

            t = time.perf_counter()
            maps = [
                relevancy_from_image(img, params, query, canon, level, cfg)
                for img, level in zip(imgs, SemanticLevel)
            ]
            score_s += time.perf_counter() - t

            t = time.perf_counter()
            loc = localize(maps, cfg)
            protocol_s += time.perf_counter() - t

            digest = hashlib.sha256()
            for m in maps:
                digest.update(np.ascontiguousarray(m.scores).tobytes())
            results.append((cam.id, query.label, loc, digest.hexdigest()))
    total_s = time.perf_counter() - t_total
    timing = QueryTiming(render_s=render_s, score_s=score_s, protocol_s=protocol_s,
                         total_s=total_s, n_queries=len(results))
    return timing, results


def benchmark_channels(
    scene: GaussianScene,
    camera: Camera,
    widths: list[int],
    repeats: int = 3,
    raster: RasterConfig = DEFAULT_RASTER,
    seed: int = 0,
) -> dict[int, float]:
    """Best-of-`repeats` wall-clock seconds to composite `k` channels through
    the same scene and camera, per k in `widths`. The first render of each
    width is a discarded warmup (kernels are compiled per channel count)."""
    rng = np.random.default_rng(seed)
    out = {}
    for k in widths:
        channels = rng.normal(size=(len(scene), k))
        render_channels(scene, camera, channels, raster)
        best = np.inf
        for _ in range(repeats):
            t = time.perf_counter()
            render_channels(scene, camera, channels, raster)
            best = min(best, time.perf_counter() - t)
        out[int(k)] = float(best)
    return out
