"""Per-image mask post-processing: score/overlap filtering of raw mask sets,
painting filtered masks into full-image segmentation maps, and pixel-to-
embedding assignment against the per-mask embedding tables.

Overlapping same-level masks are resolved by painting in descending area
order, so finer structure overwrites coarser. Pixels no mask covers keep
label 0 and are excluded from any training loss downstream.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .scene import SemanticLevel


@dataclass
class MaskFilterConfig:
    min_predicted_iou: float = 0.7
    min_stability: float = 0.85
    max_overlap: float = 0.8  # pairwise bitmap IoU at or above this is redundant


@dataclass
class RawMask:
    bitmap: np.ndarray  # (H, W) bool
    predicted_iou: float
    stability: float


@dataclass
class RawMaskSet:
    image_id: str
    level: SemanticLevel
    masks: list[RawMask] = field(default_factory=list)

    def validate(self) -> None:
        shapes = {m.bitmap.shape for m in self.masks}
        if len(shapes) > 1:
            raise DataFormatError(f"{self.image_id}: mask bitmaps disagree on shape: {shapes}")
        for i, m in enumerate(self.masks):
            if m.bitmap.ndim != 2 or m.bitmap.dtype != np.bool_:
                raise DataFormatError(f"{self.image_id}: mask {i} is not a 2-D boolean bitmap")
            if not (np.isfinite(m.predicted_iou) and np.isfinite(m.stability)):
                raise DataFormatError(f"{self.image_id}: mask {i} has non-finite scores")


@dataclass
class SegmentationMap:
    image_id: str
    level: SemanticLevel
    labels: np.ndarray  # (H, W) uint16, 0 = unassigned, ids 1..n_masks
    n_masks: int

    def validate(self) -> None:
        if self.labels.ndim != 2 or not np.issubdtype(self.labels.dtype, np.integer):
            raise DataFormatError(f"{self.image_id}: labels must be a 2-D integer grid")
        if self.labels.size and int(self.labels.max()) > self.n_masks:
            raise DataFormatError(
                f"{self.image_id}: label {int(self.labels.max())} exceeds mask count {self.n_masks}"
            )
        if self.labels.size and int(self.labels.min()) < 0:
            raise DataFormatError(f"{self.image_id}: negative label")


@dataclass
class MaskEmbeddingTable:
    image_id: str
    level: SemanticLevel
    rows: np.ndarray  # (K, D) float32, row k-1 belongs to mask id k

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def validate(self) -> None:
        if self.rows.ndim != 2:
            raise DataFormatError(f"{self.image_id}: embedding table must be 2-D")
        if not np.isfinite(self.rows).all():
            raise DataFormatError(f"{self.image_id}: non-finite embedding row")
        if len(self):
            norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            if off.max() > 1e-4:
                raise DataFormatError(
                    f"{self.image_id}: embedding row {int(off.argmax())} has norm "
                    f"{norms[off.argmax()]:.6f}, expected 1"
                )


def bitmap_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0  # two empty masks are duplicates of each other
    return float(inter) / float(union)


def filter_masks(raw: RawMaskSet, cfg: MaskFilterConfig | None = None) -> RawMaskSet:
    """Drop low-score masks, then greedily deduplicate by descending
    predicted IoU; a candidate overlapping any kept mask at or above
    max_overlap is discarded. Output order is the keep order."""
    cfg = cfg or MaskFilterConfig()
    raw.validate()
    scored = [
        m for m in raw.masks
        if m.predicted_iou >= cfg.min_predicted_iou and m.stability >= cfg.min_stability
    ]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].predicted_iou, i))
    kept: list[RawMask] = []
    for i in order:
        m = scored[i]
        if any(bitmap_iou(m.bitmap, k.bitmap) >= cfg.max_overlap for k in kept):
            continue
        kept.append(m)
    return RawMaskSet(image_id=raw.image_id, level=raw.level, masks=kept)


def paint_order(filtered: RawMaskSet) -> list[int]:
    """Indices into filtered.masks in paint order: descending pixel area,
    ties by position. Mask id k is paint_order[k-1]."""
    areas = [int(m.bitmap.sum()) for m in filtered.masks]
    return sorted(range(len(areas)), key=lambda i: (-areas[i], i))


def build_segmentation_map(filtered: RawMaskSet) -> SegmentationMap:
    """Paint masks largest-first so smaller masks overwrite larger ones;
    ids run 1..K in paint order."""
    filtered.validate()
    k = len(filtered.masks)
    if k > np.iinfo(np.uint16).max:
        raise DataFormatError(f"{filtered.image_id}: {k} masks exceed the 16-bit label space")
    if k == 0:
        raise DataFormatError(f"{filtered.image_id}: cannot build a map from zero masks")
    shape = filtered.masks[0].bitmap.shape
    labels = np.zeros(shape, dtype=np.uint16)
    for mask_id, idx in enumerate(paint_order(filtered), start=1):
        labels[filtered.masks[idx].bitmap] = mask_id
    return SegmentationMap(image_id=filtered.image_id, level=filtered.level,
                           labels=labels, n_masks=k)


def validate_pair(seg: SegmentationMap, table: MaskEmbeddingTable) -> None:
    """Referential integrity between a map and its embedding table."""
    seg.validate()
    table.validate()
    if seg.image_id != table.image_id or seg.level != table.level:
        raise DataFormatError(
            f"map ({seg.image_id}, {seg.level.key}) paired with table "
            f"({table.image_id}, {table.level.key})"
        )
    if seg.n_masks != len(table):
        raise DataFormatError(
            f"{seg.image_id}: map has {seg.n_masks} mask ids, table has {len(table)} rows"
        )


def assign_pixel_embeddings(seg: SegmentationMap, table: MaskEmbeddingTable, pixels):
    """Per requested (x, y) pixel: the embedding row of its mask, or None
    when unassigned. Rows are views into the table, not copies."""
    out = []
    for x, y in pixels:
        label = int(seg.labels[y, x])
        if label == 0:
            out.append(None)
            continue
        if label > len(table):
            raise DataFormatError(
                f"{seg.image_id}: pixel ({x}, {y}) labeled {label}, "
                f"but table has only {len(table)} rows"
            )
        out.append(table.rows[label - 1])
    return out


def assign_embedding_image(seg: SegmentationMap, table: MaskEmbeddingTable):
    """Full-image variant: (H, W, D) embedding grid plus an (H, W) boolean
    plane marking pixels that carry one."""
    if seg.labels.size and int(seg.labels.max()) > len(table):
        raise DataFormatError(
            f"{seg.image_id}: label {int(seg.labels.max())} missing from embedding table"
        )
    has = seg.labels > 0
    emb = np.zeros(seg.labels.shape + (table.dim,), dtype=table.rows.dtype)
    emb[has] = table.rows[seg.labels[has].astype(np.int64) - 1]
    return emb, has
