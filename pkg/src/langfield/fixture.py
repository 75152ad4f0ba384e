"""Planted ground truth for the bundled synthetic scene.

`synth_scene` tags every Gaussian with a region id (objects 1..K, scenery
shell K+1). This module turns those ids into the artifacts a full pipeline
run needs: per-pixel label maps, per-region embeddings, mask embedding
tables, query and canonical sets, and evaluation annotations.

Two deliberate simplifications. The scene has no mask hierarchy, so all
three semantic levels carry the same partition; that still exercises the
level plumbing end to end without inventing structure the geometry does
not have. And region embeddings form a regular simplex spanning a random
(R-1)-dimensional subspace, so a latent space of d >= R-1 can carry them
losslessly and relevancy margins are easy to reason about.

The simplex also protects region boundaries. Rendered features blend
across silhouettes, and with simplex rows a blend of two regions dots
negatively with every other region, so no third object lights up along
an edge. (Orthonormal rows lack that guarantee: the autoencoder is free
to place one region's latent code right on the segment between two
others, and their shared boundaries then segment as the third object.)

The canonical set anchors one phrase near each of (up to) four regions,
which keeps relevancy against non-matching regions below the fixed 0.4
segmentation threshold. Scenes with more than three objects exceed the
four canonical slots, and pixels of the uncovered regions will score
around 0.5 against every query; expect segmentation to degrade there.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import DataFormatError
from .evalmetrics import BBox, GroundTruth
from .masks import MaskEmbeddingTable
from .query import CanonicalSet, QueryEmbedding
from .rasterizer import DEFAULT_RASTER, RasterConfig, render_channels
from .scene import Camera, GaussianScene, SemanticLevel

BACKDROP_LABEL = "backdrop"


def planted_labels(
    scene: GaussianScene,
    camera: Camera,
    object_ids: np.ndarray,
    raster: RasterConfig = DEFAULT_RASTER,
    alpha_min: float = 0.5,
) -> np.ndarray:
    """True per-pixel region labels: composite one-hot region channels and
    take the dominant region, 0 where accumulated alpha stays at or below
    `alpha_min` (nothing substantial rendered)."""
    ids = np.asarray(object_ids, dtype=np.int64)
    if ids.shape != (len(scene),):
        raise DataFormatError("object_ids must give one region id per Gaussian")
    n_regions = int(ids.max())
    channels = np.zeros((len(scene), n_regions), dtype=np.float64)
    channels[np.arange(len(scene)), ids - 1] = 1.0
    img = render_channels(scene, camera, channels, raster)
    labels = np.argmax(img.data, axis=2).astype(np.uint16) + 1
    covered = (img.alpha > alpha_min) & (img.data.max(axis=2) > 0.0)
    labels[~covered] = 0
    return labels


def region_basis(dim: int, n_regions: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Planted region embeddings plus the canonical-set anchor.

    Returns (rows, anchor): R unit rows forming a regular simplex (pairwise
    dots -1/(R-1)) inside a random (R-1)-dimensional subspace, and one unit
    vector orthogonal to that subspace. The rows span only R-1 dimensions,
    so the scene autoencoder has an exact planted optimum whenever its
    latent width is at least R-1."""
    if n_regions < 2:
        raise DataFormatError("need at least two regions (an object and a backdrop)")
    if n_regions > dim:
        # the simplex needs R-1 dimensions and the anchor one more
        raise DataFormatError(
            f"cannot plant {n_regions} region embeddings in {dim} dimensions"
        )
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(dim, n_regions)))
    # centered one-hot rows have dots delta_ij - 1/R: a simplex, rank R-1
    c = np.eye(n_regions) - 1.0 / n_regions
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    u, s, _ = np.linalg.svd(c)
    coords = u[:, : n_regions - 1] * s[: n_regions - 1]
    return coords @ q[:, : n_regions - 1].T, q[:, n_regions - 1].copy()


def fixture_queries(basis: np.ndarray) -> list[QueryEmbedding]:
    """One query per region: the exact planted embedding, objects first,
    the scenery shell last under the fixed backdrop label."""
    labels = [f"object {k}" for k in range(1, len(basis))] + [BACKDROP_LABEL]
    return [QueryEmbedding(label=lbl, vector=row) for lbl, row in zip(labels, basis)]


def fixture_canonical(basis: np.ndarray, anchor: np.ndarray) -> CanonicalSet:
    """Four negatives, each pulled toward one region embedding.

    The phrase normalize(1.2 * e_r + anchor) dots ~0.768 with its own region
    (1.2 / sqrt(1 + 1.44), the anchor being unit and orthogonal). A matching
    pixel therefore scores sigmoid(1 - 0.768) ~ 0.56 and a pixel of any other
    region sigmoid(-1/(R-1) - 0.768) < 0.26, so the fixed 0.4 threshold sits
    between them with margin on both sides. The strong pull also keeps the
    threshold crossing close to the half-blend point along region boundaries,
    so the predicted contour hugs the label contour instead of bulging past
    it.
    """
    if len(basis) > 4:
        warnings.warn(
            "more regions than canonical phrases; segmentation of the "
            "uncovered regions will be poor"
        )
    rows = []
    for i in range(4):
        v = 1.2 * basis[i % len(basis)] + anchor
        rows.append(v / np.linalg.norm(v))
    return CanonicalSet(
        labels=("object", "things", "stuff", "texture"),
        vectors=np.stack(rows),
    )


def jittered_table(
    basis: np.ndarray,
    image_id: str,
    level: SemanticLevel,
    rng: np.random.Generator,
    jitter: float = 0.01,
) -> MaskEmbeddingTable:
    """Per-image mask embeddings: the planted rows plus a small random
    perturbation, mimicking an encoder that never reproduces a crop's
    embedding exactly twice. Row r-1 belongs to region id r."""
    rows = basis + jitter * rng.normal(size=basis.shape)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return MaskEmbeddingTable(image_id=image_id, level=level, rows=rows.astype(np.float32))


def ground_truth_from_labels(
    scene_id: str,
    label_grids: dict[str, np.ndarray],
    queries: list[QueryEmbedding],
) -> GroundTruth:
    """Boxes and masks per (view, query), query i owning region id i+1.
    Regions invisible in a view get no entry there."""
    gt = GroundTruth(scene_id=scene_id)
    for view, grid in sorted(label_grids.items()):
        for i, q in enumerate(queries):
            mask = grid == i + 1
            if not mask.any():
                continue
            ys, xs = np.nonzero(mask)
            gt.boxes[(view, q.label)] = BBox(
                int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())
            )
            gt.masks[(view, q.label)] = mask
    return gt
