"""Open-vocabulary querying over a trained latent field.

Rendered latents are decoded back to embedding space and scored against a
text query through the canonical-phrase softmax: the relevancy of a pixel
is min_i exp(dq) / (exp(dq) + exp(dc_i)) over the canonical dots dc_i,
which collapses to sigmoid(dq - max_i dc_i). The localization and
segmentation protocols operate on the resulting per-level maps.

Tie-breaking is lowest level first, then row-major first pixel, wherever a
protocol has to pick between equal scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autoencoder import AutoencoderParams, decode
from .errors import ConfigError, DataFormatError
from .rasterizer import DEFAULT_RASTER, RasterConfig, render_level
from .scene import Camera, GaussianScene, SemanticLevel

_NORM_FLOOR = 1e-12


@dataclass
class QueryConfig:
    # Dots are taken between L2-normalized vectors by default; False keeps
    # the raw-dot variant.
    normalize_embeddings: bool = True
    smooth_size: int = 20
    lerf_threshold: float = 0.5
    ovs_threshold: float = 0.4

    def validate(self) -> None:
        if self.smooth_size < 1:
            raise ConfigError("smooth_size must be >= 1")
        if not 0.0 < self.lerf_threshold < 1.0:
            raise ConfigError("lerf_threshold must be in (0, 1)")
        if not 0.0 < self.ovs_threshold < 1.0:
            raise ConfigError("ovs_threshold must be in (0, 1)")


DEFAULT_QUERY = QueryConfig()


@dataclass
class QueryEmbedding:
    label: str
    vector: np.ndarray  # (D,) float64, unit norm

    def validate(self) -> None:
        if self.vector.ndim != 1:
            raise DataFormatError("query vector must be 1-D")
        if not np.isfinite(self.vector).all():
            raise DataFormatError(f"non-finite query vector for {self.label!r}")
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-4:
            raise DataFormatError(f"query {self.label!r} has norm {norm:.6f}, want 1")


@dataclass
class CanonicalSet:
    labels: tuple[str, ...]
    vectors: np.ndarray  # (4, D) float64, unit rows

    def validate(self) -> None:
        if len(self.labels) != 4 or self.vectors.shape[0] != 4:
            raise DataFormatError(
                f"canonical set must have exactly 4 entries, got {self.vectors.shape[0]}"
            )
        if not np.isfinite(self.vectors).all():
            raise DataFormatError("non-finite canonical vectors")
        norms = np.linalg.norm(self.vectors, axis=1)
        if (np.abs(norms - 1.0) > 1e-4).any():
            raise DataFormatError("canonical vectors must be unit norm")


@dataclass
class RelevancyMap:
    level: SemanticLevel
    label: str
    scores: np.ndarray  # (H, W) float64 in [0, 1]

    def validate(self) -> None:
        if not np.isfinite(self.scores).all():
            raise DataFormatError("non-finite relevancy map")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise DataFormatError("relevancy scores out of [0, 1]")


@dataclass
class Localization:
    x: int
    y: int
    level: SemanticLevel
    score: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for any dots
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norms, _NORM_FLOOR)


def relevancy(img: np.ndarray, qry: np.ndarray, canon: CanonicalSet) -> float:
    """Canonical-phrase softmax score for one embedding, from the vectors
    exactly as given (callers decide whether to normalize first)."""
    img = np.asarray(img, dtype=np.float64)
    dq = float(img @ np.asarray(qry, dtype=np.float64))
    dc = canon.vectors.astype(np.float64) @ img
    return float(_sigmoid(np.asarray(dq - dc.max())))


def relevancy_from_image(
    img: FeatureImage,
    params: AutoencoderParams,
    query: QueryEmbedding,
    canon: CanonicalSet,
    level: SemanticLevel,
    cfg: QueryConfig = DEFAULT_QUERY,
) -> RelevancyMap:
    """Decode one rendered level and score every pixel against the query."""
    cfg.validate()
    query.validate()
    canon.validate()
    if query.vector.shape[0] != params.input_dim:
        raise DataFormatError(
            f"query dim {query.vector.shape[0]} does not match decoder "
            f"output dim {params.input_dim}"
        )
    if canon.vectors.shape[1] != query.vector.shape[0]:
        raise DataFormatError("canonical dim does not match query dim")
    if img.channels != params.latent_dim:
        raise DataFormatError(
            f"image carries {img.channels}-d latents, decoder expects {params.latent_dim}"
        )

    qv = query.vector.astype(np.float64)
    cv = canon.vectors.astype(np.float64)
    if cfg.normalize_embeddings:
        qv = _unit_rows(qv)
        cv = _unit_rows(cv)
    emb = decode(params, img.data.reshape(-1, img.channels))
    if cfg.normalize_embeddings:
        emb = _unit_rows(emb)
    dq = emb @ qv
    dc = emb @ cv.T
    scores = _sigmoid(dq - dc.max(axis=1)).reshape(img.height, img.width)
    return RelevancyMap(level=level, label=query.label, scores=scores)


def relevancy_maps(
    scene: GaussianScene,
    camera: Camera,
    params: AutoencoderParams,
    query: QueryEmbedding,
    canon: CanonicalSet,
    cfg: QueryConfig = DEFAULT_QUERY,
    raster: RasterConfig = DEFAULT_RASTER,
) -> list[RelevancyMap]:
    """Render, decode, and score every pixel at each semantic level."""
    return [
        relevancy_from_image(render_level(scene, camera, level, raster),
                             params, query, canon, level, cfg)
        for level in SemanticLevel
    ]


def _box_mean(grid: np.ndarray, size: int) -> np.ndarray:
    """Box mean with edge-replicate padding; the window at index i spans
    [i - size//2, i + size - 1 - size//2] (left-heavy for even sizes)."""
    if size == 1:
        return grid.copy()
    lo = size // 2
    hi = size - 1 - lo
    out = np.asarray(grid, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (lo, hi)
        padded = np.pad(out, pad, mode="edge")
        out = sliding_window_view(padded, size, axis=axis).mean(axis=-1)
    return out


def smooth(rmap: RelevancyMap, size: int = 20) -> RelevancyMap:
    if size < 1:
        raise ConfigError("smooth size must be >= 1")
    return RelevancyMap(level=rmap.level, label=rmap.label,
                        scores=_box_mean(rmap.scores, size))


def _by_level(maps: list[RelevancyMap]) -> list[RelevancyMap]:
    ordered = sorted(maps, key=lambda m: m.level)
    shape = ordered[0].scores.shape
    for m in ordered[1:]:
        if m.scores.shape != shape:
            raise DataFormatError("relevancy maps differ in shape")
    return ordered


def localize(maps: list[RelevancyMap], cfg: QueryConfig = DEFAULT_QUERY) -> Localization:
    """Highest smoothed score over (level, pixel).

    A box mean turns an isolated interior peak into a plateau of equal
    values, so the returned pixel is the plateau's row-major first member,
    per the tie rule.
    """
    best = None
    for m in _by_level(maps):
        s = _box_mean(m.scores, cfg.smooth_size)
        flat = int(np.argmax(s))
        y, x = divmod(flat, s.shape[1])
        if best is None or s[y, x] > best.score:
            best = Localization(x=x, y=y, level=m.level, score=float(s[y, x]))
    return best


def segment_lerf(
    maps: list[RelevancyMap],
    threshold: float | None = None,
    cfg: QueryConfig = DEFAULT_QUERY,
) -> np.ndarray:
    """Smooth all levels, take the map with the highest peak, min-max
    normalize it, and binarize. A constant selected map has no contrast to
    normalize and yields an empty mask."""
    thr = cfg.lerf_threshold if threshold is None else threshold
    if not 0.0 < thr < 1.0:
        raise ConfigError(f"segmentation threshold must be in (0, 1), got {thr}")
    selected = None
    for m in _by_level(maps):
        s = _box_mean(m.scores, cfg.smooth_size)
        if selected is None or s.max() > selected.max():
            selected = s
    lo, hi = selected.min(), selected.max()
    if hi == lo:
        return np.zeros(selected.shape, dtype=bool)
    return (selected - lo) / (hi - lo) >= thr


def ovs_choice(maps: list[RelevancyMap], cfg: QueryConfig = DEFAULT_QUERY) -> RelevancyMap | None:
    """The level map whose thresholded region has the highest mean raw
    relevancy, earliest level on ties; None when every region is empty."""
    best = None
    best_mean = -np.inf
    for m in _by_level(maps):
        mask = m.scores >= cfg.ovs_threshold
        if not mask.any():
            continue
        mean = float(m.scores[mask].mean())
        if mean > best_mean:
            best_mean, best = mean, m
    return best


def segment_ovs(maps: list[RelevancyMap], cfg: QueryConfig = DEFAULT_QUERY) -> np.ndarray:
    """Binarize each raw map at the fixed threshold and return the
    binarization whose region has the highest mean raw relevancy; empty
    regions never win."""
    chosen = ovs_choice(maps, cfg)
    if chosen is None:
        return np.zeros(maps[0].scores.shape, dtype=bool)
    return chosen.scores >= cfg.ovs_threshold


def viz_latent(
    scene: GaussianScene,
    camera: Camera,
    level: SemanticLevel,
    raster: RasterConfig = DEFAULT_RASTER,
) -> np.ndarray:
    """Rendered 3-d latents as an RGB byte image, each channel min-max
    normalized over the view (a constant channel maps to mid-gray)."""
    if scene.latent_dim != 3:
        raise DataFormatError(
            f"latent visualization is defined for 3-d latents, scene has d={scene.latent_dim}"
        )
    img = render_level(scene, camera, level, raster)
    out = np.empty((camera.height, camera.width, 3), dtype=np.uint8)
    for c in range(3):
        ch = img.data[:, :, c]
        lo, hi = ch.min(), ch.max()
        norm = np.full_like(ch, 0.5) if hi == lo else (ch - lo) / (hi - lo)
        out[:, :, c] = np.rint(norm * 255.0).astype(np.uint8)
    return out
