"""On-disk formats for everything except the scene itself (scene and camera
IO live in `scene`). All binary layouts are little-endian with a 4-byte
ASCII magic:

  LFIM  feature image   {width u32, height u32, channels u32} + f32 data
  LEMB  embedding table  {D u32, K u32} + K*D f32 rows
  LAEP  autoencoder      {D u32, d u32, n_layers u32} then per layer
                         {rows u32, cols u32, f32 weights, f32 biases}

Segmentation label maps are 16-bit grayscale PNGs (0 = unassigned). Raw
mask sets are directories of 1-bit PNGs with one JSON score sidecar per
mask. Query and canonical embeddings are JSON arrays of {label, vector}.

Autoencoder params are float64 in memory but the file stores float32, so
the first save is lossy; loading and saving again reproduces the file
byte for byte.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .autoencoder import AutoencoderParams, LinearLayer
from .errors import DataFormatError
from .masks import MaskEmbeddingTable, RawMask, RawMaskSet, SegmentationMap
from .query import CanonicalSet, QueryEmbedding
from .rasterizer import FeatureImage
from .scene import SemanticLevel

FEATURE_MAGIC = b"LFIM"
EMBEDDING_MAGIC = b"LEMB"
PARAMS_MAGIC = b"LAEP"


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}")
    return buf


def _check_magic(f, magic: bytes, path) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise DataFormatError(f"{path}: bad magic {got!r}, want {magic!r}")


# ------------------------------------------------------------- feature images

def save_feature_image(path, img: FeatureImage) -> None:
    data = np.ascontiguousarray(img.data, dtype="<f4")
    if data.shape != (img.height, img.width, img.channels):
        raise DataFormatError(
            f"feature data shape {data.shape} does not match header "
            f"({img.height}, {img.width}, {img.channels})"
        )
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", img.width, img.height, img.channels))
        f.write(data.tobytes())


def load_feature_image(path) -> FeatureImage:
    with open(path, "rb") as f:
        _check_magic(f, FEATURE_MAGIC, path)
        width, height, channels = struct.unpack("<III", _read_exact(f, 12, "header"))
        raw = _read_exact(f, width * height * channels * 4, "feature data")
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after feature data")
    data = np.frombuffer(raw, dtype="<f4").reshape(height, width, channels)
    return FeatureImage(width=width, height=height, channels=channels,
                        data=data.astype(np.float64))


def feature_image_png(img: FeatureImage, vmin=None, vmax=None) -> Image.Image:
    """8-bit preview of a 1- or 3-channel feature image. Values map
    linearly from [vmin, vmax] (image min/max when omitted); a constant
    image lands on mid-gray."""
    if img.channels not in (1, 3):
        raise DataFormatError(
            f"PNG preview is defined for 1 or 3 channels, got {img.channels}"
        )
    lo = float(img.data.min()) if vmin is None else float(vmin)
    hi = float(img.data.max()) if vmax is None else float(vmax)
    if hi <= lo:
        norm = np.full(img.data.shape, 0.5)
    else:
        norm = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    bytes_ = np.rint(norm * 255.0).astype(np.uint8)
    if img.channels == 1:
        return Image.fromarray(bytes_[:, :, 0], mode="L")
    return Image.fromarray(bytes_, mode="RGB")


_HEAT_STOPS = np.array(
    [[20, 11, 52], [60, 15, 112], [140, 41, 129], [225, 100, 98],
     [253, 180, 47], [252, 255, 164]],
    dtype=np.float64,
)


def relevancy_png(scores: np.ndarray) -> Image.Image:
    """Color-mapped heat image of a [0, 1] score grid (dark = 0)."""
    t = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    pos = t * (len(_HEAT_STOPS) - 1)
    idx = np.minimum(pos.astype(np.int64), len(_HEAT_STOPS) - 2)
    frac = (pos - idx)[..., None]
    rgb = _HEAT_STOPS[idx] * (1.0 - frac) + _HEAT_STOPS[idx + 1] * frac
    return Image.fromarray(np.rint(rgb).astype(np.uint8), mode="RGB")


# ----------------------------------------------------------- embedding tables

def save_embedding_table(path, table: MaskEmbeddingTable) -> None:
    rows = np.ascontiguousarray(table.rows, dtype="<f4")
    k, d = rows.shape
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", d, k))
        f.write(rows.tobytes())


def load_embedding_table(path, image_id: str, level: SemanticLevel) -> MaskEmbeddingTable:
    """The binary holds only the rows; identity comes from the caller (the
    pipeline derives it from the directory layout)."""
    with open(path, "rb") as f:
        _check_magic(f, EMBEDDING_MAGIC, path)
        d, k = struct.unpack("<II", _read_exact(f, 8, "header"))
        raw = _read_exact(f, k * d * 4, "embedding rows")
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after embedding rows")
    rows = np.frombuffer(raw, dtype="<f4").reshape(k, d).astype(np.float32)
    return MaskEmbeddingTable(image_id=image_id, level=level, rows=rows)


# -------------------------------------------------------- segmentation labels

def save_label_map(path, seg: SegmentationMap) -> None:
    Image.fromarray(seg.labels.astype(np.uint16)).save(path, format="PNG")


def save_bitmap(path, mask: np.ndarray) -> None:
    """Boolean (H, W) grid as a 1-bit PNG."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.dtype != np.bool_:
        raise DataFormatError(f"bitmap must be a 2-d boolean grid, got {m.dtype} {m.shape}")
    Image.fromarray(m).save(path, format="PNG")


def load_bitmap(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("1"), dtype=bool)
    return arr


def load_label_map(path, image_id: str, level: SemanticLevel,
                   n_masks: int | None = None) -> SegmentationMap:
    """`n_masks` should come from the paired embedding table; ids that were
    painted over entirely can exceed the max label present, so the PNG
    alone underestimates K. Falls back to max(labels) when omitted."""
    with Image.open(path) as im:
        labels = np.asarray(im, dtype=np.uint16)
    if labels.ndim != 2:
        raise DataFormatError(f"{path}: label map must be single-channel")
    k = int(labels.max()) if n_masks is None else n_masks
    return SegmentationMap(image_id=image_id, level=level, labels=labels, n_masks=k)


# ------------------------------------------------------------- raw mask sets

def save_raw_masks(directory, raw: RawMaskSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(raw.masks):
        im = Image.fromarray(mask.bitmap.astype(np.uint8) * 255)
        im.convert("1", dither=Image.Dither.NONE).save(
            directory / f"mask_{i:04d}.png", format="PNG"
        )
        sidecar = {"predicted_iou": mask.predicted_iou, "stability": mask.stability}
        (directory / f"mask_{i:04d}.json").write_text(json.dumps(sidecar))


def load_raw_masks(directory, image_id: str, level: SemanticLevel) -> RawMaskSet:
    directory = Path(directory)
    masks = []
    for png in sorted(directory.glob("mask_*.png")):
        sidecar_path = png.with_suffix(".json")
        if not sidecar_path.exists():
            raise DataFormatError(f"{png}: missing score sidecar")
        sidecar = json.loads(sidecar_path.read_text())
        for field in ("predicted_iou", "stability"):
            if field not in sidecar:
                raise DataFormatError(f"{sidecar_path}: missing {field!r}")
        with Image.open(png) as im:
            bitmap = np.asarray(im.convert("1"), dtype=bool)
        masks.append(RawMask(bitmap=bitmap,
                             predicted_iou=float(sidecar["predicted_iou"]),
                             stability=float(sidecar["stability"])))
    return RawMaskSet(image_id=image_id, level=level, masks=masks)


# ---------------------------------------------------------- ae params (LAEP)

def save_autoencoder_params(path, params: AutoencoderParams) -> None:
    params.validate()
    layers = params.layers()
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<III", params.input_dim, params.latent_dim, len(layers)))
        for layer in layers:
            rows, cols = layer.weights.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load_autoencoder_params(path) -> AutoencoderParams:
    with open(path, "rb") as f:
        _check_magic(f, PARAMS_MAGIC, path)
        dim_in, dim_lat, n_layers = struct.unpack("<III", _read_exact(f, 12, "header"))
        layers = []
        for i in range(n_layers):
            rows, cols = struct.unpack("<II", _read_exact(f, 8, f"layer {i} shape"))
            w = np.frombuffer(_read_exact(f, rows * cols * 4, f"layer {i} weights"),
                              dtype="<f4").reshape(rows, cols)
            b = np.frombuffer(_read_exact(f, rows * 4, f"layer {i} biases"), dtype="<f4")
            layers.append(LinearLayer(weights=w.astype(np.float64),
                                      bias=b.astype(np.float64)))
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after layer stack")
    # the encoder is the prefix ending at the first layer that lands on the
    # latent width (a hidden width equal to d is rejected at training time,
    # so the split is unambiguous)
    split = next((i for i, l in enumerate(layers) if l.weights.shape[0] == dim_lat), None)
    if split is None:
        raise DataFormatError(f"{path}: no layer outputs the latent dim {dim_lat}")
    params = AutoencoderParams(encoder=layers[: split + 1], decoder=layers[split + 1 :])
    if params.input_dim != dim_in or params.latent_dim != dim_lat:
        raise DataFormatError(
            f"{path}: layer stack maps {params.input_dim}->{params.latent_dim}, "
            f"header says {dim_in}->{dim_lat}"
        )
    params.validate()
    return params


# --------------------------------------------------------- query embeddings

def _dump_entries(path, labels, vectors) -> None:
    entries = [
        {"label": label, "vector": [float(v) for v in np.asarray(vec, dtype=np.float32)]}
        for label, vec in zip(labels, vectors)
    ]
    Path(path).write_text(json.dumps(entries, indent=1))


def _load_entries(path):
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(entries, list):
        raise DataFormatError(f"{path}: expected a JSON array")
    labels, vectors = [], []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "label" not in entry or "vector" not in entry:
            raise DataFormatError(f"{path}: entry {i} needs 'label' and 'vector'")
        labels.append(str(entry["label"]))
        vectors.append(np.asarray(entry["vector"], dtype=np.float32).astype(np.float64))
    if vectors and len({v.shape for v in vectors}) != 1:
        raise DataFormatError(f"{path}: vectors differ in length")
    return labels, vectors


def save_queries(path, queries: list[QueryEmbedding]) -> None:
    _dump_entries(path, [q.label for q in queries], [q.vector for q in queries])


def load_queries(path) -> list[QueryEmbedding]:
    labels, vectors = _load_entries(path)
    queries = [QueryEmbedding(label=l, vector=v) for l, v in zip(labels, vectors)]
    for q in queries:
        q.validate()
    return queries


def save_canonical(path, canon: CanonicalSet) -> None:
    _dump_entries(path, canon.labels, canon.vectors)


def load_canonical(path) -> CanonicalSet:
    labels, vectors = _load_entries(path)
    canon = CanonicalSet(labels=tuple(labels),
                         vectors=np.stack(vectors) if vectors else np.empty((0, 0)))
    canon.validate()
    return canon
