"""Gaussian scene data model, binary scene format, cameras, and the
synthetic fixture generator.

A scene is a fixed set of anisotropic 3D Gaussians (geometry, opacity,
color) plus three latent feature vectors per Gaussian, one per semantic
level. Geometry is immutable after load; only the latent fields are
written during field training.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"LSPL"
VERSION = 1

_HEADER = struct.Struct("<4sIQI")  # magic, version, count, latent_dim


class SemanticLevel(IntEnum):
    """The three mask granularities; iteration order is subpart < part < whole."""

    SUBPART = 0
    PART = 1
    WHOLE = 2

    @property
    def key(self) -> str:
        return self.name.lower()


LEVELS = tuple(SemanticLevel)


@dataclass
class Gaussian:
    """Single-primitive view; `latents` is (3, d) in level order s, p, w."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    latents: np.ndarray


def _record_dtype(d: int) -> np.dtype:
    return np.dtype(
        [
            ("mean", "<f4", 3),
            ("scale", "<f4", 3),
            ("rotation", "<f4", 4),
            ("opacity", "<f4"),
            ("color", "<f4", 3),
            ("latents", "<f4", (3, d)),
        ]
    )


class GaussianScene:
    """Structure-of-arrays Gaussian collection.

    Arrays are float32 row-per-Gaussian; `latents` has shape (n, 3, d) with
    axis 1 indexed by SemanticLevel. Rotations are unit quaternions stored
    (w, x, y, z).
    """

    def __init__(self, means, scales, rotations, opacities, colors, latents):
        self.means = np.ascontiguousarray(means, dtype=np.float32)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32)
        self.latents = np.ascontiguousarray(latents, dtype=np.float32)
        self.validate()

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[2]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            scale=self.scales[i],
            rotation=self.rotations[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
            latents=self.latents[i],
        )

    def level_channels(self, level: SemanticLevel) -> np.ndarray:
        """(n, d) latent block for one semantic level (a view, not a copy)."""
        return self.latents[:, int(level), :]

    def validate(self) -> None:
        n = self.means.shape[0]
        if n == 0:
            raise DataFormatError("scene is empty")
        shapes = {
            "means": (n, 3),
            "scales": (n, 3),
            "rotations": (n, 4),
            "opacities": (n,),
            "colors": (n, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise DataFormatError(f"{name} has shape {got}, expected {want}")
        if self.latents.ndim != 3 or self.latents.shape[:2] != (n, 3):
            raise DataFormatError(f"latents has shape {self.latents.shape}, expected ({n}, 3, d)")
        if self.latent_dim < 1:
            raise DataFormatError("latent_dim must be >= 1")

        for name in ("means", "scales", "rotations", "opacities", "colors", "latents"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr).reshape(n, -1).all(axis=1)
            if bad.any():
                raise DataFormatError(f"non-finite {name} at {int(np.argmax(bad))}")
        bad = (self.opacities < 0) | (self.opacities > 1)
        if bad.any():
            raise DataFormatError(f"opacity out of range at {int(np.argmax(bad))}")
        bad = (self.scales <= 0).any(axis=1)
        if bad.any():
            raise DataFormatError(f"non-positive scale at {int(np.argmax(bad))}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        bad = np.abs(norms - 1.0) > 1e-6
        if bad.any():
            raise DataFormatError(f"non-unit quaternion at {int(np.argmax(bad))}")

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.means.copy(),
            self.scales.copy(),
            self.rotations.copy(),
            self.opacities.copy(),
            self.colors.copy(),
            self.latents.copy(),
        )

    def covariances(self) -> np.ndarray:
        """(n, 3, 3) world-space covariances R.diag(scale^2).R^T, float64."""
        return quat_to_rotmat(self.rotations) @ _diag3(self.scales.astype(np.float64) ** 2) @ np.transpose(
            quat_to_rotmat(self.rotations), (0, 2, 1)
        )


def _diag3(rows: np.ndarray) -> np.ndarray:
    out = np.zeros((rows.shape[0], 3, 3))
    out[:, 0, 0] = rows[:, 0]
    out[:, 1, 1] = rows[:, 1]
    out[:, 2, 2] = rows[:, 2]
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(n, 4) unit quaternions (w, x, y, z) -> (n, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def save_scene(scene: GaussianScene, path) -> None:
    scene.validate()
    d = scene.latent_dim
    rec = np.empty(len(scene), dtype=_record_dtype(d))
    rec["mean"] = scene.means
    rec["scale"] = scene.scales
    rec["rotation"] = scene.rotations
    rec["opacity"] = scene.opacities
    rec["color"] = scene.colors
    rec["latents"] = scene.latents
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(scene), d))
        f.write(rec.tobytes())


def load_scene(path) -> GaussianScene:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, count, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if count == 0:
        raise DataFormatError(f"{path}: empty scene")
    if d < 1:
        raise DataFormatError(f"{path}: latent_dim must be >= 1, got {d}")
    dtype = _record_dtype(d)
    want = _HEADER.size + count * dtype.itemsize
    if len(raw) != want:
        raise DataFormatError(f"{path}: expected {want} bytes for {count} records, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEADER.size)
    return GaussianScene(
        rec["mean"], rec["scale"], rec["rotation"], rec["opacity"], rec["color"], rec["latents"]
    )


@dataclass
class Camera:
    """Pinhole camera; world_to_camera maps world points into a frame with
    +x right, +y down, +z forward (camera looks along +z)."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4 row-major rigid transform

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataFormatError(f"camera {self.id}: non-positive image size")
        if self.fx <= 0 or self.fy <= 0:
            raise DataFormatError(f"camera {self.id}: non-positive focal length")
        if not np.isfinite(self.world_to_camera).all():
            raise DataFormatError(f"camera {self.id}: non-finite transform")
        r = self.world_to_camera[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise DataFormatError(f"camera {self.id}: rotation block not orthonormal")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1], atol=1e-9):
            raise DataFormatError(f"camera {self.id}: last row must be [0,0,0,1]")


def save_cameras(cameras: list[Camera], path) -> None:
    rows = []
    for cam in cameras:
        cam.validate()
        rows.append(
            {
                "id": cam.id,
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(-1)],
            }
        )
    Path(path).write_text(json.dumps(rows, indent=1))


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(rows, list) or not rows:
        raise DataFormatError(f"{path}: expected a non-empty JSON array of cameras")
    cameras = []
    for i, row in enumerate(rows):
        try:
            cam = Camera(
                id=str(row["id"]),
                width=int(row["width"]),
                height=int(row["height"]),
                fx=float(row["fx"]),
                fy=float(row["fy"]),
                cx=float(row["cx"]),
                cy=float(row["cy"]),
                world_to_camera=np.array(row["world_to_camera"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{path}: camera entry {i} malformed ({e})") from e
        cam.validate()
        cameras.append(cam)
    return cameras


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """4x4 world-to-camera for a camera at `eye` looking at `target` (y-down frame)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[0, :3] = right
    m[1, :3] = down
    m[2, :3] = fwd
    m[:3, 3] = -m[:3, :3] @ eye
    return m


@dataclass
class SyntheticSceneSpec:
    """Knobs for the bundled synthetic fixture.

    The scene holds `n_objects` compact blobs on a ring plus a distant
    scenery shell enclosing the cameras, so every rendered pixel is covered
    by some planted region. Region ids are 1..n_objects for the blobs and
    n_objects+1 for the shell.
    """

    n_gaussians: int = 2000
    n_objects: int = 3
    n_views: int = 8
    width: int = 128
    height: int = 128
    latent_dim: int = 3
    seed: int = 0
    ring_radius: float = 1.2
    blob_radius: float = 0.5
    # blobs alternate +/- this height; with the ring and the camera orbit
    # coplanar some view always catches two objects collinear with the eye
    # and the near one eclipses the far one completely
    object_height: float = 0.55
    camera_radius: float = 3.5
    # twice the camera orbit: every shell point whose projection lands near
    # the image sits behind the object ring in depth, so the backdrop never
    # occludes or bleeds into the objects
    shell_radius: float = 7.0
    focal: float | None = None  # None: 1.25 * width, keeping fov size-free


def synth_scene(spec: SyntheticSceneSpec):
    """Deterministic fixture: (scene, cameras, per-Gaussian region ids).

    Region ids let downstream tests derive true per-pixel labels by
    compositing one-hot region channels (see fixture helpers).
    """
    if spec.n_gaussians <= 0:
        raise DataFormatError("n_gaussians must be positive")
    if spec.n_objects < 1:
        raise DataFormatError("n_objects must be >= 1")
    rng = np.random.default_rng(spec.seed)

    n_shell = max(spec.n_gaussians // 4, 1)
    n_obj_total = spec.n_gaussians - n_shell
    if n_obj_total < spec.n_objects:
        raise DataFormatError("too few Gaussians for the requested object count")
    per_obj = np.full(spec.n_objects, n_obj_total // spec.n_objects)
    per_obj[: n_obj_total % spec.n_objects] += 1

    means, scales, ids = [], [], []
    for k in range(spec.n_objects):
        # ring phase keeps object pairs off the camera azimuths
        ang = 2 * math.pi * k / spec.n_objects + math.pi / 8
        y = spec.object_height * (1.0 if k % 2 == 0 else -1.0)
        center = np.array([spec.ring_radius * math.cos(ang), y, spec.ring_radius * math.sin(ang)])
        # solid ellipsoid with a dense crust, not a gaussian cloud: feature
        # targets are sharp per-pixel labels, and a fuzzy silhouette would
        # leave a wide ring of blended pixels no latent assignment can fit
        dirs = rng.normal(size=(per_obj[k], 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        interior = np.cbrt(rng.uniform(size=(per_obj[k], 1)))
        on_crust = rng.uniform(size=(per_obj[k], 1)) < 0.5
        radii = spec.blob_radius * np.where(on_crust, 1.0, interior)
        pts = center + dirs * radii * [1.0, 0.8, 1.0]
        means.append(pts)
        scales.append(rng.uniform(0.03, 0.06, size=(per_obj[k], 3)))
        ids.append(np.full(per_obj[k], k + 1, dtype=np.int32))

    # scenery shell: golden-spiral points on a sphere well outside the camera
    # ring, sized to tile the sphere without gaps so the backdrop is opaque
    i = np.arange(n_shell)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    y = 1.0 - 2.0 * (i + 0.5) / n_shell
    r = np.sqrt(1.0 - y * y)
    shell = spec.shell_radius * np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    spacing = math.sqrt(4.0 * math.pi * spec.shell_radius**2 / n_shell)
    means.append(shell)
    scales.append(rng.uniform(0.65 * spacing, 0.9 * spacing, size=(n_shell, 3)))
    ids.append(np.full(n_shell, spec.n_objects + 1, dtype=np.int32))

    means = np.concatenate(means)
    scales = np.concatenate(scales)
    object_ids = np.concatenate(ids)
    n = means.shape[0]

    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # rendered features are alpha-weighted sums, so feature targets are only
    # reachable where coverage saturates; keep the fixture near-opaque the way
    # a converged reconstruction would be
    opacities = rng.uniform(0.88, 0.98, size=n)
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    latents = np.zeros((n, 3, spec.latent_dim), dtype=np.float32)

    scene = GaussianScene(means, scales, q, opacities, colors, latents)

    cameras = []
    focal = 1.25 * spec.width if spec.focal is None else spec.focal
    heights = [0.45 if v % 2 == 0 else -0.45 for v in range(spec.n_views)]
    for v in range(spec.n_views):
        ang = 2 * math.pi * v / spec.n_views
        eye = np.array(
            [spec.camera_radius * math.cos(ang), heights[v], spec.camera_radius * math.sin(ang)]
        )
        cameras.append(
            Camera(
                id=f"view{v:02d}",
                width=spec.width,
                height=spec.height,
                fx=focal,
                fy=focal,
                cx=spec.width / 2.0,
                cy=spec.height / 2.0,
                world_to_camera=look_at(eye, (0.0, 0.0, 0.0)),
            )
        )
    return scene, cameras, object_ids
