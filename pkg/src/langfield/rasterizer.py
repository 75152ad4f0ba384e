"""Screen-space projection and tile-based alpha compositing of arbitrary
per-Gaussian channel vectors, with analytic gradients w.r.t. the channels.

Compositing follows front-to-back alpha blending over depth-sorted splats:
F(v) = sum_i f_i * alpha_i * prod_{j<i} (1 - alpha_j), where
alpha_i = opacity_i * exp(-q_i(v)/2) and q_i is the conic quadratic form.
Support is truncated at the 3-sigma ellipse (q > 9 contributes nothing),
which makes 3-sigma bounding-box tile binning exact. Blending for a pixel
stops once its transmittance falls below `transmittance_min`.

Kernels are compiled per channel count so the inner accumulation loop is
unrolled/vectorized for the given k; fastmath is restricted to FMA
contraction, keeping results deterministic.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataFormatError, NumericalError
from .runtime import split_ranges, worker_count
from .scene import Camera, GaussianScene, SemanticLevel, quat_to_rotmat


@dataclass
class RasterConfig:
    tile_size: int = 16
    blur: float = 0.3          # isotropic px^2 added to every 2D covariance
    near_plane: float = 0.01   # camera-frame z cull threshold, world units
    alpha_clamp: float = 0.99  # per-splat alpha ceiling before blending
    transmittance_min: float = 1e-4
    max_sigma: float = 3.0     # support/bbox radius in standard deviations
    frustum_margin: float = 1.3  # keep splats whose center is within this many
    # NDC half-extents of the image center; inf disables the cull


DEFAULT_RASTER = RasterConfig()


@dataclass
class Splat2D:
    gaussian_index: int
    center2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float


class Splat2DBatch:
    """Projected splats, structure-of-arrays; order preserves scene order.

    `conic` is the inverse of `cov2d`; `bbox` holds inclusive integer pixel
    bounds (x0, x1, y0, y1) of the max_sigma ellipse, unclipped.
    """

    def __init__(self, gaussian_index, center2d, cov2d, depth, opacity, conic, bbox):
        self.gaussian_index = gaussian_index
        self.center2d = center2d
        self.cov2d = cov2d
        self.depth = depth
        self.opacity = opacity
        self.conic = conic
        self.bbox = bbox

    def __len__(self):
        return self.gaussian_index.shape[0]

    def __getitem__(self, i) -> Splat2D:
        return Splat2D(
            gaussian_index=int(self.gaussian_index[i]),
            center2d=self.center2d[i],
            cov2d=self.cov2d[i],
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def build(cls, gaussian_index, center2d, cov2d, depth, opacity, max_sigma=3.0):
        """Construct from raw 2D parameters, deriving conics and bounding
        boxes (handy for hand-made splat stacks in tests)."""
        center2d = np.asarray(center2d, dtype=np.float64).reshape(-1, 2)
        cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        if (det <= 0).any():
            raise NumericalError("degenerate 2D covariance")
        conic = np.empty_like(cov2d)
        conic[:, 0, 0] = cov2d[:, 1, 1]
        conic[:, 1, 1] = cov2d[:, 0, 0]
        conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1]
        conic /= det[:, None, None]
        rx = max_sigma * np.sqrt(cov2d[:, 0, 0])
        ry = max_sigma * np.sqrt(cov2d[:, 1, 1])
        bbox = np.stack(
            [
                np.floor(center2d[:, 0] - rx),
                np.ceil(center2d[:, 0] + rx),
                np.floor(center2d[:, 1] - ry),
                np.ceil(center2d[:, 1] + ry),
            ],
            axis=1,
        ).astype(np.int64)
        return cls(
            gaussian_index=np.asarray(gaussian_index, dtype=np.int64),
            center2d=center2d,
            cov2d=cov2d,
            depth=np.asarray(depth, dtype=np.float64),
            opacity=np.asarray(opacity, dtype=np.float64),
            conic=conic,
            bbox=bbox,
        )


@dataclass
class FeatureImage:
    width: int
    height: int
    channels: int
    data: np.ndarray  # (H, W, k) float64
    alpha: np.ndarray | None = None  # (H, W) float64; None once round-tripped
    # through the on-disk format, which stores channels only

    def validate(self) -> None:
        if not np.isfinite(self.data).all():
            raise NumericalError("non-finite feature image")
        if self.alpha is not None and (self.alpha.min() < 0 or self.alpha.max() > 1):
            raise NumericalError("alpha plane out of [0, 1]")


@dataclass
class TileGrid:
    """CSR per-tile splat lists; ids index the splat batch, each tile's ids
    sorted by (depth, gaussian_index)."""

    tile_size: int
    n_tx: int
    n_ty: int
    offsets: np.ndarray  # (n_tiles + 1,) int64
    ids: np.ndarray      # int64 into the batch

    def tile_ids(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.n_tx + tx
        return self.ids[self.offsets[t] : self.offsets[t + 1]]


def project(scene: GaussianScene, camera: Camera, cfg: RasterConfig = DEFAULT_RASTER) -> Splat2DBatch:
    """EWA projection of every Gaussian into screen space, with near-plane
    and out-of-image culling. Output order preserves scene order.

    Splats whose projected center lands outside `frustum_margin` NDC
    half-extents are dropped even if their 3-sigma box touches the image:
    the local-affine Jacobian is untrustworthy that far off axis (a Gaussian
    slightly in front of the near plane but far to the side projects to an
    absurdly wide footprint), so those splats would smear spurious mass
    across the frame. For footprints smaller than the margin band this cull
    is strictly weaker than the bounding-box one.
    """
    camera.validate()
    w2c = camera.world_to_camera
    rot = w2c[:3, :3]
    means_cam = scene.means.astype(np.float64) @ rot.T + w2c[:3, 3]
    z = means_cam[:, 2]
    keep = z > cfg.near_plane

    x, y, zk = means_cam[keep, 0], means_cam[keep, 1], means_cam[keep, 2]
    fx, fy = camera.fx, camera.fy
    cx_pix = fx * x / zk + camera.cx
    cy_pix = fy * y / zk + camera.cy

    cov3 = quat_to_rotmat(scene.rotations[keep])
    s2 = scene.scales[keep].astype(np.float64) ** 2
    cov3 = cov3 @ (s2[:, :, None] * np.transpose(cov3, (0, 2, 1)))
    cov_cam = rot[None] @ cov3 @ rot.T[None]

    m = keep.sum()
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = fx / zk
    jac[:, 0, 2] = -fx * x / zk**2
    jac[:, 1, 1] = fy / zk
    jac[:, 1, 2] = -fy * y / zk**2
    cov2 = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
    cov2[:, 0, 0] += cfg.blur
    cov2[:, 1, 1] += cfg.blur

    rx = cfg.max_sigma * np.sqrt(cov2[:, 0, 0])
    ry = cfg.max_sigma * np.sqrt(cov2[:, 1, 1])
    x0 = np.floor(cx_pix - rx)
    x1 = np.ceil(cx_pix + rx)
    y0 = np.floor(cy_pix - ry)
    y1 = np.ceil(cy_pix + ry)
    visible = (x1 >= 0) & (x0 <= camera.width - 1) & (y1 >= 0) & (y0 <= camera.height - 1)
    visible &= np.abs(cx_pix - 0.5 * camera.width) <= 0.5 * cfg.frustum_margin * camera.width
    visible &= np.abs(cy_pix - 0.5 * camera.height) <= 0.5 * cfg.frustum_margin * camera.height

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    if (det[visible] <= 0).any():
        raise NumericalError("degenerate projected covariance")
    inv = np.empty_like(cov2)
    inv[:, 0, 0] = cov2[:, 1, 1]
    inv[:, 1, 1] = cov2[:, 0, 0]
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2[:, 0, 1]
    inv /= np.where(det == 0, 1.0, det)[:, None, None]

    idx = np.flatnonzero(keep)[visible]
    center2d = np.stack([cx_pix, cy_pix], axis=1)[visible]
    bbox = np.stack([x0, x1, y0, y1], axis=1)[visible].astype(np.int64)
    return Splat2DBatch(
        gaussian_index=idx,
        center2d=np.ascontiguousarray(center2d),
        cov2d=np.ascontiguousarray(cov2[visible]),
        depth=np.ascontiguousarray(zk[visible]),
        opacity=scene.opacities[keep][visible].astype(np.float64),
        conic=np.ascontiguousarray(inv[visible]),
        bbox=bbox,
    )


def build_tile_grid(splats: Splat2DBatch, camera: Camera, tile_size: int = 16) -> TileGrid:
    """Bin splats into tiles their (clipped) bounding boxes touch."""
    n_tx = (camera.width + tile_size - 1) // tile_size
    n_ty = (camera.height + tile_size - 1) // tile_size
    order = np.lexsort((splats.gaussian_index, splats.depth))

    bbox = splats.bbox[order]
    tx0 = np.maximum(bbox[:, 0] // tile_size, 0)
    tx1 = np.minimum(bbox[:, 1] // tile_size, n_tx - 1)
    ty0 = np.maximum(bbox[:, 2] // tile_size, 0)
    ty1 = np.minimum(bbox[:, 3] // tile_size, n_ty - 1)
    # a bbox that misses the image entirely must not land in a ragged edge tile
    off = (
        (bbox[:, 0] > camera.width - 1)
        | (bbox[:, 1] < 0)
        | (bbox[:, 2] > camera.height - 1)
        | (bbox[:, 3] < 0)
    )
    tx1 = np.where(off, tx0 - 1, tx1)

    counts = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    spans_x = np.maximum(tx1 - tx0 + 1, 0)
    spans_y = np.maximum(ty1 - ty0 + 1, 0)
    total = int((spans_x * spans_y).sum())
    ids = np.empty(total, dtype=np.int64)
    _fill_tile_lists(order, tx0, tx1, ty0, ty1, n_tx, counts, ids)
    return TileGrid(tile_size=tile_size, n_tx=n_tx, n_ty=n_ty, offsets=counts, ids=ids)


@njit(cache=True, nogil=True)
def _fill_tile_lists(order, tx0, tx1, ty0, ty1, n_tx, counts, ids):
    n = order.shape[0]
    for i in range(n):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                counts[ty * n_tx + tx + 1] += 1
    for t in range(1, counts.shape[0]):
        counts[t] += counts[t - 1]
    cursor = counts[:-1].copy()
    # depth-sorted insertion per tile: iterating i in sorted order keeps
    # every tile list sorted by (depth, gaussian_index)
    for i in range(n):
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                t = ty * n_tx + tx
                ids[cursor[t]] = order[i]
                cursor[t] += 1


# exp(x) for x in [-4.5, 0]: degree-12 polynomial, max abs err 2.0e-10.
# Generated from a Chebyshev fit of exp on that interval; kernels clamp x
# to the domain and zero the result outside the truncated support anyway.
_EXP_COEF = (
    2.407930263319576e-10,
    9.434205627247178e-09,
    1.8195369410678123e-07,
    2.3591070646490985e-06,
    2.3611439771837003e-05,
    0.00019589192812300812,
    0.0013851704340585539,
    0.00832961463098106,
    0.04166425950834871,
    0.1666657334226014,
    0.49999981103475255,
    0.9999999848981416,
    0.9999999997991574,
)

_CUTOFF_Q = 9.0  # 3-sigma support boundary in conic units

_kernel_cache: dict[int, tuple] = {}


def _kernels(k: int):
    """Forward/backward compositing kernels specialized for k channels."""
    if k in _kernel_cache:
        return _kernel_cache[k]

    c12, c11, c10, c9, c8, c7, c6, c5, c4, c3, c2, c1, c0 = _EXP_COEF

    @njit(nogil=True, fastmath={"contract"})
    def forward(t_start, t_end, H, W, tile, centers, conics, opac, bboxes,
                offsets, ids, feats, out, alpha, alpha_clamp, trans_min):
        n_tx = (W + tile - 1) // tile
        trans = np.empty(tile * tile)
        arow = np.empty(tile)
        for t in range(t_start, t_end):
            ty = t // n_tx
            tx = t % n_tx
            y0 = ty * tile
            x0 = tx * tile
            y1 = min(y0 + tile, H)
            x1 = min(x0 + tile, W)
            for pp in range(tile * tile):
                trans[pp] = 1.0
            live = (y1 - y0) * (x1 - x0)
            for s in range(offsets[t], offsets[t + 1]):
                if live == 0:
                    break
                i = ids[s]
                ca = conics[i, 0, 0]
                cb2 = 2.0 * conics[i, 0, 1]
                cc = conics[i, 1, 1]
                mx = centers[i, 0]
                my = centers[i, 1]
                o = opac[i]
                py0 = max(y0, bboxes[i, 2])
                py1 = min(y1 - 1, bboxes[i, 3])
                px0 = max(x0, bboxes[i, 0])
                px1 = min(x1 - 1, bboxes[i, 1])
                for py in range(py0, py1 + 1):
                    dy = py - my
                    span = px1 - px0 + 1
                    dx0 = px0 - mx
                    cyy = cc * dy * dy
                    cxy = cb2 * dy
                    for j in range(span):
                        dx = dx0 + j
                        q = ca * dx * dx + cxy * dx + cyy
                        x = -0.5 * q
                        if x < -4.5:
                            x = -4.5
                        p = c12
                        p = p * x + c11
                        p = p * x + c10
                        p = p * x + c9
                        p = p * x + c8
                        p = p * x + c7
                        p = p * x + c6
                        p = p * x + c5
                        p = p * x + c4
                        p = p * x + c3
                        p = p * x + c2
                        p = p * x + c1
                        p = p * x + c0
                        a = o * p
                        if a > alpha_clamp:
                            a = alpha_clamp
                        if q > _CUTOFF_Q:
                            a = 0.0
                        arow[j] = a
                    rowbase = (py - y0) * tile - x0
                    for j in range(span):
                        a = arow[j]
                        if a <= 0.0:
                            continue
                        px = px0 + j
                        T = trans[rowbase + px]
                        if T < trans_min:
                            continue
                        w = a * T
                        for c in range(k):
                            out[py, px, c] += w * feats[i, c]
                        Tn = T * (1.0 - a)
                        trans[rowbase + px] = Tn
                        if Tn < trans_min:
                            live -= 1
            for yy in range(y1 - y0):
                for xx in range(x1 - x0):
                    alpha[y0 + yy, x0 + xx] = 1.0 - trans[yy * tile + xx]

    @njit(nogil=True, fastmath={"contract"})
    def backward(t_start, t_end, H, W, tile, centers, conics, opac, bboxes,
                 offsets, ids, upstream, grad, alpha_clamp, trans_min):
        n_tx = (W + tile - 1) // tile
        trans = np.empty(tile * tile)
        arow = np.empty(tile)
        for t in range(t_start, t_end):
            ty = t // n_tx
            tx = t % n_tx
            y0 = ty * tile
            x0 = tx * tile
            y1 = min(y0 + tile, H)
            x1 = min(x0 + tile, W)
            for pp in range(tile * tile):
                trans[pp] = 1.0
            live = (y1 - y0) * (x1 - x0)
            for s in range(offsets[t], offsets[t + 1]):
                if live == 0:
                    break
                i = ids[s]
                ca = conics[i, 0, 0]
                cb2 = 2.0 * conics[i, 0, 1]
                cc = conics[i, 1, 1]
                mx = centers[i, 0]
                my = centers[i, 1]
                o = opac[i]
                py0 = max(y0, bboxes[i, 2])
                py1 = min(y1 - 1, bboxes[i, 3])
                px0 = max(x0, bboxes[i, 0])
                px1 = min(x1 - 1, bboxes[i, 1])
                for py in range(py0, py1 + 1):
                    dy = py - my
                    span = px1 - px0 + 1
                    dx0 = px0 - mx
                    cyy = cc * dy * dy
                    cxy = cb2 * dy
                    for j in range(span):
                        dx = dx0 + j
                        q = ca * dx * dx + cxy * dx + cyy
                        x = -0.5 * q
                        if x < -4.5:
                            x = -4.5
                        p = c12
                        p = p * x + c11
                        p = p * x + c10
                        p = p * x + c9
                        p = p * x + c8
                        p = p * x + c7
                        p = p * x + c6
                        p = p * x + c5
                        p = p * x + c4
                        p = p * x + c3
                        p = p * x + c2
                        p = p * x + c1
                        p = p * x + c0
                        a = o * p
                        if a > alpha_clamp:
                            a = alpha_clamp
                        if q > _CUTOFF_Q:
                            a = 0.0
                        arow[j] = a
                    rowbase = (py - y0) * tile - x0
                    for j in range(span):
                        a = arow[j]
                        if a <= 0.0:
                            continue
                        px = px0 + j
                        T = trans[rowbase + px]
                        if T < trans_min:
                            continue
                        w = a * T
                        for c in range(k):
                            grad[i, c] += w * upstream[py, px, c]
                        Tn = T * (1.0 - a)
                        trans[rowbase + px] = Tn
                        if Tn < trans_min:
                            live -= 1

    _kernel_cache[k] = (forward, backward)
    return _kernel_cache[k]


class PreparedRender:
    """Projection + tile binning fixed; forward/backward reuse the same
    sorted splat arrays (one projection per training iteration)."""

    def __init__(self, splats: Splat2DBatch, camera: Camera, cfg: RasterConfig):
        self.camera = camera
        self.cfg = cfg
        self.n_splats = len(splats)
        self.gaussian_index = splats.gaussian_index
        grid = build_tile_grid(splats, camera, cfg.tile_size)
        self.offsets = grid.offsets
        self.ids = grid.ids
        self.n_tiles = grid.n_tx * grid.n_ty
        self.centers = splats.center2d
        self.conics = splats.conic
        self.opac = splats.opacity
        self.bboxes = splats.bbox

    def _run(self, kernel, extra):
        cam, cfg = self.camera, self.cfg
        args = (cam.height, cam.width, cfg.tile_size, self.centers, self.conics,
                self.opac, self.bboxes, self.offsets, self.ids)
        ranges = split_ranges(self.n_tiles, worker_count())
        if len(ranges) == 1:
            kernel(0, self.n_tiles, *args, *extra, cfg.alpha_clamp, cfg.transmittance_min)
            return
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            futs = [
                pool.submit(kernel, t0, t1, *args, *extra, cfg.alpha_clamp, cfg.transmittance_min)
                for (t0, t1) in ranges
            ]
            for f in futs:
                f.result()

    def forward(self, channels: np.ndarray) -> FeatureImage:
        cam = self.camera
        channels = np.asarray(channels, dtype=np.float64)
        k = channels.shape[1]
        feats = np.ascontiguousarray(channels[self.gaussian_index])
        out = np.zeros((cam.height, cam.width, k))
        alpha = np.zeros((cam.height, cam.width))
        fwd, _ = _kernels(k)
        self._run(fwd, (feats, out, alpha))
        return FeatureImage(width=cam.width, height=cam.height, channels=k, data=out, alpha=alpha)

    def backward(self, upstream: np.ndarray, n_gaussians: int) -> np.ndarray:
        cam = self.camera
        upstream = np.ascontiguousarray(upstream, dtype=np.float64)
        k = upstream.shape[2]
        _, bwd = _kernels(k)
        workers = worker_count()
        ranges = split_ranges(self.n_tiles, workers)
        args = (cam.height, cam.width, self.cfg.tile_size, self.centers, self.conics,
                self.opac, self.bboxes, self.offsets, self.ids, upstream)
        if len(ranges) == 1:
            grad_splat = np.zeros((self.n_splats, k))
            bwd(0, self.n_tiles, *args, grad_splat, self.cfg.alpha_clamp,
                self.cfg.transmittance_min)
        else:
            buffers = [np.zeros((self.n_splats, k)) for _ in ranges]
            with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
                futs = [
                    pool.submit(bwd, t0, t1, *args, buf, self.cfg.alpha_clamp,
                                self.cfg.transmittance_min)
                    for (t0, t1), buf in zip(ranges, buffers)
                ]
                for f in futs:
                    f.result()
            grad_splat = buffers[0]
            for buf in buffers[1:]:  # fixed merge order keeps results deterministic
                grad_splat += buf
        grad = np.zeros((n_gaussians, k))
        grad[self.gaussian_index] = grad_splat
        return grad


def composite_forward(
    splats: Splat2DBatch,
    channels: np.ndarray,
    camera: Camera,
    cfg: RasterConfig = DEFAULT_RASTER,
) -> FeatureImage:
    """Composite per-Gaussian channel rows (indexed by gaussian_index) into
    an H x W x k image plus accumulated-alpha plane."""
    channels = np.asarray(channels)
    if channels.ndim != 2:
        raise DataFormatError(f"channels must be 2-D, got shape {channels.shape}")
    if len(splats) and channels.shape[0] <= splats.gaussian_index.max():
        raise DataFormatError(
            f"channels has {channels.shape[0]} rows, need at least "
            f"{int(splats.gaussian_index.max()) + 1}"
        )
    return PreparedRender(splats, camera, cfg).forward(channels)


def composite_backward(
    splats: Splat2DBatch,
    channels: np.ndarray,
    camera: Camera,
    upstream: np.ndarray,
    cfg: RasterConfig = DEFAULT_RASTER,
) -> np.ndarray:
    """d(sum(upstream * F)) / d(channels): per-Gaussian gradient rows.
    Culled Gaussians receive zero gradient."""
    channels = np.asarray(channels)
    upstream = np.asarray(upstream)
    if upstream.shape != (camera.height, camera.width, channels.shape[1]):
        raise DataFormatError(
            f"upstream shape {upstream.shape} does not match "
            f"({camera.height}, {camera.width}, {channels.shape[1]})"
        )
    return PreparedRender(splats, camera, cfg).backward(upstream, channels.shape[0])


def render_channels(
    scene: GaussianScene,
    camera: Camera,
    channels: np.ndarray,
    cfg: RasterConfig = DEFAULT_RASTER,
) -> FeatureImage:
    """Project then composite arbitrary per-Gaussian channels."""
    return composite_forward(project(scene, camera, cfg), channels, camera, cfg)


def render_level(
    scene: GaussianScene,
    camera: Camera,
    level: SemanticLevel,
    cfg: RasterConfig = DEFAULT_RASTER,
) -> FeatureImage:
    """Composite one semantic level's latent vectors."""
    return render_channels(scene, camera, scene.level_channels(level), cfg)
