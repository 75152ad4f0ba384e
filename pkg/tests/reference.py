"""Independent reference implementations the test suites compare against.

Everything here trades speed for obviousness: per-pixel python loops over
globally depth-sorted splats, np.exp, numerical differentiation. None of it
shares code with the production rasterizer beyond the data containers.
"""
from __future__ import annotations

import numpy as np

from langfield.rasterizer import Splat2DBatch
from langfield.scene import Camera, GaussianScene, look_at

CUTOFF_Q = 9.0


def composite_reference(splats, channels, camera, alpha_clamp=0.99, transmittance_min=1e-4):
    """Naive compositing: for every pixel, walk every splat in global
    (depth, gaussian_index) order, no tiles, no bounding boxes, np.exp."""
    H, W = camera.height, camera.width
    channels = np.asarray(channels, dtype=np.float64)
    k = channels.shape[1]
    out = np.zeros((H, W, k))
    alpha_out = np.zeros((H, W))
    order = np.lexsort((splats.gaussian_index, splats.depth))
    conics = np.linalg.inv(splats.cov2d)
    for py in range(H):
        for px in range(W):
            T = 1.0
            acc = np.zeros(k)
            for s in order:
                if T < transmittance_min:
                    break
                d = np.array([px, py], dtype=np.float64) - splats.center2d[s]
                q = d @ conics[s] @ d
                if q > CUTOFF_Q:
                    continue
                a = min(splats.opacity[s] * np.exp(-0.5 * q), alpha_clamp)
                acc += channels[splats.gaussian_index[s]] * (a * T)
                T *= 1.0 - a
            out[py, px] = acc
            alpha_out[py, px] = 1.0 - T
    return out, alpha_out


def composite_reference_fast(splats, channels, camera, alpha_clamp=0.99,
                             transmittance_min=1e-4):
    """Same walk as composite_reference, vectorized over pixels instead of
    splats. Each splat touches only its 3-sigma axis-aligned box; outside it
    q > 9 exactly (the box circumscribes the cutoff ellipse), so the skip
    matches the per-pixel `continue`. A pixel whose transmittance has fallen
    below the floor stops blending, which is the `break` in array form: T
    never grows back."""
    H, W = camera.height, camera.width
    channels = np.asarray(channels, dtype=np.float64)
    out = np.zeros((H, W, channels.shape[1]))
    T = np.ones((H, W))
    order = np.lexsort((splats.gaussian_index, splats.depth))
    conics = np.linalg.inv(splats.cov2d)
    for s in order:
        cx, cy = splats.center2d[s]
        rx = 3.0 * np.sqrt(splats.cov2d[s, 0, 0])
        ry = 3.0 * np.sqrt(splats.cov2d[s, 1, 1])
        x0, x1 = max(int(np.floor(cx - rx)), 0), min(int(np.ceil(cx + rx)), W - 1)
        y0, y1 = max(int(np.floor(cy - ry)), 0), min(int(np.ceil(cy + ry)), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1, dtype=np.float64) - cx
        dy = np.arange(y0, y1 + 1, dtype=np.float64) - cy
        c = conics[s]
        q = (c[0, 0] * dx**2)[None, :] + (c[1, 1] * dy**2)[:, None] \
            + (2.0 * c[0, 1]) * dy[:, None] * dx[None, :]
        t = T[y0:y1 + 1, x0:x1 + 1]
        a = np.minimum(splats.opacity[s] * np.exp(-0.5 * q), alpha_clamp)
        blend = (q <= CUTOFF_Q) & (t >= transmittance_min)
        w = np.where(blend, a * t, 0.0)
        out[y0:y1 + 1, x0:x1 + 1] += w[:, :, None] * channels[splats.gaussian_index[s]]
        T[y0:y1 + 1, x0:x1 + 1] = np.where(blend, t * (1.0 - a), t)
    return out, 1.0 - T


def transmittance_trace(opacities_at_pixel, alpha_clamp=0.99, transmittance_min=1e-4):
    """Sequence of transmittance values after each blended splat at one
    pixel, given the raw alphas in depth order."""
    T = 1.0
    trace = [T]
    for a in opacities_at_pixel:
        if T < transmittance_min:
            break
        T *= 1.0 - min(a, alpha_clamp)
        trace.append(T)
    return trace


def pixel_of(point, camera: Camera) -> np.ndarray:
    p = camera.world_to_camera[:3, :3] @ np.asarray(point, dtype=np.float64)
    p = p + camera.world_to_camera[:3, 3]
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def cov2d_reference(mean, cov_world, camera: Camera, blur=0.3, h=1e-5) -> np.ndarray:
    """Screen-space covariance via a central-difference Jacobian of the full
    world-to-pixel map, never forming the analytic Jacobian."""
    J = np.zeros((2, 3))
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        J[:, axis] = (pixel_of(mean + e, camera) - pixel_of(mean - e, camera)) / (2 * h)
    return J @ cov_world @ J.T + blur * np.eye(2)


def random_batch(rng: np.random.Generator, n: int, width: int, height: int) -> Splat2DBatch:
    """Hand-made 2D splats, centers allowed slightly off-image."""
    centers = np.stack(
        [
            rng.uniform(-4.0, width + 4.0, n),
            rng.uniform(-4.0, height + 4.0, n),
        ],
        axis=1,
    )
    cov = np.zeros((n, 2, 2))
    for i in range(n):
        a = rng.uniform(0.4, 6.0)
        b = rng.uniform(0.4, 6.0)
        theta = rng.uniform(0.0, np.pi)
        r = np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        cov[i] = r @ np.diag([a, b]) @ r.T
    return Splat2DBatch.build(
        gaussian_index=np.arange(n),
        center2d=centers,
        cov2d=cov,
        depth=rng.uniform(0.5, 10.0, n),
        opacity=rng.uniform(0.05, 0.95, n),
    )


def ae_loss_reference(params, batch, lambda_l1=1.0, lambda_cos=1.0):
    """Scalar per-sample recomputation of the autoencoder objective."""
    import math

    from langfield.autoencoder import decode, encode

    total_l1, total_cos = 0.0, 0.0
    for x in np.asarray(batch, dtype=np.float64):
        r = decode(params, encode(params, x))
        total_l1 += sum(abs(a - b) for a, b in zip(r, x)) / len(x)
        dot = math.fsum(a * b for a, b in zip(r, x))
        rn = math.sqrt(math.fsum(a * a for a in r))
        xn = math.sqrt(math.fsum(b * b for b in x))
        total_cos += 1.0 - dot / max(rn * xn, 1e-12)
    n = len(batch)
    l1, cos = total_l1 / n, max(total_cos / n, 0.0)
    return lambda_l1 * l1 + lambda_cos * cos, l1, cos


def ae_kink_distance(params, batch):
    """Distance from the nearest non-differentiable point of the objective:
    L1 kinks (recon == input coordinate), ReLU kinks (zero pre-activation),
    and the cosine term's singularity at a zero reconstruction. Finite-
    difference gradient checks are only meaningful when this is well above
    the probe step."""
    from langfield.autoencoder import _mlp_forward

    z, enc_pre = _mlp_forward(params.encoder, np.asarray(batch, dtype=np.float64))
    recon, dec_pre = _mlp_forward(params.decoder, z)
    dists = [np.abs(recon - batch).min()]
    for pre in enc_pre[:-1] + dec_pre[:-1]:
        if pre.size:
            dists.append(np.abs(pre).min())
    dists.append(np.linalg.norm(recon, axis=1).min())
    return float(min(dists))


def random_ae_setup(seed: int):
    """Random small autoencoder + unit-norm batch + loss weights, the
    configuration family used by the gradient suites."""
    from langfield.autoencoder import AutoencoderConfig, init_params

    rng = np.random.default_rng(seed)
    dim = int(rng.integers(6, 40))
    d = int(rng.integers(1, 5))
    widths = []
    for _ in range(int(rng.integers(0, 3))):
        w = int(rng.integers(3, 16))
        if w != d:
            widths.append(w)
    cfg = AutoencoderConfig(input_dim=dim, latent_dim=d, hidden=tuple(widths))
    params = init_params(cfg, rng)
    batch = rng.normal(0.0, 1.0, (5, dim))
    batch /= np.linalg.norm(batch, axis=1, keepdims=True)
    return params, batch, float(rng.uniform(0.3, 2.0)), float(rng.uniform(0.3, 2.0))


def planted_subspace_rows(rng: np.random.Generator, n: int = 480, dim: int = 512,
                          rank: int = 3) -> np.ndarray:
    """Unit-norm rows lying exactly on a random rank-d linear subspace."""
    q, _ = np.linalg.qr(rng.normal(0.0, 1.0, (dim, rank)))
    rows = rng.normal(0.0, 1.0, (n, rank)) @ q.T
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def random_masks(rng: np.random.Generator, n: int, h: int, w: int):
    """Random disc and rectangle bitmaps with plausible score ranges."""
    from langfield.masks import RawMask

    yy, xx = np.mgrid[0:h, 0:w]
    masks = []
    for _ in range(n):
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(2.0, max(h, w) / 3.0)
            bitmap = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1 = int(rng.integers(y0, h)) + 1
            x1 = int(rng.integers(x0, w)) + 1
            bitmap = np.zeros((h, w), dtype=bool)
            bitmap[y0:y1, x0:x1] = True
        masks.append(RawMask(bitmap=bitmap, predicted_iou=float(rng.uniform(0.4, 1.0)),
                             stability=float(rng.uniform(0.6, 1.0))))
    return masks


def nms_reference(masks, min_predicted_iou, min_stability, max_overlap):
    """Exhaustive pairwise-IoU non-maximum suppression; returns kept masks."""
    passing = [m for m in masks if m.predicted_iou >= min_predicted_iou
               and m.stability >= min_stability]
    n = len(passing)
    iou = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            a, b = passing[i].bitmap, passing[j].bitmap
            inter = (a & b).sum()
            union = (a | b).sum()
            iou[i, j] = inter / union if union else 1.0
    order = sorted(range(n), key=lambda i: (-passing[i].predicted_iou, i))
    kept = []
    kept_idx = []
    for i in order:
        if all(iou[i, j] < max_overlap for j in kept_idx):
            kept.append(passing[i])
            kept_idx.append(i)
    return kept


def random_scene_camera(rng: np.random.Generator, n: int, width: int, height: int,
                        behind_fraction=0.05):
    """Random 3D scene plus a camera on a jittered orbit; a few Gaussians are
    pushed behind the camera so culling paths get exercised."""
    means = rng.normal(0.0, 0.5, (n, 3))
    eye = rng.normal(0.0, 1.0, 3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    n_behind = int(n * behind_fraction)
    if n_behind:
        means[:n_behind] = eye[None] * rng.uniform(1.2, 2.0, (n_behind, 1))
    q = rng.normal(0.0, 1.0, (n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scene = GaussianScene(
        means=means,
        scales=np.exp(rng.uniform(np.log(0.02), np.log(0.25), (n, 3))),
        rotations=q,
        opacities=rng.uniform(0.05, 0.95, n),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        latents=rng.normal(0.0, 1.0, (n, 3, 3)),
    )
    camera = Camera(
        id="ref",
        width=width,
        height=height,
        fx=1.1 * width,
        fy=1.1 * width,
        cx=width / 2.0,
        cy=height / 2.0,
        world_to_camera=look_at(eye, (0.0, 0.0, 0.0)),
    )
    return scene, camera


def relevancy_reference(img, qry, canon_vectors, dps=50):
    """Literal min-over-canonicals softmax at 50 decimal digits."""
    import mpmath

    with mpmath.workdps(dps):
        def dot(a, b):
            return mpmath.fsum(mpmath.mpf(float(x)) * mpmath.mpf(float(y))
                               for x, y in zip(a, b))

        dq = dot(img, qry)
        best = None
        for row in canon_vectors:
            dc = dot(img, row)
            score = mpmath.exp(dq) / (mpmath.exp(dq) + mpmath.exp(dc))
            if best is None or score < best:
                best = score
        return float(best)


def box_mean_reference(grid, size):
    """O(HW * size^2) box mean; window [i - size//2, i + size-1 - size//2],
    out-of-range indices clamped to the edge."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    lo = size // 2
    out = np.empty_like(grid)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(size):
                yy = min(max(y - lo + dy, 0), h - 1)
                for dx in range(size):
                    xx = min(max(x - lo + dx, 0), w - 1)
                    acc += grid[yy, xx]
            out[y, x] = acc / (size * size)
    return out


def localize_reference(level_grids, size=20):
    """Exhaustive argmax over smoothed (level, pixel); ties keep the lowest
    level, then the row-major first pixel. Returns (x, y, level, score)."""
    best = None
    for level, grid in sorted(level_grids, key=lambda t: t[0]):
        s = box_mean_reference(grid, size)
        for y in range(s.shape[0]):
            for x in range(s.shape[1]):
                if best is None or s[y, x] > best[3]:
                    best = (x, y, level, s[y, x])
    return best


def segment_lerf_reference(level_grids, threshold=0.5, size=20):
    selected = None
    for level, grid in sorted(level_grids, key=lambda t: t[0]):
        s = box_mean_reference(grid, size)
        if selected is None or s.max() > selected.max():
            selected = s
    lo, hi = selected.min(), selected.max()
    out = np.zeros(selected.shape, dtype=bool)
    if hi == lo:
        return out
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            out[y, x] = (selected[y, x] - lo) / (hi - lo) >= threshold
    return out


def segment_ovs_reference(level_grids, threshold=0.4):
    import math

    best_mask, best_mean = None, None
    for level, grid in sorted(level_grids, key=lambda t: t[0]):
        mask = np.zeros(grid.shape, dtype=bool)
        inside = []
        for y in range(grid.shape[0]):
            for x in range(grid.shape[1]):
                if grid[y, x] >= threshold:
                    mask[y, x] = True
                    inside.append(grid[y, x])
        if not inside:
            continue
        mean = math.fsum(inside) / len(inside)
        if best_mean is None or mean > best_mean:
            best_mask, best_mean = mask, mean
    if best_mask is None:
        return np.zeros(level_grids[0][1].shape, dtype=bool)
    return best_mask


def planted_label_grid(scene, camera, object_ids, alpha_min=0.5):
    """Per-pixel planted region ids from one-hot indicator compositing:
    argmax region weight where coverage exceeds alpha_min, else 0."""
    n_regions = int(object_ids.max())
    onehot = np.zeros((len(scene), n_regions))
    onehot[np.arange(len(scene)), object_ids - 1] = 1.0

    from langfield.rasterizer import project

    splats = project(scene, camera)
    img, alpha = composite_reference(splats, onehot, camera)
    labels = np.argmax(img, axis=2) + 1
    labels[alpha <= alpha_min] = 0
    return labels


def lang_loss_reference(data, target, valid, kind="l1"):
    """Scalar-loop mean per-pixel channel distance over valid pixels."""
    import math

    h, w, d = data.shape
    vals = []
    for py in range(h):
        for px in range(w):
            if not valid[py, px]:
                continue
            diffs = [float(data[py, px, c]) - float(target[py, px, c]) for c in range(d)]
            if kind == "l1":
                vals.append(math.fsum(abs(x) for x in diffs))
            else:
                vals.append(math.fsum(x * x for x in diffs))
    return math.fsum(vals) / len(vals) if vals else 0.0


def miou_accuracy_reference(pred_labels, gt_labels):
    """Confusion-matrix mIoU and accuracy over gt-labeled pixels."""
    import math

    conf = {}
    total = correct = 0
    h, w = gt_labels.shape
    for py in range(h):
        for px in range(w):
            g = int(gt_labels[py, px])
            if g == 0:
                continue
            p = int(pred_labels[py, px])
            conf[(g, p)] = conf.get((g, p), 0) + 1
            total += 1
            if g == p:
                correct += 1
    classes = sorted({g for (g, _) in conf})
    ious = []
    for c in classes:
        tp = conf.get((c, c), 0)
        gt_area = sum(n for (g, _), n in conf.items() if g == c)
        pred_area = sum(n for (_, p), n in conf.items() if p == c)
        ious.append(tp / (gt_area + pred_area - tp))
    return 100.0 * math.fsum(ious) / len(ious), 100.0 * correct / total
