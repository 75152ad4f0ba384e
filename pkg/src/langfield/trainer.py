"""Latent-field training: gradient descent on the per-Gaussian latent
vectors against pre-encoded per-pixel targets, with every other Gaussian
attribute frozen.

Each iteration renders one uniformly sampled view jointly across the three
semantic levels (the level channels are stacked into a single 3d-wide
compositing pass, projection and tile binning reused across iterations),
measures the per-level distance to the view's targets over its valid
pixels, and applies one Adam step per level to the latent table.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .rasterizer import DEFAULT_RASTER, FeatureImage, PreparedRender, RasterConfig, project
from .scene import Camera, GaussianScene, SemanticLevel

N_LEVELS = len(SemanticLevel)


@dataclass
class TrainingView:
    """One camera with its encoded target latents.

    `targets` holds the per-level encoded embeddings, `valid` is False where
    the level's label map assigned no mask (those pixels carry no signal and
    are excluded from the loss).
    """

    camera: Camera
    targets: np.ndarray  # (3, H, W, d) float64
    valid: np.ndarray    # (3, H, W) bool

    def validate(self) -> None:
        self.camera.validate()
        if self.targets.ndim != 4 or self.targets.shape[0] != N_LEVELS:
            raise DataFormatError(
                f"{self.camera.id}: targets must be (3, H, W, d), got {self.targets.shape}"
            )
        if self.targets.shape[1:3] != (self.camera.height, self.camera.width):
            raise DataFormatError(
                f"{self.camera.id}: target grid {self.targets.shape[1:3]} does not "
                f"match the {self.camera.height}x{self.camera.width} camera"
            )
        if self.valid.shape != self.targets.shape[:3] or self.valid.dtype != np.bool_:
            raise DataFormatError(f"{self.camera.id}: valid mask must be (3, H, W) bool")
        if not np.isfinite(self.targets[self.valid]).all():
            raise DataFormatError(f"{self.camera.id}: non-finite target on a valid pixel")


@dataclass
class FieldTrainConfig:
    iterations: int = 30000
    lr: float = 2.5e-3
    # per-pixel distance: "l1" sums |diff| over channels, "l2" is the
    # squared euclidean distance (smooth everywhere)
    d_lang: str = "l1"
    seed: int = 0
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError("lr must be finite and >= 0")
        if self.d_lang not in ("l1", "l2"):
            raise ConfigError(f"unknown d_lang {self.d_lang!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


DEFAULT_FIELD_TRAIN = FieldTrainConfig()


@dataclass
class FieldTrainReport:
    iterations: int
    d_lang: str
    log_iterations: list[int] = field(default_factory=list)
    losses: np.ndarray = field(default_factory=lambda: np.zeros((0, N_LEVELS)))
    # per-level loss of the sampled view at each logged iteration, pre-update

    def validate(self) -> None:
        if self.losses.shape != (len(self.log_iterations), N_LEVELS):
            raise DataFormatError("loss log shape does not match logged iterations")
        if self.losses.size and (not np.isfinite(self.losses).all() or self.losses.min() < 0):
            raise DataFormatError("losses must be finite and non-negative")

    def to_json(self) -> str:
        """Deterministic log (no timestamps: checkpoints must be
        byte-identical across runs)."""
        entries = [
            {"iteration": int(i), **{lv.name.lower(): float(x) for lv, x in zip(SemanticLevel, row)}}
            for i, row in zip(self.log_iterations, self.losses)
        ]
        return json.dumps(
            {"iterations": self.iterations, "d_lang": self.d_lang, "log": entries},
            indent=1,
        )


def _distance_and_grad(data, target, valid, kind):
    """Mean-over-valid-pixels distance and its gradient w.r.t. `data`
    (zero on invalid pixels)."""
    diff = data - target
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("no valid pixels at this level; loss defined as 0")
        return 0.0, np.zeros_like(data)
    if kind == "l1":
        per_pixel = np.abs(diff).sum(axis=2)
        grad = np.sign(diff)
    else:
        per_pixel = (diff * diff).sum(axis=2)
        grad = 2.0 * diff
    grad = np.where(valid[:, :, None], grad / n_valid, 0.0)
    return float(per_pixel[valid].mean()), grad


def lang_loss(
    rendered: FeatureImage,
    view: TrainingView,
    level: SemanticLevel,
    cfg: FieldTrainConfig = DEFAULT_FIELD_TRAIN,
) -> float:
    """Mean d_lang distance between a rendered level and the view's targets
    over the valid pixels."""
    target = view.targets[level]
    if rendered.data.shape != target.shape:
        raise DataFormatError(
            f"rendered {rendered.data.shape} vs target {target.shape} shape mismatch"
        )
    loss, _ = _distance_and_grad(rendered.data, target, view.valid[level], cfg.d_lang)
    return loss


def _joint_pass(prep: PreparedRender, view: TrainingView, latents2d, d, kind, n):
    """One stacked forward/backward over all levels: per-level losses and
    the (n, 3d) latent gradient."""
    img = prep.forward(latents2d)
    upstream = np.zeros_like(img.data)
    losses = np.empty(N_LEVELS)
    for l in range(N_LEVELS):
        sl = slice(l * d, (l + 1) * d)
        losses[l], upstream[:, :, sl] = _distance_and_grad(
            img.data[:, :, sl], view.targets[l], view.valid[l], kind
        )
    return losses, prep.backward(upstream, n)


def field_gradient(
    scene: GaussianScene,
    view: TrainingView,
    cfg: FieldTrainConfig = DEFAULT_FIELD_TRAIN,
    raster: RasterConfig = DEFAULT_RASTER,
):
    """Per-level losses and d(sum of level losses)/d(latents) as (n, 3, d).
    Same code path the training loop takes, exposed for verification."""
    cfg.validate()
    view.validate()
    n, d = len(scene), scene.latent_dim
    if view.targets.shape[3] != d:
        raise DataFormatError(
            f"targets are {view.targets.shape[3]}-d but the scene carries {d}-d latents"
        )
    prep = PreparedRender(project(scene, view.camera, raster), view.camera, raster)
    latents2d = scene.latents.astype(np.float64).reshape(n, N_LEVELS * d)
    losses, grad = _joint_pass(prep, view, latents2d, d, cfg.d_lang, n)
    return losses, grad.reshape(n, N_LEVELS, d)


class _Adam:
    def __init__(self, shape, cfg: FieldTrainConfig):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        return params - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def train_field(
    scene: GaussianScene,
    views: list[TrainingView],
    cfg: FieldTrainConfig = DEFAULT_FIELD_TRAIN,
    raster: RasterConfig = DEFAULT_RASTER,
) -> FieldTrainReport:
    """Optimizes scene.latents in place against the views' targets; every
    other Gaussian attribute is left untouched. Deterministic given cfg.seed
    and a fixed worker count."""
    cfg.validate()
    if not views:
        raise DataFormatError("no training views")
    n, d = len(scene), scene.latent_dim
    for view in views:
        view.validate()
        if view.targets.shape[3] != d:
            raise DataFormatError(
                f"{view.camera.id}: targets are {view.targets.shape[3]}-d but the "
                f"scene carries {d}-d latents"
            )

    # geometry is frozen, so each view is projected and binned exactly once
    prepared = [PreparedRender(project(scene, v.camera, raster), v.camera, raster) for v in views]
    latents2d = scene.latents.astype(np.float64).reshape(n, N_LEVELS * d)
    optimizers = [_Adam((n, d), cfg) for _ in range(N_LEVELS)]
    rng = np.random.default_rng(cfg.seed)

    log_iterations: list[int] = []
    log_losses: list[np.ndarray] = []
    for it in range(cfg.iterations):
        vi = int(rng.integers(len(views)))
        losses, grad = _joint_pass(prepared[vi], views[vi], latents2d, d, cfg.d_lang, n)
        for l in range(N_LEVELS):
            sl = slice(l * d, (l + 1) * d)
            latents2d[:, sl] = optimizers[l].step(latents2d[:, sl], grad[:, sl])
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            if not log_iterations or log_iterations[-1] != it:
                log_iterations.append(it)
                log_losses.append(losses)

    scene.latents[:] = latents2d.reshape(n, N_LEVELS, d).astype(np.float32)
    report = FieldTrainReport(
        iterations=cfg.iterations,
        d_lang=cfg.d_lang,
        log_iterations=log_iterations,
        losses=np.array(log_losses).reshape(len(log_iterations), N_LEVELS),
    )
    report.validate()
    return report
