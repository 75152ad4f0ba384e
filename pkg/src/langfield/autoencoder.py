"""Scene-specific embedding compression: a small MLP autoencoder squeezing
D-dimensional mask embeddings down to d dimensions and back.

Training minimizes  lambda_l1 * mean|r - x|  +  lambda_cos * (1 - cos(r, x))
over the scene's embedding rows (Adam, minibatches). The learning rate is
halved whenever a full-data epoch loss comes out above the best recorded one,
and the epoch's update is rolled back, so the recorded loss sequence is
non-increasing by construction.

All math is float64; parameters serialize as float32 (see formats).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError

_NORM_FLOOR = 1e-12  # keeps cosine terms defined at the zero vector


@dataclass
class LinearLayer:
    weights: np.ndarray  # (out, in) float64
    bias: np.ndarray     # (out,) float64

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]


@dataclass
class AutoencoderParams:
    encoder: list[LinearLayer]
    decoder: list[LinearLayer]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.encoder[0].cols

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].rows

    def layers(self) -> list[LinearLayer]:
        return list(self.encoder) + list(self.decoder)

    def validate(self) -> None:
        if self.activation != "relu":
            raise DataFormatError(f"unknown activation {self.activation!r}")
        if not self.encoder or not self.decoder:
            raise DataFormatError("encoder and decoder must both be non-empty")
        chain = self.layers()
        for a, b in zip(chain, chain[1:]):
            if b.cols != a.rows:
                raise DataFormatError(
                    f"layer shapes do not chain: {a.rows} -> expected input {b.cols}"
                )
        if self.decoder[0].cols != self.latent_dim:
            raise DataFormatError("decoder input width differs from latent dim")
        if self.decoder[-1].rows != self.input_dim:
            raise DataFormatError("decoder output width differs from input dim")
        for layer in chain:
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.bias).all()):
                raise DataFormatError("non-finite autoencoder parameter")

    def copy(self) -> "AutoencoderParams":
        return AutoencoderParams(
            encoder=[LinearLayer(l.weights.copy(), l.bias.copy()) for l in self.encoder],
            decoder=[LinearLayer(l.weights.copy(), l.bias.copy()) for l in self.decoder],
            activation=self.activation,
        )


@dataclass
class TrainReport:
    totals: list[float] = field(default_factory=list)   # entry 0 is pre-training
    l1_terms: list[float] = field(default_factory=list)
    cos_terms: list[float] = field(default_factory=list)
    final_cosine: float = float("nan")

    def validate(self) -> None:
        arr = np.array([self.totals, self.l1_terms, self.cos_terms])
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise DataFormatError("train report losses must be finite and non-negative")


@dataclass
class AutoencoderConfig:
    input_dim: int = 512
    latent_dim: int = 3
    hidden: tuple[int, ...] = (256, 128, 64, 32)
    lambda_l1: float = 1.0
    lambda_cos: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigError("autoencoder dims must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.latent_dim in self.hidden:
            # the serialized layer list locates the encoder/decoder boundary
            # by output width, so hidden layers must not collide with d
            raise ConfigError(f"hidden width equal to latent dim {self.latent_dim} not supported")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("bad autoencoder training hyperparameters")


def init_params(cfg: AutoencoderConfig, rng: np.random.Generator) -> AutoencoderParams:
    def stack(widths):
        out = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in))
            # small random biases keep pre-activations off the exact ReLU
            # kink even for inputs a dead layer has zeroed out
            b = rng.normal(0.0, 0.01, fan_out)
            out.append(LinearLayer(weights=w, bias=b))
        return out

    enc_widths = (cfg.input_dim, *cfg.hidden, cfg.latent_dim)
    dec_widths = (cfg.latent_dim, *reversed(cfg.hidden), cfg.input_dim)
    return AutoencoderParams(encoder=stack(enc_widths), decoder=stack(dec_widths))


def _mlp_forward(layers: list[LinearLayer], x: np.ndarray):
    """Returns (output, per-layer pre-activations); hidden ReLU, last linear."""
    pre = []
    h = x
    for i, layer in enumerate(layers):
        z = h @ layer.weights.T + layer.bias
        pre.append(z)
        h = z if i == len(layers) - 1 else np.maximum(z, 0.0)
    return h, pre


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DataFormatError(f"{what} expects vectors of length {dim}, got shape {x.shape}")
    return x, single


def encode(params: AutoencoderParams, x: np.ndarray) -> np.ndarray:
    x, single = _as_batch(x, params.input_dim, "encode")
    out, _ = _mlp_forward(params.encoder, x)
    return out[0] if single else out


def decode(params: AutoencoderParams, h: np.ndarray) -> np.ndarray:
    h, single = _as_batch(h, params.latent_dim, "decode")
    out, _ = _mlp_forward(params.decoder, h)
    return out[0] if single else out


def _loss_terms(recon: np.ndarray, x: np.ndarray):
    l1 = np.abs(recon - x).mean()
    rn = np.maximum(np.linalg.norm(recon, axis=1), _NORM_FLOOR)
    xn = np.maximum(np.linalg.norm(x, axis=1), _NORM_FLOOR)
    cos = (1.0 - (recon * x).sum(axis=1) / (rn * xn)).mean()
    # rounding can push a perfect reconstruction's cosine similarity a hair
    # past 1; the distance is 0 there, not -1e-16
    return float(l1), float(max(cos, 0.0))


def ae_loss(params: AutoencoderParams, batch: np.ndarray,
            lambda_l1: float = 1.0, lambda_cos: float = 1.0):
    """(total, l1 term, cosine term) over a batch of D-vectors."""
    batch, _ = _as_batch(batch, params.input_dim, "ae_loss")
    if batch.shape[0] == 0:
        raise DataFormatError("ae_loss needs a non-empty batch")
    recon = decode(params, encode(params, batch))
    l1, cos = _loss_terms(recon, batch)
    return lambda_l1 * l1 + lambda_cos * cos, l1, cos


def ae_backward(params: AutoencoderParams, batch: np.ndarray,
                lambda_l1: float = 1.0, lambda_cos: float = 1.0):
    """Loss terms plus gradients for every layer, encoder then decoder,
    as [(dW, db), ...] matching params.layers() order."""
    batch, _ = _as_batch(batch, params.input_dim, "ae_backward")
    n, dim = batch.shape
    if n == 0:
        raise DataFormatError("ae_backward needs a non-empty batch")

    z, enc_pre = _mlp_forward(params.encoder, batch)
    recon, dec_pre = _mlp_forward(params.decoder, z)
    l1, cos = _loss_terms(recon, batch)
    total = lambda_l1 * l1 + lambda_cos * cos

    diff = recon - batch
    g = lambda_l1 * np.sign(diff) / (n * dim)
    rn_true = np.linalg.norm(recon, axis=1, keepdims=True)
    rn = np.maximum(rn_true, _NORM_FLOOR)
    xn = np.maximum(np.linalg.norm(batch, axis=1, keepdims=True), _NORM_FLOOR)
    dots = (recon * batch).sum(axis=1, keepdims=True)
    cos_grad = (-batch / (rn * xn) + dots * recon / (rn**3 * xn)) / n
    # the cosine term is floored to a constant for zero reconstructions,
    # so its gradient there is zero, not the 1/r blowup of the raw formula
    cos_grad[(rn_true <= _NORM_FLOOR).ravel()] = 0.0
    g = g + lambda_cos * cos_grad

    def backprop(layers, pre, inputs, upstream):
        grads = [None] * len(layers)
        g_out = upstream
        for i in range(len(layers) - 1, -1, -1):
            if i != len(layers) - 1:
                g_out = g_out * (pre[i] > 0)
            below = inputs if i == 0 else np.maximum(pre[i - 1], 0.0)
            grads[i] = (g_out.T @ below, g_out.sum(axis=0))
            g_out = g_out @ layers[i].weights
        return grads, g_out

    dec_grads, g_z = backprop(params.decoder, dec_pre, z, g)
    enc_grads, _ = backprop(params.encoder, enc_pre, batch, g_z)
    return (total, l1, cos), enc_grads + dec_grads


class _Adam:
    def __init__(self, params: AutoencoderParams, cfg: AutoencoderConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers()]
        self.v = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers()]

    def step(self, params: AutoencoderParams, grads, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        correction = np.sqrt(1.0 - cfg.beta2**self.t) / (1.0 - cfg.beta1**self.t)
        for layer, (gw, gb), m, v in zip(params.layers(), grads, self.m, self.v):
            m[0][:] = cfg.beta1 * m[0] + (1 - cfg.beta1) * gw
            m[1][:] = cfg.beta1 * m[1] + (1 - cfg.beta1) * gb
            v[0][:] = cfg.beta2 * v[0] + (1 - cfg.beta2) * gw**2
            v[1][:] = cfg.beta2 * v[1] + (1 - cfg.beta2) * gb**2
            layer.weights -= lr * correction * m[0] / (np.sqrt(v[0]) + cfg.adam_eps)
            layer.bias -= lr * correction * m[1] / (np.sqrt(v[1]) + cfg.adam_eps)

    def snapshot(self):
        return (self.t, [(mw.copy(), mb.copy()) for mw, mb in self.m],
                [(vw.copy(), vb.copy()) for vw, vb in self.v])

    def restore(self, snap) -> None:
        self.t = snap[0]
        for (mw, mb), (sw, sb) in zip(self.m, snap[1]):
            mw[:], mb[:] = sw, sb
        for (vw, vb), (sw, sb) in zip(self.v, snap[2]):
            vw[:], vb[:] = sw, sb


def gather_training_rows(tables) -> np.ndarray:
    """Stack all embedding tables' rows (all images, all levels) into one
    float64 matrix and L2-normalize each row."""
    rows = [t.rows.astype(np.float64) for t in tables if len(t)]
    if not rows:
        raise DataFormatError("no embedding rows to train on")
    data = np.concatenate(rows, axis=0)
    return data / np.maximum(np.linalg.norm(data, axis=1, keepdims=True), _NORM_FLOOR)


def train_autoencoder(tables, cfg: AutoencoderConfig | None = None):
    """Train on every row of the given MaskEmbeddingTables (or a raw (N, D)
    array); returns (params, report)."""
    cfg = cfg or AutoencoderConfig()
    cfg.validate()
    if isinstance(tables, np.ndarray):
        data = gather_training_rows([_ArrayTable(tables)])
    else:
        data = gather_training_rows(list(tables))
    if data.shape[1] != cfg.input_dim:
        raise DataFormatError(
            f"embedding dim {data.shape[1]} differs from configured input dim {cfg.input_dim}"
        )
    n_distinct = np.unique(data, axis=0).shape[0]
    if n_distinct < cfg.latent_dim:
        raise DataFormatError(
            f"need at least {cfg.latent_dim} distinct embeddings, got {n_distinct}"
        )
    if n_distinct == 1:
        warnings.warn("all embeddings identical; autoencoder will fit a constant")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    opt = _Adam(params, cfg)
    lr = cfg.lr

    report = TrainReport()
    total, l1, cos = ae_loss(params, data, cfg.lambda_l1, cfg.lambda_cos)
    report.totals.append(total)
    report.l1_terms.append(l1)
    report.cos_terms.append(cos)

    n = data.shape[0]
    for _ in range(cfg.epochs):
        before = (params.copy(), opt.snapshot())
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            _, grads = ae_backward(params, batch, cfg.lambda_l1, cfg.lambda_cos)
            opt.step(params, grads, lr)
        total, l1, cos = ae_loss(params, data, cfg.lambda_l1, cfg.lambda_cos)
        if total > report.totals[-1]:
            saved_params, saved_opt = before
            params = saved_params
            opt.restore(saved_opt)
            lr *= 0.5
            report.totals.append(report.totals[-1])
            report.l1_terms.append(report.l1_terms[-1])
            report.cos_terms.append(report.cos_terms[-1])
        else:
            report.totals.append(total)
            report.l1_terms.append(l1)
            report.cos_terms.append(cos)

    recon = decode(params, encode(params, data))
    _, report.final_cosine = _loss_terms(recon, data)
    report.validate()
    params.validate()
    return params, report


class _ArrayTable:
    """Adapter so train_autoencoder accepts a bare array."""

    def __init__(self, rows: np.ndarray):
        self.rows = np.asarray(rows)

    def __len__(self) -> int:
        return self.rows.shape[0]
