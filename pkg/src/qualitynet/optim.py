"""RMSprop, the per-utterance training loop, checkpoints and learning curves."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from qualitynet import net
from qualitynet._io import atomic_open, atomic_write_bytes
from qualitynet.features import Spectrogram, StftConfig, load_features
from qualitynet.loss import QualityLabel, loss_grads, utterance_loss
from qualitynet.metrics import evaluate_features
from qualitynet.signal import CorpusManifest

log = logging.getLogger(__name__)

CKPT_MAGIC = b"QNET"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIf")


class CheckpointError(ValueError):
    pass


@dataclass
class RmsPropState:
    v: list[np.ndarray]
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: net.ModelParams, lr=1e-3, rho=0.9, eps=1e-7) -> "RmsPropState":
        return cls([np.zeros_like(a) for a in params.arrays()], lr, rho, eps)


def rmsprop_step(params: net.ModelParams, grads: net.ModelParams, state: RmsPropState) -> None:
    """In-place update: v <- rho*v + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(v)+eps)."""
    arrays, garrays = params.arrays(), grads.arrays()
    if len(arrays) != len(state.v) or any(
        a.shape != g.shape or a.shape != v.shape for a, g, v in zip(arrays, garrays, state.v)
    ):
        raise ValueError("rmsprop_step: shape mismatch between params, grads and state")
    for theta, g, v in zip(arrays, garrays, state.v):
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        theta -= state.lr * g / (np.sqrt(v) + state.eps)


def global_norm(grads: net.ModelParams) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays()))


def clip_gradients(grads: net.ModelParams, clip_norm: float) -> net.ModelParams:
    """Rescale all gradients in place when their joint L2 norm exceeds ``clip_norm``."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm > clip_norm:
        for g in grads.arrays():
            g *= clip_norm / norm
    return grads


@dataclass
class TrainConfig:
    max_epochs: int = 15
    patience: int = 3
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-7
    clip_norm: float = 5.0
    shuffle_seed: int = 0
    init_seed: int = 0
    fgb: float = -3.0
    alpha_enabled: bool = True
    frame_term_mean: bool = False
    q_max: float = 4.5
    hidden: int = 100
    dense: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ValueError("need max_epochs >= 1 and 1 <= patience <= max_epochs")

    @property
    def loss_kw(self) -> dict:
        return {"alpha_enabled": self.alpha_enabled, "frame_term_mean": self.frame_term_mean}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_lcc: float
    val_srcc: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with atomic_open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_mse", "val_lcc", "val_srcc"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mse), repr(r.val_lcc), repr(r.val_srcc)])


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def train_on_features(
    train_specs: Sequence[Spectrogram],
    train_labels: Sequence[float],
    val_specs: Sequence[Spectrogram],
    val_labels: Sequence[float],
    cfg: TrainConfig = TrainConfig(),
    params: net.ModelParams | None = None,
) -> tuple[net.ModelParams, TrainHistory]:
    """Batch-size-1 RMSprop with per-epoch validation and early stopping on val MSE."""
    if not train_specs or not val_specs:
        raise ValueError("training and validation sets must be nonempty")
    if len(train_specs) != len(train_labels) or len(val_specs) != len(val_labels):
        raise ValueError("features and labels differ in length")
    n_in = train_specs[0].frames.shape[1]
    if params is None:
        params = net.init_model(net.ModelDims(n_in, cfg.hidden, cfg.dense), cfg.fgb, cfg.init_seed)
    state = RmsPropState.for_params(params, cfg.lr, cfg.rho, cfg.eps)
    labels = [QualityLabel(float(q), cfg.q_max) for q in train_labels]
    rng = np.random.default_rng(cfg.shuffle_seed)
    history = TrainHistory()
    best, best_mse, stale = params.copy(), math.inf, 0

    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for k in rng.permutation(len(train_specs)):
            result, trace = net.forward(train_specs[k], params)
            total += utterance_loss(labels[k], result, **cfg.loss_kw).total
            dQ, dq = loss_grads(labels[k], result, **cfg.loss_kw)
            grads = clip_gradients(net.backward(trace, dQ, dq, params), cfg.clip_norm)
            rmsprop_step(params, grads, state)
        report = evaluate_features(params, val_specs, val_labels)
        rec = EpochRecord(epoch, total / len(train_specs), report.mse, report.lcc, report.srcc)
        history.epochs.append(rec)
        log.info("epoch %d  train_loss %.4f  val_mse %.4f  val_lcc %s  val_srcc %s",
                 epoch, rec.train_loss, rec.val_mse, _fmt(rec.val_lcc), _fmt(rec.val_srcc))
        if rec.val_mse < best_mse:
            best, best_mse, stale = params.copy(), rec.val_mse, 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


def train(
    manifest: CorpusManifest,
    val_manifest: CorpusManifest,
    cfg: TrainConfig = TrainConfig(),
    stft: StftConfig = StftConfig(),
    cache_dir=None,
) -> tuple[net.ModelParams, TrainHistory]:
    if not len(manifest) or not len(val_manifest):
        raise ValueError("empty manifest")
    train_specs = load_features(manifest, stft, cache_dir)
    val_specs = load_features(val_manifest, stft, cache_dir)
    return train_on_features(
        train_specs, [e.label_q for e in manifest],
        val_specs, [e.label_q for e in val_manifest], cfg,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(params: net.ModelParams) -> bytes:
    dims = params.dims
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, dims.n_in, dims.hidden, params.fgb)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    return header + body


def save_checkpoint(params: net.ModelParams, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def _dense_width(n_floats: int, n_in: int, hidden: int) -> int:
    # Payload = LSTM part + d^2 + (2H + 3) d + 1; solve the quadratic for d.
    rest = n_floats - 2 * 4 * hidden * (n_in + hidden + 1) - 1
    b = 2 * hidden + 3
    d = int(round((-b + math.sqrt(b * b + 4 * max(rest, 0))) / 2))
    if d < 1 or d * d + b * d != rest:
        raise CheckpointError("corrupt checkpoint: payload size does not match header dims")
    return d


def load_checkpoint(path, expected: net.ModelDims | None = None) -> net.ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"corrupt checkpoint: {path} is truncated")
    magic, version, n_in, hidden, fgb = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body = data[_CKPT_HEADER.size:]
    if len(body) % 4:
        raise CheckpointError(f"corrupt checkpoint: {path} is truncated")
    dense = _dense_width(len(body) // 4, n_in, hidden)
    dims = net.ModelDims(n_in, hidden, dense)
    if expected is not None and expected != dims:
        raise CheckpointError(f"checkpoint dims mismatch: expected {expected}, found {dims}")
    flat = np.frombuffer(body, dtype="<f4")
    arrays, pos = [], 0
    for shape in net.param_shapes(dims):
        size = int(np.prod(shape))
        arrays.append(flat[pos:pos + size].astype(np.float64).reshape(shape))
        pos += size
    return net.ModelParams.from_arrays(arrays, float(fgb))


# ---------------------------------------------------------------------------
# Learning curve
# ---------------------------------------------------------------------------


@dataclass
class CurveRow:
    size: int
    mse: float
    lcc: float
    srcc: float


def learning_curve(
    manifest: CorpusManifest,
    val_manifest: CorpusManifest,
    test_manifest: CorpusManifest,
    sizes: Sequence[int],
    cfg: TrainConfig = TrainConfig(),
    stft: StftConfig = StftConfig(),
    subset_seed: int = 0,
    cache_dir=None,
) -> list[CurveRow]:
    """Train one model per size on a prefix of a seeded shuffle of ``manifest``."""
    for s in sizes:
        if not 1 <= s <= len(manifest):
            raise ValueError(f"training size {s} outside [1, {len(manifest)}]")
    train_specs = load_features(manifest, stft, cache_dir)
    val_specs = load_features(val_manifest, stft, cache_dir)
    test_specs = load_features(test_manifest, stft, cache_dir)
    labels = [e.label_q for e in manifest]
    order = np.random.default_rng(subset_seed).permutation(len(manifest))
    rows = []
    for s in sizes:
        idx = order[:s]
        params, _ = train_on_features(
            [train_specs[k] for k in idx], [labels[k] for k in idx],
            val_specs, [e.label_q for e in val_manifest], cfg,
        )
        rep = evaluate_features(params, test_specs, [e.label_q for e in test_manifest])
        rows.append(CurveRow(s, rep.mse, rep.lcc, rep.srcc))
        log.info("size %d: mse %.4f lcc %.4f srcc %.4f", s, rep.mse, rep.lcc, rep.srcc)
    return rows
