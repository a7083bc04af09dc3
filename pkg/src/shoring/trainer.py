"""Optimisation, evaluation, checkpoints and grid search."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encode import EncodedData, Encoder
from .errors import ConfigError, ContractViolation, DivergenceError, VersionError
from .model import Model, ModelSpec, orthogonal_init  # noqa: F401  (re-exported)
from .stattest import FitMetrics, TwoSampleResult, fit_metrics, permutation_test

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SHORCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    loss: str = "mse"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in ("mse", "kl"):
            raise ConfigError(f"loss must be 'mse' or 'kl', got {self.loss!r}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("max_epochs must be >= 0 and patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# grid of the hyperparameter search ranges
DEFAULT_GRID = {
    "learning_rate": [1e-5, 5e-5, 1e-4, 1e-3],
    "batch_size": [64, 128, 256],
}


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, t: int,
              config: TrainConfig) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``; returns the new state."""
    if t < 1:
        raise ContractViolation("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    state.t = t
    return state


# ---------------------------------------------------------------- losses


def loss_fn(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    if kind == "mse":
        return dc.mean(dc.square(pred - target))
    # KL(target || softmax(pred)); integer targets are one-hot distributions
    target = np.asarray(target)
    if target.ndim == 1:
        target = np.eye(pred.shape[-1])[target.astype(int)]
    logq = dc.log_softmax(pred, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = float(np.sum(np.where(target > 0, target * np.log(target), 0.0)))
    return dc.mean(dc.sum_(dc.neg(logq * target), axis=-1)) + entropy / target.shape[0]


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: list[EpochLog]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool = False


def _batch_loss(model: Model, data: EncodedData, y: np.ndarray, kind: str, batch_size: int = 512) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        total += loss_fn(model.forward(data.subset(sl)), y[sl], kind).item() * len(y[sl])
    return total / max(len(data), 1)


def train(model: Model, data: EncodedData, targets: np.ndarray, config: TrainConfig,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Mini-batch Adam with seeded shuffling and early stopping on a held-out 10%.

    The returned state is the best-validation parameter set; ``model`` is left
    holding it.
    """
    targets = np.asarray(targets)
    n = len(data)
    if targets.shape[0] != n:
        raise ContractViolation(f"{targets.shape[0]} targets for {n} samples")
    perm = np.random.default_rng([config.seed, 10_007]).permutation(n)
    n_val = max(1, int(round(n * config.val_fraction))) if n > 1 else 0
    val_idx, tr_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    tr, val = data.subset(tr_idx), data.subset(val_idx)
    y_tr, y_val = targets[tr_idx], targets[val_idx]

    params = model.params
    names = list(params)
    state = AdamState()
    best_state = model.state()
    best_val = _batch_loss(model, val, y_val, config.loss) if n_val else float("nan")
    best_epoch, bad_epochs, step = 0, 0, 0
    history: list[EpochLog] = []
    start = time.perf_counter()
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(tr_idx))
        running, seen = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = loss_fn(model.forward(tr.subset(idx)), y_tr[idx], config.loss)
            if not np.isfinite(loss.data).all():
                model.load_state(best_state)
                raise DivergenceError(f"loss became non-finite at epoch {epoch}", checkpoint=best_state)
            dc.backward(loss, leaves=[params[k] for k in names])
            step += 1
            try:
                adam_step(params, {k: params[k].grad for k in names}, state, step, config)
            except DivergenceError as exc:
                model.load_state(best_state)
                raise DivergenceError(str(exc), checkpoint=best_state) from exc
            running += loss.item() * len(idx)
            seen += len(idx)
        val_loss = _batch_loss(model, val, y_val, config.loss) if n_val else float("nan")
        entry = EpochLog(epoch, running / max(seen, 1), val_loss, time.perf_counter() - start)
        history.append(entry)
        log.debug("epoch %d train %.6f val %.6f", epoch, entry.train_loss, val_loss)
        if on_epoch:
            on_epoch(entry)
        if not n_val or val_loss < best_val:
            best_val, best_epoch, bad_epochs = val_loss, epoch, 0
            best_state = model.state()
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped = True
                break
    model.load_state(best_state)
    return TrainResult(best_state, history, best_epoch, best_val, stopped)


# ---------------------------------------------------------------- evaluation


@dataclass
class FitReport:
    metrics: FitMetrics
    raw_metrics: FitMetrics | None
    two_sample: TwoSampleResult | None
    classification: dict | None = None
    model: str = ""
    task: str = ""
    n_test: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model, "task": self.task, "n_test": self.n_test,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "raw_metrics": self.raw_metrics.to_dict() if self.raw_metrics else None,
            "two_sample": self.two_sample.to_dict() if self.two_sample else None,
            "classification": self.classification,
        }

    def row(self) -> dict:
        """Flat table row: standardised-scale fit metrics, raw-scale perturbations, MMD p-value."""
        m, raw = self.metrics, self.raw_metrics or self.metrics
        return {
            "model": self.model, "task": self.task,
            "loss": m.loss, "std_r": m.std_r,
            "ptb@1%": raw.ptb_at_1pct, "ptb_r@1%": raw.ptb_r_at_1pct,
            "R2": m.r2, "pearson": m.pearson,
            "p_value": self.two_sample.p_value if self.two_sample else float("nan"),
        }


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    from scipy.stats import rankdata

    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def recall_at_precision(scores: np.ndarray, labels: np.ndarray, precision: float = 0.99) -> float:
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(labels[order])
    prec = tp / np.arange(1, len(order) + 1)
    ok = prec >= precision
    return float(tp[ok].max() / labels.sum()) if ok.any() else 0.0


def evaluate(model: Model, data: EncodedData, targets: np.ndarray, *, raw_targets: np.ndarray | None = None,
             target_mean: float = 0.0, target_std: float = 1.0, n_permutations: int = 199, seed: int = 0,
             encoder: Encoder | None = None, task: str = "") -> FitReport:
    """Regression: fit metrics plus an MMD permutation test of predictions vs targets.

    ``targets`` are on the training (standardised) scale; raw-scale metrics use
    ``raw_targets`` and the inverse standardisation.
    """
    if encoder is not None and encoder.fingerprint() != model.encoder.fingerprint():
        raise VersionError("test data was encoded with a different encoder than the checkpoint")
    pred = model.predict(data)
    if model.spec.task == "classification":
        logq = pred - pred.max(axis=1, keepdims=True)
        logq = logq - np.log(np.exp(logq).sum(axis=1, keepdims=True))
        labels = np.asarray(targets).astype(int)
        kl = float(-np.mean(logq[np.arange(len(labels)), labels]))
        pos_score = np.exp(logq[:, -1])
        cls = {"kl_loss": kl, "auc": roc_auc(pos_score, labels == pred.shape[1] - 1),
               "recall_at_99_precision": recall_at_precision(pos_score, labels == pred.shape[1] - 1)}
        return FitReport(None, None, None, cls, model.spec.architecture, task, len(labels))
    targets = np.asarray(targets, dtype=float)
    metrics = fit_metrics(pred, targets)
    raw_metrics = None
    if raw_targets is not None:
        raw_metrics = fit_metrics(pred * target_std + target_mean, raw_targets)
    two = permutation_test(pred, targets, n_permutations=n_permutations, seed=seed)
    return FitReport(metrics, raw_metrics, two, None, model.spec.architecture, task, len(targets))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    descriptor: dict
    encoder: dict
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.state):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state[name], dtype="<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Single file: magic, u64 manifest length, JSON manifest, then raw little-endian arrays."""
    arrays, blobs, offset = {}, [], 0
    for name in sorted(ckpt.state):
        raw = np.ascontiguousarray(ckpt.state[name], dtype="<f8").tobytes()
        arrays[name] = {"shape": list(ckpt.state[name].shape), "dtype": "<f8", "offset": offset,
                        "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = {"version": CHECKPOINT_VERSION, "arrays": arrays, "descriptor": ckpt.descriptor,
                "encoder": ckpt.encoder, "meta": ckpt.meta}
    head = json.dumps(manifest, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise VersionError(f"{path} is not a checkpoint container")
    (n,) = struct.unpack("<Q", buf[8:16])
    manifest = json.loads(buf[16:16 + n])
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {manifest.get('version')!r} != {CHECKPOINT_VERSION}")
    base = 16 + n
    state = {}
    for name, info in manifest["arrays"].items():
        start = base + info["offset"]
        arr = np.frombuffer(buf[start:start + info["nbytes"]], dtype=info["dtype"])
        state[name] = arr.reshape(info["shape"]).astype(float)
    return Checkpoint(state, manifest["descriptor"], manifest["encoder"], manifest.get("meta", {}))


def model_checkpoint(model: Model, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(model.state(), model.descriptor(), model.encoder.to_dict(), meta or {})


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    desc = ckpt.descriptor
    model = Model(ModelSpec.from_dict(desc["spec"]), Encoder.from_dict(ckpt.encoder), desc["m"])
    model.load_state(ckpt.state)
    return model


# ---------------------------------------------------------------- grid search


@dataclass
class GridEntry:
    params: dict
    val_loss: float
    best_epoch: int


def _apply(spec: ModelSpec, config: TrainConfig, point: dict) -> tuple[ModelSpec, TrainConfig]:
    spec_fields = {f.name for f in dataclasses.fields(ModelSpec)}
    cfg_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    s, c = {}, {}
    for key, value in point.items():
        if key in cfg_fields:
            c[key] = value
        elif key in spec_fields:
            s[key] = value
        else:
            raise ConfigError(f"unknown grid key {key!r}")
    return dataclasses.replace(spec, **s), dataclasses.replace(config, **c)


def grid_search(spec: ModelSpec, grid: dict[str, list], encoder: Encoder, data: EncodedData, targets: np.ndarray,
                config: TrainConfig, budget: int | None = None, m: int = 1) -> tuple[dict, list[GridEntry]]:
    """Train every grid point (a seeded random subset when over ``budget``); rank by val loss."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be non-empty")
    if budget is not None and budget < 1:
        raise ConfigError("budget must be >= 1")
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    if budget is not None and len(points) > budget:
        pick = np.random.default_rng(config.seed).choice(len(points), budget, replace=False)
        points = [points[i] for i in sorted(pick)]
    board = []
    for point in points:
        s, c = _apply(spec, config, point)
        model = Model(s, encoder, m=m, seed=c.seed)
        result = train(model, data, targets, c)
        board.append(GridEntry(point, result.best_val_loss, result.best_epoch))
    board.sort(key=lambda e: (e.val_loss, json.dumps(e.params, sort_keys=True)))
    return board[0].params, board
