"""Station-masked loss, optimisers, the training loop and windowed prediction."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from windcast.abed import AbedModel, forward
from windcast.errors import ConfigError, NumericError, OutOfDomainError, TrainingError
from windcast.featurecube import FeatureCube, SampleSet, WindowConfig
from windcast.ingest import write_csv_atomic
from windcast.tensor import Tensor, mul, no_grad, sub
from windcast.tensor import sum as tsum

logger = logging.getLogger(__name__)


# loss


def loss_weights(mask, dtype=np.float32):
    """Per-point weights realising the double mean of the masked MSE.

    ``mask`` is ``(b, 2, L, h, w)``; a point counts only where both components
    are valid. Each valid point of station (cell) ``i`` in sample ``s`` gets
    ``0.5 / (B * N_s * L_i)`` where ``B`` counts samples with any valid point,
    ``N_s`` the stations with any valid point and ``L_i`` the station's valid
    times. Returns ``(weights, n_used_samples)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 5 or mask.shape[1] != 2:
        raise ConfigError(f"mask must be (b, 2, L, h, w), got {mask.shape}")
    point = mask[:, 0] & mask[:, 1]
    per_cell = point.sum(axis=1, keepdims=True)  # L_i
    stations = (per_cell > 0).sum(axis=(2, 3), keepdims=True)  # N_s
    used = stations[:, 0, 0, 0] > 0
    n_used = int(used.sum())
    if n_used < mask.shape[0]:
        logger.warning("%d of %d samples have no valid label and are excluded from the loss",
                       mask.shape[0] - n_used, mask.shape[0])
    if n_used == 0:
        raise TrainingError("no sample in the batch has a valid label")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(point, 0.5 / (n_used * np.maximum(stations, 1) * np.maximum(per_cell, 1)), 0.0)
    return np.repeat(w[:, None], 2, axis=1).astype(dtype), n_used


def masked_mse_loss(pred, labels, mask):
    """Mean over samples of the mean over stations of the mean over valid times
    of ``0.5 * (u_err**2 + v_err**2)``. Entries where ``mask`` is False never
    reach the graph.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.shape != np.shape(mask):
        raise ConfigError(f"shapes differ: pred {pred.shape}, labels {labels.shape}, mask {np.shape(mask)}")
    w, _ = loss_weights(mask, pred.dtype)
    y = np.where(w > 0, labels, 0).astype(pred.dtype)
    err = sub(pred, Tensor(y))
    return tsum(mul(mul(err, err), Tensor(w)))


# optimisers


class SGD:
    def __init__(self, params, lr=0.001):
        self.params, self.lr = list(params), lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.params, self.lr, self.eps = list(params), lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    max_epochs: int = 200
    early_stop_patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    max_steps: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.validation_fraction <= 0.5:
            raise ConfigError(f"validation_fraction must be in (0, 0.5], got {self.validation_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")


@dataclass
class TrainLog:
    """Epoch 0 holds the losses of the untrained model."""

    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    def add(self, epoch, train, val, seconds):
        self.epochs.append(epoch)
        self.train_loss.append(float(train))
        self.val_loss.append(float(val))
        self.seconds.append(float(seconds))

    def frame(self):
        return pd.DataFrame({"epoch": self.epochs, "train_loss": self.train_loss,
                             "val_loss": self.val_loss, "seconds": self.seconds})

    def to_csv(self, path):
        write_csv_atomic(self.frame(), path, float_format="%.9g")

    def summary(self):
        return {"epochs": self.epochs[-1] if self.epochs else 0, "best_epoch": self.best_epoch,
                "best_val_loss": self.val_loss[self.best_epoch] if self.val_loss else None,
                "initial_train_loss": self.train_loss[0] if self.train_loss else None,
                "final_train_loss": self.train_loss[-1] if self.train_loss else None,
                "steps": len(self.step_loss), "stop_reason": self.stop_reason}


@dataclass
class TrainResult:
    model: AbedModel
    log: TrainLog
    best_state: dict


def split_validation(n: int, fraction: float, seed: int):
    """Seeded ``(train_idx, val_idx)`` partition of ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    n_val = min(max(n_val, 1), n - 1) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(idx, size):
    return [idx[k:k + size] for k in range(0, len(idx), size)]


def evaluate_loss(model: AbedModel, samples: SampleSet, indices, batch_size=64, mode="infer"):
    """Sample-weighted mean loss over ``indices`` without touching the parameters."""
    if len(indices) == 0:
        return float("nan")
    saved = {k: b.copy() for k, b in model.buffers.items()}
    total, count = 0.0, 0
    with no_grad():
        for chunk in _batches(np.asarray(indices), batch_size):
            x, y, m = samples.batch(chunk)
            if not (m[:, 0] & m[:, 1]).any():
                continue
            _, n_used = loss_weights(m)
            total += masked_mse_loss(forward(model, x, mode), y, m).item() * n_used
            count += n_used
    for k, b in model.buffers.items():
        b[...] = saved[k]
    return total / count if count else float("nan")


def _param_norms(model):
    return {k: float(np.linalg.norm(p.data)) for k, p in model.params.items()}


def _clip(params, max_norm):
    norm = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm


def train(model: AbedModel, samples: SampleSet, cfg: TrainConfig = TrainConfig(), log_path=None) -> TrainResult:
    """Minibatch training with validation-based early stopping.

    The returned model carries the parameters of the best validation epoch.
    """
    n = len(samples)
    if n == 0:
        raise TrainingError("no training samples")
    tr_idx, va_idx = split_validation(n, cfg.validation_fraction, cfg.seed)
    if len(va_idx) == 0:
        logger.warning("only one sample; early stopping monitors the training loss")
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else SGD(params, cfg.learning_rate)
    log = TrainLog()

    def monitor(train_value):
        return evaluate_loss(model, samples, va_idx, cfg.batch_size) if len(va_idx) else train_value

    t_start = time.perf_counter()
    init = evaluate_loss(model, samples, tr_idx, cfg.batch_size, mode="train")
    log.add(0, init, monitor(init), 0.0)
    best_val, best_state, wait, steps = log.val_loss[0], model.state(), 0, 0
    if not np.isfinite(best_val):
        best_val = np.inf
    log.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(tr_idx)
        losses, weights = [], []
        for b_id, chunk in enumerate(_batches(order, cfg.batch_size)):
            x, y, m = samples.batch(chunk)
            if not (m[:, 0] & m[:, 1]).any():
                logger.warning("epoch %d batch %d has no valid labels; skipped", epoch, b_id)
                continue
            model.zero_grad()
            try:
                loss = masked_mse_loss(forward(model, x, "train"), y, m)
                loss.backward()
                if cfg.grad_clip:
                    _clip(params, cfg.grad_clip)
                for p in params:
                    if p.grad is not None and not np.isfinite(p.grad).all():
                        raise NumericError("non-finite gradient")
            except NumericError as exc:
                raise NumericError(f"numeric failure at epoch {epoch}, batch {b_id}: {exc}; "
                                   f"parameter norms {_param_norms(model)}") from exc
            opt.step()
            steps += 1
            log.step_loss.append(loss.item())
            losses.append(loss.item())
            weights.append(len(chunk))
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        val = monitor(train_loss)
        log.add(epoch, train_loss, val, time.perf_counter() - t0)
        logger.info("epoch %d train %.6g val %.6g", epoch, train_loss, val)
        if val < best_val:
            best_val, best_state, wait = val, model.state(), 0
            log.best_epoch = epoch
        else:
            wait += 1
        if log_path is not None:
            log.to_csv(log_path)
        if wait >= cfg.early_stop_patience:
            log.stop_reason = "early_stop"
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            log.stop_reason = "max_steps"
            break
    model.load_state(best_state)
    logger.info("training finished after %.1f s: %s", time.perf_counter() - t_start, log.stop_reason)
    return TrainResult(model, log, best_state)


def write_metrics_json(log: TrainLog, path, extra=None):
    out = log.summary()
    out.update(extra or {})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


# prediction


@dataclass
class Prediction:
    """Model output for one window; ``horizons`` are in steps from the issue tick."""

    t0: np.datetime64
    issue_time: np.datetime64
    times: np.ndarray
    values: np.ndarray
    horizons: np.ndarray


def predict_batch(model: AbedModel, samples: SampleSet, indices, batch_size=64):
    """Infer-mode outputs ``(n, 2, L, h, w)`` for the given sample indices."""
    out = []
    with no_grad():
        for chunk in _batches(np.asarray(indices, dtype=np.int64), batch_size):
            x, _, _ = samples.batch(chunk)
            out.append(forward(model, x, "infer").data)
    if not out:
        h, w = samples.cube.grid.shape
        return np.zeros((0, 2, samples.cfg.length, h, w), dtype=model.dtype)
    return np.concatenate(out)


def predict(model: AbedModel, cube: FeatureCube, cfg: WindowConfig, t0_list, batch_size=64):
    """Forecasts for windows starting at each ``t0``.

    Output index ``k`` is the instant ``t0 + M + k``; its horizon is measured
    from the last observed tick ``t0 + D - 1``.
    """
    t0s = np.asarray(t0_list, dtype="datetime64[s]").reshape(-1)
    starts = (t0s - cube.times[0]) / (cube.times[1] - cube.times[0]) if cube.n_times > 1 else np.zeros(t0s.size)
    bad = (starts != np.floor(starts)) | (starts < 0) | (starts + cfg.span > cube.n_times)
    if bad.any():
        t = t0s[int(np.argmax(bad))]
        raise OutOfDomainError(f"window starting {t}Z is not inside the cube "
                               f"({cube.times[0]}Z .. {cube.times[-1]}Z, span {cfg.span} ticks)", coords=str(t))
    starts = starts.astype(np.int64)
    samples = SampleSet(cube, cfg, starts, "all", dtype=model.dtype)
    values = predict_batch(model, samples, np.arange(starts.size), batch_size)
    out = []
    for k, s in enumerate(starts):
        times = cube.times[s + cfg.M:s + cfg.M + cfg.length]
        out.append(Prediction(cube.times[s], cube.times[s + cfg.issue_index], times, values[k],
                              cfg.y_horizons()))
    return out


__all__ = ["Adam", "Prediction", "SGD", "TrainConfig", "TrainLog", "TrainResult", "evaluate_loss",
           "loss_weights", "masked_mse_loss", "predict", "predict_batch", "split_validation", "train",
           "write_metrics_json"]
