"""Mini-batch Adam on the seq2point MSE with validation-based early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from eltnilm.checkpoint import save_checkpoint
from eltnilm.errors import ConfigError, NumericError
from eltnilm.model import ELTransformer, ParameterStore, forward
from eltnilm.tensor import Tensor, as_tensor, backward, current_tape, mul, no_grad, set_deterministic, sub, tmean

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 256
    val_fraction: float = 0.2
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    deterministic: bool = True

    def errors(self) -> list:
        found = []
        if not self.lr > 0:
            found.append("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            found.append("betas must be in [0, 1)")
        if not self.eps > 0:
            found.append("eps must be > 0")
        if self.weight_decay < 0:
            found.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            found.append("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            found.append("val_fraction must be in (0, 1)")
        if self.patience < 1:
            found.append("patience must be >= 1")
        if self.max_epochs < 0:
            found.append("max_epochs must be >= 0")
        return found

    def validate(self) -> "TrainConfig":
        found = self.errors()
        if found:
            raise ConfigError("; ".join(found), found)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss of an empty batch")
    diff = sub(pred, target)
    return tmean(mul(diff, diff))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterStore) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()})


def adam_step(params: ParameterStore, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update of every parameter from its ``.grad``."""
    for name, p in params.items():
        if p.grad is None or not np.isfinite(p.grad).all():
            bad = "missing" if p.grad is None else f"{int((~np.isfinite(p.grad)).sum())} non-finite entries"
            raise NumericError(f"gradient of {name}: {bad}")
    state.step += 1
    c1 = 1.0 - cfg.beta1 ** state.step
    c2 = 1.0 - cfg.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def split_indices(n: int, val_fraction: float, seed: int) -> tuple:
    """Seeded random split of window indices into (train, validation)."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class TrainResult:
    best_params: dict
    best_epoch: int
    best_val_mse: float
    history: list
    adam: AdamState
    stopped_early: bool = False


def evaluate_mse(model: ELTransformer, windows, idx: np.ndarray, batch_size: int) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            pred = forward(windows.inputs(chunk), model.params, model.cfg).data
            diff = pred - windows.labels(chunk)
            total += float(diff @ diff)
    return total / len(idx)


def write_history(path, history: list, with_seconds: bool = True) -> None:
    """Write ``epoch,train_mse,val_mse,seconds``; seconds stay blank when
    ``with_seconds`` is False so reruns produce identical bytes."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "val_mse", "seconds"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), f"{r.seconds:.3f}" if with_seconds else ""])


def train(
    model: ELTransformer,
    windows,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    checkpoint_meta: Optional[dict] = None,
) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-validation parameters.

    Windows are split once (seeded) into train/validation. Each epoch
    shuffles the training windows, runs every batch including a trailing
    partial one, then scores the full validation set. Training stops after
    ``patience`` epochs without improvement or at ``max_epochs``. With
    ``out_dir``, the best checkpoint goes to ``best.ckpt`` and the history to
    ``history.csv``; under the deterministic flag wall-clock seconds are kept
    out of the history and written to ``timing.csv`` instead.
    """
    cfg.validate()
    set_deterministic(cfg.deterministic)
    train_idx, val_idx = split_indices(len(windows), cfg.val_fraction, cfg.seed)
    if len(train_idx) < cfg.batch_size:
        raise ConfigError(
            f"dataset too small: {len(train_idx)} training windows after the split, batch_size is {cfg.batch_size}"
        )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.params
    adam = AdamState.zeros(params)
    rng = np.random.default_rng(cfg.seed + 1)
    best = params.arrays()
    best_val, best_epoch, since_best = float("inf"), 0, 0
    history: list = []
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = train_idx[rng.permutation(len(train_idx))]
        seen, sq_err = 0, 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            params.zero_grad()
            current_tape().clear()
            loss = mse_loss(forward(windows.inputs(batch), params, model.cfg), windows.labels(batch))
            backward(loss)
            adam_step(params, adam, cfg)
            sq_err += loss.item() * len(batch)
            seen += len(batch)
        val = evaluate_mse(model, windows, val_idx, cfg.batch_size)
        if not np.isfinite(val):
            raise NumericError(f"validation loss is not finite at epoch {epoch}")
        record = EpochRecord(epoch, sq_err / seen, val, time.perf_counter() - started)
        history.append(record)
        logger.info("epoch %d train_mse %.6f val_mse %.6f (%.1fs)", epoch, record.train_mse, val, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
        if val < best_val:
            best_val, best_epoch, since_best = val, epoch, 0
            best = params.arrays()
            if out is not None:
                save_checkpoint(out / "best.ckpt", model.cfg, params, adam, cfg, meta=checkpoint_meta)
        else:
            since_best += 1
        if out is not None:
            write_history(out / "history.csv", history, with_seconds=not cfg.deterministic)
            if cfg.deterministic:
                write_history(out / "timing.csv", history)
        if since_best >= cfg.patience:
            stopped_early = True
            break
    if out is not None and not history:
        write_history(out / "history.csv", history)
        save_checkpoint(out / "best.ckpt", model.cfg, params, adam, cfg, meta=checkpoint_meta)
    params.load_arrays(best)
    return TrainResult(best, best_epoch, best_val, history, adam, stopped_early)
