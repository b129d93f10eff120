"""Seeded training loop: cross-entropy, Adam, plateau scheduling, checkpoints.

Adam uses the classic formulation with L2 regularization folded into the
gradient (``g + weight_decay * param``), beta1 0.9, beta2 0.999, eps 1e-8,
and bias-corrected moments. The learning rate halves (by default) after the
validation loss fails to improve strictly for ``plateau_patience``
consecutive epochs. The checkpoint reported for testing is always the one
with the lowest validation loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericsError
from .metrics import pr_curve
from .model import TeleViTModel, save_checkpoint, _log_softmax_np
from .tensor import Tensor, backward, log_softmax, no_grad, tensor_mean

log = logging.getLogger(__name__)

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-7
    seed: int = 0
    horizon: int = 1
    variant: str = "with_indices_and_global"
    max_steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auprc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainHistory":
        return cls(**payload)


# ----------------------------------------------------------------------
# Loss
# ----------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, target: Array) -> Tensor:
    """Mean over batch and pixels of the true-class negative log-softmax.

    ``logits`` is (B, 2, H, W); ``target`` is (B, 1, H, W) with values in
    {0, 1} (class 1 is the positive class).
    """
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ValueError(f"cross_entropy_loss expects (B, 2, H, W) logits, got {logits.shape}")
    expected = (logits.shape[0], 1, logits.shape[2], logits.shape[3])
    if target.shape != expected:
        raise ValueError(f"target shape {target.shape} does not match logits {expected}")
    values = np.unique(target)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError(f"target must be binary, got values {values}")

    logp = log_softmax(logits, axis=1)
    t = target[:, 0].astype(np.float64)
    picked = logp[:, 1, :, :] * Tensor(t) + logp[:, 0, :, :] * Tensor(1.0 - t)
    return -tensor_mean(picked)


def _loss_value(model: TeleViTModel, samples: Sequence, batch_size: int) -> float:
    """Mean cross-entropy over samples, without building a graph."""
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            logits, _ = model.forward_samples(chunk)
            target = np.stack([s.target for s in chunk])
            total += float(cross_entropy_loss(logits, target).data) * len(chunk)
    return total / len(samples)


def _val_auprc(model: TeleViTModel, samples: Sequence) -> float:
    scores: list[Array] = []
    labels: list[Array] = []
    for plane, sample in zip(model.scores_batch(list(samples)), samples):
        scores.append(plane.ravel())
        labels.append((sample.target.ravel() > 0).astype(np.int64))
    return pr_curve(np.concatenate(scores), np.concatenate(labels)).auprc


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_model(cls, model: TeleViTModel) -> "AdamState":
        state = cls()
        for name, p in model.named_parameters():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Sequence[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update in place; gradients may be None (treated as zero)."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if not np.all(np.isfinite(p.data)):
            raise NumericsError(f"non-finite values in parameter {name!r} after update")


# ----------------------------------------------------------------------
# Plateau scheduling
# ----------------------------------------------------------------------

class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` epochs without strict
    improvement of the validation loss; the counter resets on improvement."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 1e-7):
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {factor}")
        if patience < 1:
            raise ConfigError(f"plateau patience must be >= 1, got {patience}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def reduce_on_plateau(
    val_losses: Sequence[float],
    lr: float,
    factor: float,
    patience: int,
    min_lr: float = 1e-7,
) -> float:
    """Replay a validation-loss history and return the resulting lr."""
    sched = PlateauScheduler(lr, factor, patience, min_lr)
    for value in val_losses:
        sched.step(value)
    return sched.lr


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------

def _snapshot(model: TeleViTModel) -> dict[str, Array]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _restore(model: TeleViTModel, snapshot: dict[str, Array]) -> None:
    for name, p in model.named_parameters():
        p.data = snapshot[name].copy()


def train(
    model: TeleViTModel,
    datasets: dict[str, Sequence],
    config: TrainConfig,
    out_dir=None,
) -> tuple[dict, TrainHistory]:
    """Deterministic seeded loop over epochs; returns the best checkpoint info.

    ``datasets`` holds "train" and "val" sample lists built for the config's
    horizon and variant. Per epoch: shuffle with a (seed, epoch) stream,
    minibatch Adam steps, then validation loss + AUPRC, scheduler step, and
    best/last checkpointing. On divergence the last finished epoch's
    parameters are kept and the error re-raised.
    """
    train_set = list(datasets["train"])
    val_set = list(datasets["val"])
    if not train_set or not val_set:
        raise ConfigError("train() needs non-empty train and val datasets")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"train": asdict(config), "model": None}, indent=2, default=str)
        )

    history = TrainHistory()
    sched = PlateauScheduler(
        config.lr, config.plateau_factor, config.plateau_patience, config.min_lr
    )
    adam = AdamState.for_model(model)
    best_val = math.inf
    best_snapshot = _snapshot(model)
    best_epoch = -1
    last_good = _snapshot(model)

    def ckpt_extra() -> dict:
        return {"train_config": asdict(config)}

    try:
        for epoch in range(1, config.epochs + 1):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_set))
            dropout_rng = (
                np.random.default_rng([config.seed, epoch, 1])
                if model.config.dropout > 0
                else None
            )
            lr = sched.lr
            epoch_loss = 0.0
            seen = 0
            steps = 0
            for start in range(0, len(order), config.batch_size):
                if (
                    config.max_steps_per_epoch is not None
                    and steps >= config.max_steps_per_epoch
                ):
                    break
                chunk = [train_set[i] for i in order[start : start + config.batch_size]]
                logits, _ = model.forward_samples(chunk, dropout_rng=dropout_rng)
                target = np.stack([s.target for s in chunk])
                loss = cross_entropy_loss(logits, target)
                model.zero_grad()
                backward(loss)
                adam_step(model.named_parameters(), adam, lr, config.weight_decay)
                epoch_loss += float(loss.data) * len(chunk)
                seen += len(chunk)
                steps += 1

            train_loss = epoch_loss / max(seen, 1)
            val_loss = _loss_value(model, val_set, config.batch_size)
            val_auprc = _val_auprc(model, val_set)
            history.train_loss.append(train_loss)
            history.val_loss.append(val_loss)
            history.val_auprc.append(val_auprc)
            history.lr.append(lr)
            log.info(
                "epoch %d: train %.6f val %.6f auprc %.4f lr %.2e",
                epoch, train_loss, val_loss, val_auprc, lr,
            )

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_snapshot = _snapshot(model)
                if out is not None:
                    _restore_and_save(model, best_snapshot, out / "best.ckpt", epoch, {
                        "val_loss": val_loss, "val_auprc": val_auprc,
                    }, ckpt_extra())
            sched.step(val_loss)
            last_good = _snapshot(model)
    except NumericsError:
        _restore(model, last_good)
        if out is not None:
            save_checkpoint(model, out / "last.ckpt", epoch=len(history.val_loss),
                            metrics={}, extra=ckpt_extra())
            _finish_history(history, best_epoch, out)
        raise

    history.best_epoch = best_epoch
    if out is not None:
        save_checkpoint(
            model, out / "last.ckpt", epoch=config.epochs,
            metrics={"val_loss": history.val_loss[-1]}, extra=ckpt_extra(),
        )
        _finish_history(history, best_epoch, out)
    _restore(model, best_snapshot)
    best = {
        "epoch": best_epoch,
        "val_loss": best_val,
        "val_auprc": history.val_auprc[best_epoch - 1] if best_epoch > 0 else None,
        "path": str(out / "best.ckpt") if out is not None else None,
    }
    return best, history


def _restore_and_save(model, snapshot, path, epoch, metrics, extra) -> None:
    current = _snapshot(model)
    _restore(model, snapshot)
    save_checkpoint(model, path, epoch=epoch, metrics=metrics, extra=extra)
    _restore(model, current)


def _finish_history(history: TrainHistory, best_epoch: int, out: Path) -> None:
    history.best_epoch = best_epoch
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2))
