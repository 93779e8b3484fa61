"""ADAM training with fold-based hold-out monitoring and best-epoch restoration."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .dataset import Dataset
from .network import ArchConfig, ModelParameters, check_parameters, forward, predict
from .rng import substream

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, history: TrainingHistory):
        self.history = history
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4096
    max_epochs: int = 300
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    early_stop_patience: float = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not self.early_stop_patience >= 1:
            raise ValueError("early_stop_patience must be at least 1 (use inf to disable)")


@dataclass(frozen=True)
class FoldAssignment:
    """Which fold is held out for testing, and optionally a separate monitoring fold.

    Without ``val_fold`` the test fold also drives early stopping.
    """

    k_folds: int = 10
    test_fold: int = 9
    seed: int = 0
    val_fold: int | None = None

    def __post_init__(self):
        if not 0 <= self.test_fold < self.k_folds:
            raise ValueError(f"test fold {self.test_fold} outside [0, {self.k_folds})")
        if self.val_fold is not None:
            if not 0 <= self.val_fold < self.k_folds:
                raise ValueError(f"validation fold {self.val_fold} outside [0, {self.k_folds})")
            if self.val_fold == self.test_fold:
                raise ValueError("validation fold must differ from the test fold")

    @property
    def monitor_fold(self) -> int:
        return self.test_fold if self.val_fold is None else self.val_fold

    def train_folds(self) -> list[int]:
        held = {self.test_fold, self.monitor_fold}
        return [f for f in range(self.k_folds) if f not in held]


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig):
    """One bias-corrected ADAM update, in place on ``params`` and ``state``."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients at step {state.t + 1} in: {', '.join(bad)}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        params[k] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)


@dataclass
class TrainingHistory:
    train_mse: list[float] = field(default_factory=list)
    holdout_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_holdout_mse: float = math.inf
    initial_train_mse: float = math.nan
    initial_holdout_mse: float = math.nan
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.holdout_mse)

    def record(self, train_mse: float, holdout_mse: float) -> bool:
        """Append an epoch (1-based); True when it is a new best."""
        self.train_mse.append(train_mse)
        self.holdout_mse.append(holdout_mse)
        if holdout_mse < self.best_holdout_mse:
            self.best_holdout_mse = holdout_mse
            self.best_epoch = len(self.holdout_mse)
            return True
        return False

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "holdout_mse"])
            for i, (tr, ho) in enumerate(zip(self.train_mse, self.holdout_mse), start=1):
                w.writerow([i, repr(tr), repr(ho)])

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("train_mse")
        d.pop("holdout_mse")
        d["epochs"] = self.epochs
        return d


def _mse(pred: np.ndarray, obs: np.ndarray) -> float:
    d = pred - obs
    return float(np.mean(d * d))


def train(
    params: ModelParameters,
    arch: ArchConfig,
    dataset: Dataset,
    folds: FoldAssignment,
    config: TrainConfig,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelParameters, TrainingHistory]:
    """Fit ``params`` on the training folds, monitoring the hold-out fold each epoch.

    Targets are standardised with the training-fold mean and SD; the network
    learns the standardised target and ``params.target_mean``/``target_scale``
    map its output back. All reported MSEs are in target units. The returned
    parameters are those of the epoch with the lowest hold-out MSE. Training
    stops after ``max_epochs`` or ``early_stop_patience`` epochs without
    improvement.

    Raises:
        TrainingError: if the training folds are empty.
        TrainingDiverged: if a loss or gradient becomes non-finite; the
            exception carries the history so far.
    """
    check_parameters(params, arch)
    if dataset.k_folds != folds.k_folds:
        raise TrainingError(f"dataset has {dataset.k_folds} folds, assignment expects {folds.k_folds}")
    train_idx = dataset.fold_indices(folds.train_folds())
    hold_idx = dataset.fold_indices(folds.monitor_fold)
    if train_idx.size == 0:
        raise TrainingError("training folds are empty")
    if hold_idx.size == 0:
        raise TrainingError(f"monitoring fold {folds.monitor_fold} is empty")
    train_set = set(train_idx.tolist())

    params = params.copy()
    y_train = dataset.targets[train_idx]
    params.target_mean = float(y_train.mean())
    sd = float(y_train.std())
    params.target_scale = sd if sd > 0 else 1.0
    mean, scale = params.target_mean, params.target_scale

    hold_x, hold_y = dataset.patches[hold_idx], dataset.targets[hold_idx]
    arrays = {k: t.data for k, t in params.tensors.items()}
    state = AdamState.zeros_like(arrays)
    history = TrainingHistory()
    history.initial_train_mse = _mse(predict(params, arch, dataset.patches[train_idx]), y_train)
    history.initial_holdout_mse = _mse(predict(params, arch, hold_x), hold_y)
    best = {k: a.copy() for k, a in arrays.items()}
    logger.info(
        "training on %d samples, monitoring fold %d (%d samples)", train_idx.size, folds.monitor_fold, hold_idx.size
    )

    for epoch in range(1, config.max_epochs + 1):
        order = substream(config.seed, "shuffle", epoch).permutation(train_idx)
        sq_sum = 0.0
        for b, start in enumerate(range(0, order.size, config.batch_size)):
            idx = order[start : start + config.batch_size]
            # hold-out rows must never reach a gradient
            assert all(i in train_set for i in idx.tolist()), "hold-out sample in training batch"
            x = dataset.patches[idx][:, None, :, :]
            y = (dataset.targets[idx] - mean) / scale
            params.zero_grad()
            out = forward(params, arch, x, train=True, rng_for=lambda name: substream(config.seed, "train", epoch, b, name))
            loss = ag.mse_loss(out, y)
            if not math.isfinite(float(loss.data)):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}, batch {b}", history)
            ag.backward(loss)
            grads = {k: t.grad for k, t in params.tensors.items()}
            try:
                adam_step(arrays, grads, state, config)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), history) from None
            sq_sum += float(loss.data) * idx.size
        train_mse = sq_sum / order.size * scale * scale
        holdout_mse = _mse(predict(params, arch, hold_x), hold_y)
        if not math.isfinite(holdout_mse):
            history.record(train_mse, holdout_mse)
            raise TrainingDiverged(f"hold-out MSE became {holdout_mse} at epoch {epoch}", history)
        if history.record(train_mse, holdout_mse):
            best = {k: a.copy() for k, a in arrays.items()}
        logger.info("epoch %d: train %.6g holdout %.6g (best %d)", epoch, train_mse, holdout_mse, history.best_epoch)
        if on_epoch is not None:
            on_epoch(epoch, train_mse, holdout_mse)
        if epoch - history.best_epoch >= config.early_stop_patience:
            history.stopped_early = epoch < config.max_epochs
            break

    params.load_arrays(best)
    return params, history
