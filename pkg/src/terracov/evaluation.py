"""Held-out explanatory power of a trained covariate network.

R^2 is ``1 - SS_res / SS_tot`` on the (transformed) target scale, so a
biased or useless predictor can score below zero.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .network import PREDICT_BATCH, ArchConfig, ModelParameters, predict
from .training import FoldAssignment


@dataclass(frozen=True)
class Metrics:
    mse: float
    r_squared: float
    n: int
    target_transform: str = "identity"

    def as_text(self) -> str:
        scale = "log scale" if self.target_transform == "log" else "original scale"
        return (
            f"n = {self.n}\n"
            f"MSE = {self.mse:.6g} ({scale})\n"
            f"R^2 = {self.r_squared:.4f} (1 - SS_res/SS_tot, {scale})\n"
        )


def mse(pred, obs) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    d = obs - pred
    return float(np.mean(d * d))


def r_squared(pred, obs) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    if obs.size < 2:
        raise ValueError("R^2 needs at least two observations")
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for constant observations")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / ss_tot


def fold_predictions(
    params: ModelParameters,
    arch: ArchConfig,
    dataset: Dataset,
    folds: FoldAssignment,
    batch_size: int = PREDICT_BATCH,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(row indices, predictions, observations) for the test fold, in dataset order."""
    idx = dataset.fold_indices(folds.test_fold)
    if idx.size == 0:
        raise ValueError(f"test fold {folds.test_fold} is empty")
    pred = predict(params, arch, dataset.patches[idx], batch_size)
    return idx, pred, np.asarray(dataset.targets)[idx]


def evaluate_fold(
    params: ModelParameters,
    arch: ArchConfig,
    dataset: Dataset,
    folds: FoldAssignment,
    batch_size: int = PREDICT_BATCH,
) -> Metrics:
    _, pred, obs = fold_predictions(params, arch, dataset, folds, batch_size)
    return Metrics(mse(pred, obs), r_squared(pred, obs), int(obs.size), dataset.target_transform)


def export_scatter(pred, obs, path: str | Path) -> Path:
    """Two-column ``observed,predicted`` CSV in the given row order."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {obs.shape}")
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observed", "predicted"])
        for o, p in zip(obs.tolist(), pred.tolist()):
            w.writerow([repr(o), repr(p)])
    return path


def read_scatter(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    obs = np.array([float(r["observed"]) for r in rows])
    pred = np.array([float(r["predicted"]) for r in rows])
    return obs, pred


def write_metrics(metrics: Metrics, directory: str | Path, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``metrics.txt`` (human-readable) and ``metrics.kv`` (``key=value`` lines)."""
    d = Path(directory)
    items = asdict(metrics)
    if extra:
        items.update(extra)
    text = metrics.as_text() + "".join(f"{k} = {v}\n" for k, v in (extra or {}).items())
    (d / "metrics.txt").write_text(text, encoding="utf-8")
    kv = "".join(f"{k}={repr(v) if isinstance(v, float) else v}\n" for k, v in items.items())
    (d / "metrics.kv").write_text(kv, encoding="utf-8")
    return d / "metrics.txt", d / "metrics.kv"


def read_metrics_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
