"""
Training loop for clip aggregation models.

One epoch visits every training trailer once in shuffled order and draws one random
snippet per trailer. Validation uses inference-mode predictions (snippet averaging).
The learning rate drops by `lr_factor` whenever the validation loss plateaus, and
training stops early when it has not improved for `early_stop_patience` epochs; the
returned model carries the parameters of the best validation epoch.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from trailersmith import tensor as T
from trailersmith.aggregator import AggregatorModel
from trailersmith.errors import (
    ConfigError,
    DimensionError,
    StorageError,
    TrainingError,
    UndefinedMetricError,
    handle_errors,
)
from trailersmith.features import read_features
from trailersmith.genres import GenreSet
from trailersmith.metrics import PredictionSet, micro_ap, macro_ap, predict_trailer
from trailersmith.records import SplitAssignment, TrailerRecord, resolve_path
from trailersmith.snippets import gather_snippet, sample_training_snippet
from trailersmith.tensor import ParamStore, Tensor

logger = logging.getLogger("trailersmith.trainer")

PROB_FLOOR = 1e-7


class TrainConfig(BaseModel):
    """Optimization protocol."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    plateau_patience: int = Field(default=20, ge=1)
    lr_factor: float = Field(default=10.0, gt=1)
    plateau_min_delta: float = Field(default=1e-5, ge=0)
    early_stop_patience: int = Field(default=30, ge=1)
    clips_per_snippet: int = Field(default=30, ge=1)
    strategy: str = "Shot-24"
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)


class FeatureDataset:
    """Clip feature matrices (widened to float64) and labels keyed by trailer id."""

    def __init__(self, rows: Dict[str, np.ndarray], labels: Dict[str, GenreSet], backbone_id: str = ""):
        if set(rows) != set(labels):
            raise ConfigError("Feature rows and labels cover different trailers")
        widths = {matrix.shape[1] for matrix in rows.values()}
        if len(widths) > 1:
            raise DimensionError("Feature files disagree on width b", {"widths": sorted(widths)})
        self.rows = rows
        self.labels = labels
        self.backbone_id = backbone_id

    @property
    def b(self) -> int:
        return next(iter(self.rows.values())).shape[1]

    @property
    def ids(self) -> List[str]:
        return list(self.rows)

    def subset(self, ids: Sequence[str]) -> "FeatureDataset":
        return FeatureDataset({i: self.rows[i] for i in ids}, {i: self.labels[i] for i in ids}, self.backbone_id)

    @classmethod
    def from_records(cls, records: Sequence[TrailerRecord], manifest_path: Union[str, Path],
                     workers: int = 1) -> "FeatureDataset":
        missing = [r.id for r in records if r.feature_path is None]
        if missing:
            raise ConfigError("Records without feature files; run `trailersmith segment` first",
                              {"first": missing[0], "count": len(missing)})
        paths = [resolve_path(manifest_path, r.feature_path) for r in records]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            sequences = list(executor.map(read_features, paths))
        backbones = {s.backbone_id for s in sequences}
        return cls(
            {r.id: s.as_float64() for r, s in zip(records, sequences)},
            {r.id: r.genres for r in records},
            backbone_id=",".join(sorted(backbones)),
        )


def bce_loss(p: Union[Tensor, np.ndarray], y: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean binary cross entropy over genres and batch, on probabilities clamped away from 0 and 1."""
    p = T.clip(T.as_tensor(p), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = T.as_tensor(y)
    if p.shape != y.shape:
        raise DimensionError("Probabilities and labels differ in shape", {"p": p.shape, "y": y.shape})
    log_likelihood = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -T.mean(log_likelihood)


@dataclass
class AdamState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected ADAM update, in place."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError("Non-finite gradient", {"parameter": name, "step": state.step + 1})
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads[name]
        if tensor.shape != grad.shape:
            raise DimensionError(f"Gradient for '{name}' has the wrong shape",
                                 {"expected": tensor.shape, "actual": grad.shape})
        m = state.first.get(name, np.zeros_like(grad))
        v = state.second.get(name, np.zeros_like(grad))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first[name], state.second[name] = m, v
        tensor.data = tensor.data - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    wait: int = 0


def plateau_schedule(state: PlateauState, val_loss: float, patience: int = 20,
                     factor: float = 10.0, min_delta: float = 1e-5) -> float:
    """Called once per epoch; divides lr by `factor` after `patience` epochs without improvement."""
    if val_loss < state.best - min_delta:
        state.best = val_loss
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= patience:
            state.lr = state.lr / factor
            state.wait = 0
            logger.info(f"Validation loss plateaued; learning rate -> {state.lr:.3g}")
    return state.lr


@dataclass
class EpochRecord:
    """One epoch of the training log; `lr` is the rate the schedule leaves in force after the epoch."""
    epoch: int
    lr: float
    train_lr: float
    train_loss: float
    val_loss: float
    val_metrics: Dict[str, Optional[float]]

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "lr": self.lr,
            "train_lr": self.train_lr,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_metrics": self.val_metrics,
        }, sort_keys=False)


@dataclass
class TrainState:
    adam: AdamState
    plateau: PlateauState
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    history: List[EpochRecord] = field(default_factory=list)


@dataclass
class FitResult:
    model: AggregatorModel
    history: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def predict_dataset(model: AggregatorModel, dataset: FeatureDataset, c: int) -> PredictionSet:
    """Inference-mode predictions for every trailer of a dataset."""
    ids = dataset.ids
    probabilities = np.stack([predict_trailer(dataset.rows[i], model, c) for i in ids])
    return PredictionSet(ids=ids, probabilities=probabilities,
                         labels=np.stack([dataset.labels[i].to_vector() for i in ids]))


def _validation_metrics(predictions: PredictionSet) -> Dict[str, Optional[float]]:
    metrics: Dict[str, Optional[float]] = {}
    for name, fn in (("micro_ap", micro_ap), ("macro_ap", macro_ap)):
        try:
            metrics[name] = fn(predictions, warn=False)
        except UndefinedMetricError:
            # tiny validation subsets can lack positives altogether
            metrics[name] = None
    return metrics


def train_epoch(model: AggregatorModel, dataset: FeatureDataset, ids: Sequence[str], config: TrainConfig,
                state: TrainState, rng: np.random.Generator) -> float:
    """One pass over `ids` in shuffled order; returns the mean training loss."""
    order = [ids[i] for i in rng.permutation(len(ids))]
    total, seen = 0.0, 0
    for start in range(0, len(order), config.batch_size):
        batch_ids = order[start:start + config.batch_size]
        blocks, targets = [], []
        for trailer_id in batch_ids:
            rows = dataset.rows[trailer_id]
            snippet = sample_training_snippet(len(rows), config.clips_per_snippet, rng)
            blocks.append(gather_snippet(rows, snippet))
            targets.append(dataset.labels[trailer_id].to_vector())
        logits = model.logits(np.stack(blocks), rng=rng)
        loss = bce_loss(T.sigmoid(logits), np.stack(targets))
        model.params.zero_grad()
        loss.backward()
        adam_step(model.params, model.params.grads(), state.adam, state.plateau.lr,
                  config.beta1, config.beta2, config.adam_eps)
        total += loss.item() * len(batch_ids)
        seen += len(batch_ids)
    return total / seen


def fit(dataset: FeatureDataset, split: SplitAssignment, model: AggregatorModel, config: TrainConfig,
        rng: Optional[np.random.Generator] = None, log_path: Optional[Union[str, Path]] = None) -> FitResult:
    """Train `model` on the split's train subset with validation-driven schedule and early stopping."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    train_ids = [i for i in split.ids("train") if i in dataset.rows]
    val_ids = [i for i in split.ids("val") if i in dataset.rows]
    if not train_ids or not val_ids:
        raise ConfigError("Training needs non-empty train and val subsets",
                          {"fold": split.fold, "train": len(train_ids), "val": len(val_ids)})
    if dataset.b != model.config.b:
        raise DimensionError("Dataset feature width does not match the model",
                             {"dataset": dataset.b, "model": model.config.b})

    val_set = dataset.subset(val_ids)
    state = TrainState(adam=AdamState(), plateau=PlateauState(lr=config.lr))
    best_params = model.params.snapshot()
    log_lines: List[str] = []
    stopped_early = False

    try:
        for epoch in range(1, config.epochs + 1):
            train_lr = state.plateau.lr
            train_loss = train_epoch(model, dataset, train_ids, config, state, rng)
            predictions = predict_dataset(model, val_set, config.clips_per_snippet)
            val_loss = bce_loss(predictions.probabilities, predictions.labels).item()
            if not math.isfinite(train_loss) or not math.isfinite(val_loss):
                raise TrainingError("Loss is not finite", {"epoch": epoch, "fold": split.fold})

            if val_loss < state.best_val_loss:
                state.best_val_loss = val_loss
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
                best_params = model.params.snapshot()
            else:
                state.epochs_since_improvement += 1

            lr = plateau_schedule(state.plateau, val_loss, config.plateau_patience, config.lr_factor,
                                  config.plateau_min_delta)
            record = EpochRecord(epoch=epoch, lr=lr, train_lr=train_lr, train_loss=train_loss,
                                 val_loss=val_loss, val_metrics=_validation_metrics(predictions))
            state.history.append(record)
            log_lines.append(record.to_json())
            logger.debug(f"fold {split.fold} epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} lr {lr:.3g}")

            if state.epochs_since_improvement >= config.early_stop_patience:
                stopped_early = True
                logger.info(f"Early stopping at epoch {epoch} (best epoch {state.best_epoch})")
                break
    finally:
        # completed epochs are kept even when training fails part-way
        if log_path is not None:
            _write_log(log_path, log_lines)

    model.params.load(best_params)
    return FitResult(model=model, history=state.history, best_epoch=state.best_epoch,
                     best_val_loss=state.best_val_loss, stopped_early=stopped_early)


@handle_errors(error_type=StorageError)
def _write_log(path: Union[str, Path], lines: List[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
