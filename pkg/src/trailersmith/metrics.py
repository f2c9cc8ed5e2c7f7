"""
Trailer-level prediction and AP-based evaluation.

Average precision is the step-wise area under the precision-recall curve:
items are ranked by descending score, items sharing a score enter together, and
AP = sum_n (R_n - R_{n-1}) * P_n over those threshold steps.
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field

from trailersmith import tensor as T
from trailersmith.aggregator import fuse_logits
from trailersmith.errors import (
    DimensionError,
    StorageError,
    UndefinedMetricError,
    ValidationError,
    handle_errors,
)
from trailersmith.features import FeatureSequence
from trailersmith.genres import GENRES, NUM_GENRES
from trailersmith.snippets import enumerate_inference_snippets, gather_snippet

if TYPE_CHECKING:
    from trailersmith.aggregator import AggregatorModel

logger = logging.getLogger("trailersmith.metrics")

METRIC_NAMES = ("micro_ap", "macro_ap", "weighted_ap", "sample_ap")


@dataclass
class PredictionSet:
    """Per-trailer genre probabilities with ground-truth label bits."""
    ids: List[str]
    probabilities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n = len(self.ids)
        if self.probabilities.shape != (n, NUM_GENRES) or self.labels.shape != (n, NUM_GENRES):
            raise DimensionError("Predictions must be n x g",
                                 {"probabilities": self.probabilities.shape, "labels": self.labels.shape})
        if len(set(self.ids)) != n:
            raise ValidationError("Duplicate trailer ids in predictions")


def _as_rows(features: Union[np.ndarray, FeatureSequence]) -> np.ndarray:
    if isinstance(features, FeatureSequence):
        return features.as_float64()
    return np.asarray(features, dtype=np.float64)


def snippet_logits(features: Union[np.ndarray, FeatureSequence], model: "AggregatorModel", c: int) -> np.ndarray:
    """Logits of every inference snippet, shape (q, g)."""
    rows = _as_rows(features)
    if rows.ndim != 2 or len(rows) == 0:
        raise DimensionError("Feature sequence must be a non-empty n_clips x b matrix", {"shape": rows.shape})
    if rows.shape[1] != model.config.b:
        raise DimensionError("Feature width does not match the model",
                             {"expected": model.config.b, "actual": rows.shape[1]})
    plan = enumerate_inference_snippets(len(rows), c)
    block = np.stack([gather_snippet(rows, snippet) for snippet in plan])
    return model.logits(block).data


def predict_trailer(features: Union[np.ndarray, FeatureSequence], model: "AggregatorModel", c: int,
                    fused_with: Optional[Tuple[Union[np.ndarray, FeatureSequence], "AggregatorModel"]] = None
                    ) -> np.ndarray:
    """Genre-wise mean of the snippet probabilities; with a second stream, logits are fused per snippet first."""
    logits = snippet_logits(features, model, c)
    if fused_with is not None:
        other_features, other_model = fused_with
        other = snippet_logits(other_features, other_model, c)
        if other.shape != logits.shape:
            raise DimensionError("Streams must share the clip sequence",
                                 {"first": logits.shape, "second": other.shape})
        logits = fuse_logits(logits, other)
    return T.sigmoid(logits).data.mean(axis=0)


def _threshold_steps(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, true positives, predicted positives) at every distinct score, descending."""
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    true_positives = np.cumsum(labels)[last_of_group]
    return scores[last_of_group], true_positives, last_of_group + 1.0


def average_precision(scores: Sequence[float], labels: Sequence[float]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("Scores and labels must be equal-length vectors",
                             {"scores": scores.shape, "labels": labels.shape})
    positives = labels.sum()
    if positives == 0:
        raise UndefinedMetricError("Average precision is undefined without positives")
    _, true_positives, predicted = _threshold_steps(scores, labels)
    precision = true_positives / predicted
    recall = true_positives / positives
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_curve(scores: Sequence[float], labels: Sequence[float]) -> List[Tuple[float, float, float]]:
    """(threshold, precision, recall) at every distinct score, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    positives = labels.sum()
    if positives == 0:
        raise UndefinedMetricError("PR curve is undefined without positives")
    thresholds, true_positives, predicted = _threshold_steps(scores, labels)
    return [(float(t), float(tp / k), float(tp / positives))
            for t, tp, k in zip(thresholds, true_positives, predicted)]


def micro_ap(predictions: PredictionSet, warn: bool = True) -> float:
    """All (trailer, genre) pairs as one binary task."""
    return average_precision(predictions.probabilities.ravel(), predictions.labels.ravel())


def per_genre_ap(predictions: PredictionSet, warn: bool = True) -> Dict[str, Optional[float]]:
    """AP per genre; None for genres without positives (logged)."""
    table: Dict[str, Optional[float]] = {}
    for k, genre in enumerate(GENRES):
        column = predictions.labels[:, k]
        if column.sum() == 0:
            table[genre] = None
            if warn:
                logger.warning(f"Genre '{genre}' has no positives; excluded from mAP/wAP")
            continue
        table[genre] = average_precision(predictions.probabilities[:, k], column)
    return table


def macro_ap(predictions: PredictionSet, warn: bool = True) -> float:
    values = [ap for ap in per_genre_ap(predictions, warn).values() if ap is not None]
    if not values:
        raise UndefinedMetricError("No genre has positives")
    return float(np.mean(values))


def weighted_ap(predictions: PredictionSet, warn: bool = True) -> float:
    table = per_genre_ap(predictions, warn)
    counts = predictions.labels.sum(axis=0)
    weighted = [(counts[k], ap) for k, ap in enumerate(table.values()) if ap is not None]
    if not weighted:
        raise UndefinedMetricError("No genre has positives")
    total = sum(n for n, _ in weighted)
    return float(sum(n / total * ap for n, ap in weighted))


def sample_ap(predictions: PredictionSet, warn: bool = True) -> float:
    values = []
    skipped = 0
    for row in range(len(predictions.ids)):
        if predictions.labels[row].sum() == 0:
            skipped += 1
            continue
        values.append(average_precision(predictions.probabilities[row], predictions.labels[row]))
    if skipped and warn:
        logger.warning(f"{skipped} trailers without labels excluded from sAP")
    if not values:
        raise UndefinedMetricError("No trailer has labels")
    return float(np.mean(values))


METRICS = {
    "micro_ap": micro_ap,
    "macro_ap": macro_ap,
    "weighted_ap": weighted_ap,
    "sample_ap": sample_ap,
}


class MetricSummary(BaseModel):
    """Mean and population std over folds, in percent; None when no fold defines the value."""
    mean: Optional[float] = None
    std: Optional[float] = Field(default=None, ge=0)
    per_fold: List[Optional[float]]

    def rounded(self, per_fold: bool = True) -> Dict[str, object]:
        data: Dict[str, object] = {"mean": _round(self.mean), "std": _round(self.std)}
        if per_fold:
            data["per_fold"] = [_round(v) for v in self.per_fold]
        return data


class EvalReport(BaseModel):
    metrics: Dict[str, MetricSummary]
    per_genre: Dict[str, MetricSummary]
    excluded_genres: List[int] = Field(default_factory=list)
    meta: Dict[str, object] = Field(default_factory=dict)

    def to_yaml(self) -> str:
        data = {
            "meta": self.meta,
            "metrics": {name: summary.rounded() for name, summary in self.metrics.items()},
            "per_genre": {name: summary.rounded() for name, summary in self.per_genre.items()},
            "excluded_genres": list(self.excluded_genres),
        }
        return yaml.safe_dump(data, sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "EvalReport":
        data = yaml.safe_load(text) or {}
        return cls(**data)


def _round(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(value, 2)


def _summarize(values: Sequence[Optional[float]]) -> MetricSummary:
    present = [v for v in values if v is not None]
    per_fold = [None if v is None else 100.0 * v for v in values]
    if not present:
        return MetricSummary(per_fold=per_fold)
    scaled = 100.0 * np.asarray(present)
    return MetricSummary(mean=float(scaled.mean()), std=float(scaled.std()), per_fold=per_fold)


def evaluate_folds(fold_predictions: Sequence[PredictionSet], meta: Optional[Dict[str, object]] = None) -> EvalReport:
    """All four metrics per fold, reported as mean +- population std (x100), plus per-genre AP."""
    if not fold_predictions:
        raise ValidationError("No folds to evaluate")
    metric_values: Dict[str, List[float]] = {name: [] for name in METRICS}
    genre_tables = []
    for predictions in fold_predictions:
        # excluded genres are reported once per fold, here, not by every metric built on them
        genre_tables.append(per_genre_ap(predictions))
        for name, fn in METRICS.items():
            metric_values[name].append(fn(predictions, warn=name == "sample_ap"))
    excluded = [sum(ap is None for ap in table.values()) for table in genre_tables]
    return EvalReport(
        metrics={name: _summarize(values) for name, values in metric_values.items()},
        per_genre={genre: _summarize([table[genre] for table in genre_tables]) for genre in GENRES},
        excluded_genres=excluded,
        meta=dict(meta or {}),
    )


@handle_errors(error_type=StorageError)
def write_report(path: Union[str, Path], report: EvalReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_yaml(), encoding="utf-8")


@handle_errors(error_type=StorageError)
def read_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.from_yaml(Path(path).read_text(encoding="utf-8"))


@handle_errors(error_type=StorageError)
def write_pr_curves(path: Union[str, Path], predictions: PredictionSet) -> None:
    """CSV rows `curve,threshold,precision,recall` for the micro curve and every genre with positives."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["curve", "threshold", "precision", "recall"])
    curves = [("micro", predictions.probabilities.ravel(), predictions.labels.ravel())]
    curves += [(genre, predictions.probabilities[:, k], predictions.labels[:, k]) for k, genre in enumerate(GENRES)]
    for name, scores, labels in curves:
        if labels.sum() == 0:
            continue
        for threshold, precision, recall in pr_curve(scores, labels):
            writer.writerow([name, repr(threshold), repr(precision), repr(recall)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")


@handle_errors(error_type=StorageError)
def write_predictions(path: Union[str, Path], predictions: PredictionSet) -> None:
    """CSV with one row per trailer: id, g probabilities, g label bits."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["id"] + [f"p_{g}" for g in GENRES] + [f"y_{g}" for g in GENRES])
    for i, trailer_id in enumerate(predictions.ids):
        writer.writerow([trailer_id] + [repr(float(v)) for v in predictions.probabilities[i]]
                        + [int(v) for v in predictions.labels[i]])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")


@handle_errors(error_type=StorageError)
def read_predictions(path: Union[str, Path]) -> PredictionSet:
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows or len(rows[0]) != 1 + 2 * NUM_GENRES:
        raise ValidationError("Not a predictions file", {"path": str(path)})
    body = rows[1:]
    return PredictionSet(
        ids=[row[0] for row in body],
        probabilities=np.array([[float(v) for v in row[1:1 + NUM_GENRES]] for row in body]).reshape(-1, NUM_GENRES),
        labels=np.array([[float(v) for v in row[1 + NUM_GENRES:]] for row in body]).reshape(-1, NUM_GENRES),
    )
