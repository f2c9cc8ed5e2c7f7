"""Tests for average precision, fold aggregation and trailer-level prediction."""

import itertools
import logging

import numpy as np
import pytest

from trailersmith import tensor as T
from trailersmith.aggregator import AggregatorConfig, AggregatorModel
from trailersmith.errors import DimensionError, UndefinedMetricError, ValidationError
from trailersmith.genres import GENRES, NUM_GENRES
from trailersmith.metrics import (
    EvalReport,
    PredictionSet,
    _summarize,
    average_precision,
    evaluate_folds,
    macro_ap,
    micro_ap,
    per_genre_ap,
    pr_curve,
    predict_trailer,
    read_predictions,
    read_report,
    sample_ap,
    snippet_logits,
    weighted_ap,
    write_pr_curves,
    write_predictions,
    write_report,
)


def _brute_force_ap(scores, labels) -> float:
    """Mean precision at the rank of each positive (scores assumed distinct)."""
    order = np.argsort(-np.asarray(scores))
    hits, total = 0, []
    for rank, index in enumerate(order, start=1):
        if labels[index]:
            hits += 1
            total.append(hits / rank)
    return float(np.mean(total))


def _two_genre_predictions() -> PredictionSet:
    probabilities = np.full((2, NUM_GENRES), 0.05)
    labels = np.zeros((2, NUM_GENRES))
    probabilities[:, 0] = [0.9, 0.1]
    labels[:, 0] = [1, 0]
    probabilities[:, 1] = [0.9, 0.1]
    labels[:, 1] = [0, 1]
    return PredictionSet(ids=["a", "b"], probabilities=probabilities, labels=labels)


def test_average_precision_small_example():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6)
    assert average_precision([0.1, 0.9, 0.5], [0, 1, 1]) == pytest.approx(1.0)


def test_tied_scores_form_one_threshold():
    for n, k in [(4, 1), (5, 2), (6, 6)]:
        labels = [1] * k + [0] * (n - k)
        assert average_precision([0.5] * n, labels) == pytest.approx(k / n)


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        scores = rng.permutation(n) / n
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        assert average_precision(scores, labels) == pytest.approx(_brute_force_ap(scores, labels))


def test_average_precision_small_exhaustive():
    scores = [0.9, 0.7, 0.4, 0.2]
    for labels in itertools.product([0, 1], repeat=4):
        if sum(labels):
            assert average_precision(scores, labels) == pytest.approx(_brute_force_ap(scores, labels))


def _integrated_pr_ap(scores, labels) -> float:
    """Sum of recall increments times precision over every distinct threshold, ties entering together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    total, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        selected = scores >= threshold
        true_positives = labels[selected].sum()
        recall = true_positives / labels.sum()
        total += (recall - previous_recall) * (true_positives / selected.sum())
        previous_recall = recall
    return total


def test_average_precision_exhaustive_six_items_with_ties():
    rng = np.random.default_rng(11)
    for labels in itertools.product([0, 1], repeat=6):
        if not any(labels):
            with pytest.raises(UndefinedMetricError):
                average_precision(rng.random(6), labels)
            continue
        for draw in range(50):
            # half the draws come from a coarse grid so equal scores are common
            scores = rng.integers(0, 4, size=6) / 4 if draw % 2 else rng.random(6)
            assert abs(average_precision(scores, labels) - _integrated_pr_ap(scores, labels)) <= 1e-12


def test_no_positives_is_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.3, 0.2], [0, 0])
    with pytest.raises(DimensionError):
        average_precision([0.3, 0.2], [0])


def test_pr_curve_steps():
    curve = pr_curve([0.9, 0.8, 0.7], [1, 0, 1])
    assert curve == [(0.9, 1.0, 0.5), (0.8, 0.5, 0.5), (0.7, pytest.approx(2 / 3), 1.0)]


def test_macro_and_weighted_exclude_genres_without_positives():
    predictions = _two_genre_predictions()
    table = per_genre_ap(predictions)
    assert table["action"] == pytest.approx(1.0)
    assert table["adventure"] == pytest.approx(0.5)
    assert sum(v is None for v in table.values()) == NUM_GENRES - 2
    assert macro_ap(predictions) == pytest.approx(0.75)
    assert weighted_ap(predictions) == pytest.approx(0.75)


def test_micro_and_sample_ap():
    predictions = _two_genre_predictions()
    # pooled: 0.9(+) 0.9(-) 0.1(+) 0.1(-) and 16 negatives at 0.05
    assert micro_ap(predictions) == pytest.approx(0.5 * 0.5 + 0.5 * 0.5)
    # each trailer ties its one label with one negative
    assert sample_ap(predictions) == pytest.approx(0.5)


def test_prediction_set_validation():
    with pytest.raises(DimensionError):
        PredictionSet(ids=["a"], probabilities=np.zeros((1, 3)), labels=np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        PredictionSet(ids=["a", "a"], probabilities=np.zeros((2, NUM_GENRES)), labels=np.zeros((2, NUM_GENRES)))


def test_fold_summary_uses_population_std():
    summary = _summarize([0.70, 0.72, 0.74])
    assert summary.mean == pytest.approx(72.0)
    assert summary.std == pytest.approx(1.633, abs=1e-3)
    assert summary.per_fold == pytest.approx([70.0, 72.0, 74.0])


def test_fold_summary_without_defined_folds_has_no_mean():
    summary = _summarize([None, None])
    assert summary.mean is None and summary.std is None
    assert summary.rounded() == {"mean": None, "std": None, "per_fold": [None, None]}
    partial = _summarize([None, 0.5])
    assert partial.mean == pytest.approx(50.0) and partial.per_fold == [None, 50.0]


def test_excluded_genres_warn_once_per_fold(caplog):
    predictions = _two_genre_predictions()
    package_logger = logging.getLogger("trailersmith")
    propagate = package_logger.propagate
    # exactly one route to the capture handler, whatever the CLI configured
    package_logger.propagate = False
    package_logger.addHandler(caplog.handler)
    try:
        with caplog.at_level(logging.WARNING, logger="trailersmith"):
            report = evaluate_folds([predictions, predictions])
    finally:
        package_logger.removeHandler(caplog.handler)
        package_logger.propagate = propagate
    warnings = [r.getMessage() for r in caplog.records if "has no positives" in r.getMessage()]
    assert len(warnings) == 2 * (NUM_GENRES - 2)
    assert len(set(warnings)) == NUM_GENRES - 2
    assert report.per_genre["comedy"].mean is None
    assert "mean: null" in report.to_yaml()


def test_evaluate_folds_and_report_yaml(tmp_path):
    predictions = _two_genre_predictions()
    report = evaluate_folds([predictions, predictions], meta={"strategy": "Shot-24"})
    assert report.metrics["macro_ap"].mean == pytest.approx(75.0)
    assert report.metrics["macro_ap"].std == pytest.approx(0.0)
    assert report.excluded_genres == [NUM_GENRES - 2, NUM_GENRES - 2]
    assert report.per_genre["comedy"].per_fold == [None, None]
    path = tmp_path / "report.yaml"
    write_report(path, report)
    loaded = read_report(path)
    assert loaded.meta == {"strategy": "Shot-24"}
    assert loaded.metrics["sample_ap"].mean == round(report.metrics["sample_ap"].mean, 2)
    assert set(loaded.metrics) == {"micro_ap", "macro_ap", "weighted_ap", "sample_ap"}
    assert isinstance(EvalReport.from_yaml(report.to_yaml()), EvalReport)
    with pytest.raises(ValidationError):
        evaluate_folds([])


def test_prediction_and_curve_files(tmp_path):
    predictions = _two_genre_predictions()
    path = tmp_path / "predictions_fold1.csv"
    write_predictions(path, predictions)
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "id" and header[1] == f"p_{GENRES[0]}" and header[-1] == f"y_{GENRES[-1]}"
    loaded = read_predictions(path)
    assert loaded.ids == predictions.ids
    assert np.array_equal(loaded.probabilities, predictions.probabilities)
    assert np.array_equal(loaded.labels, predictions.labels)

    curves = tmp_path / "pr_curves_fold1.csv"
    write_pr_curves(curves, predictions)
    names = {line.split(",")[0] for line in curves.read_text().splitlines()[1:]}
    assert names == {"micro", "action", "adventure"}


def _model() -> AggregatorModel:
    return AggregatorModel(AggregatorConfig(b=12, d=4, heads=2, blocks=1, dropout=0.0), seed=1)


def test_trailer_prediction_averages_snippet_probabilities():
    model = _model()
    rows = np.random.default_rng(0).normal(size=(11, 12))
    logits = snippet_logits(rows, model, c=4)
    assert logits.shape == (3, NUM_GENRES)
    expected = T.sigmoid(logits).data.mean(axis=0)
    assert np.allclose(predict_trailer(rows, model, c=4), expected)
    # snippet 3 cycles clips 8, 9, 10, 8
    last = model.logits(rows[[8, 9, 10, 8]]).data
    assert np.allclose(logits[2], last)


def test_fusing_a_stream_with_itself_changes_nothing():
    model = _model()
    rows = np.random.default_rng(1).normal(size=(7, 12))
    single = predict_trailer(rows, model, c=3)
    fused = predict_trailer(rows, model, c=3, fused_with=(rows, model))
    assert np.array_equal(single, fused)
    with pytest.raises(DimensionError):
        predict_trailer(rows, model, c=3, fused_with=(rows[:2], model))
    with pytest.raises(DimensionError):
        predict_trailer(rows[:, :10], model, c=3)
