"""Tests for experiment specs, feature preparation, runs and sweeps."""

import logging

import numpy as np
import pytest
import yaml

from trailersmith.errors import ConfigError
from trailersmith.experiment import (
    ExperimentSpec,
    _downsample_shots,
    input_frames,
    load_or_make_splits,
    memory_fraction,
    prepare_features,
    run_experiment,
    run_sweep,
    sweep_grid,
)
from trailersmith.features import read_features
from trailersmith.metrics import PredictionSet, micro_ap, read_predictions
from trailersmith.records import (
    SplitAssignment,
    read_boundary_file,
    read_manifest,
    read_split_file,
    write_split_file,
)
from trailersmith.segmenter import Shot
from trailersmith.settings import load_settings
from trailersmith.synth import SynthFeatureSpec, SynthVideoSpec, synth_features, write_synth_videos

TINY_MODEL = {"d": 8, "blocks": 1, "heads": 2, "dropout": 0.0}
TINY_TRAIN = {"epochs": 2, "batch_size": 8, "lr": 1e-3}


def _tiny_spec(**overrides) -> ExperimentSpec:
    values = dict(folds=[1], clips_per_snippet=5, feature_width=16, model=TINY_MODEL, train=TINY_TRAIN, seed=2)
    values.update(overrides)
    return ExperimentSpec(**values)


def test_spec_from_settings_applies_overrides():
    spec = ExperimentSpec.from_settings(load_settings(), strategy="Seq-32", fps=None)
    assert spec.strategy == "Seq-32"
    assert spec.fps == 24
    assert spec.clip_length == 32 and not spec.shot_aware
    assert spec.model["d"] == 128
    assert spec.aggregator_config(256).d == 128
    assert spec.train_config().clips_per_snippet == 30
    assert spec.detector_config().min_shot_length == 6
    assert spec.run_name() == "Seq-32_fps24_c30_transformer_single"


def test_spec_validation(caplog):
    with pytest.raises(ConfigError):
        ExperimentSpec(strategy="Shots-24")
    with pytest.raises(ConfigError):
        ExperimentSpec(folds=[0])
    # the CLI may have stopped propagation on the package logger
    package_logger = logging.getLogger("trailersmith")
    package_logger.addHandler(caplog.handler)
    try:
        with caplog.at_level(logging.WARNING, logger="trailersmith"):
            ExperimentSpec(fps=5, clips_per_snippet=100)
    finally:
        package_logger.removeHandler(caplog.handler)
    assert "Non-standard frame rate 5" in caplog.text
    assert "outside 5..60" in caplog.text
    assert ExperimentSpec(folds=[3, 1]).folds == [1, 3]


def test_cost_helpers():
    assert input_frames(30, 24) == 720
    assert memory_fraction(8) == pytest.approx(1 / 3)
    assert memory_fraction(24) == 1.0


def test_sweep_grid_is_a_product():
    specs = sweep_grid(_tiny_spec(), strategies=["Seq-24", "Shot-24"], clips=[5, 10], aggregators=["gru"])
    assert len(specs) == 4
    assert {(s.strategy, s.clips_per_snippet) for s in specs} == {
        ("Seq-24", 5), ("Seq-24", 10), ("Shot-24", 5), ("Shot-24", 10)}
    assert all(s.aggregator == "gru" and s.model == TINY_MODEL for s in specs)
    with pytest.raises(ConfigError):
        sweep_grid(_tiny_spec(), strategies=["bogus"])


def test_imported_shots_follow_kept_frames():
    shots = [Shot(0, 10), Shot(10, 11), Shot(11, 30)]
    # factor 3 keeps frames 0, 3, ..., 27; the one-frame shot at 10 keeps no frame
    assert _downsample_shots(shots, 3, 10) == [Shot(0, 4), Shot(4, 10)]
    assert _downsample_shots(shots, 1, 30) == shots


def test_split_file_must_hold_requested_folds(tmp_path, make_record):
    records = [make_record(f"t{i}", ["drama"]) for i in range(10)]
    path = tmp_path / "splits.csv"
    write_split_file(path, [SplitAssignment(fold=1, subsets={r.id: "train" for r in records})])
    assert load_or_make_splits(records, _tiny_spec(), path)[0].fold == 1
    with pytest.raises(ConfigError):
        load_or_make_splits(records, _tiny_spec(folds=[1, 2]), path)
    generated = load_or_make_splits(records, _tiny_spec(folds=[2]))
    assert [a.fold for a in generated] == [2]


def test_prepare_features_from_videos(tmp_path):
    manifest = write_synth_videos(tmp_path / "videos", 2, SynthVideoSpec(shots_max=4), seed=0)
    spec = _tiny_spec(strategy="Shot-24", fps=8)
    manifests = prepare_features(manifest, tmp_path / "prepared", spec)
    assert manifests == [tmp_path / "prepared" / "manifest.jsonl"]
    source = read_manifest(manifest)
    prepared = read_manifest(manifests[0])
    assert [r.id for r in prepared] == [r.id for r in source]
    assert prepared[0].fps == 8
    assert prepared[0].duration_frames == -(-source[0].duration_frames // 3)
    boundaries = read_boundary_file(tmp_path / "prepared" / "boundaries.csv")
    shots = boundaries[prepared[0].id]
    expected_clips = sum(-(-(end - start) // 24) for start, end in shots)
    features = read_features(tmp_path / "prepared" / prepared[0].feature_path)
    assert features.n_clips == expected_clips
    assert features.b == 16


def test_prepare_features_for_fusion_writes_two_streams(tmp_path):
    manifest = write_synth_videos(tmp_path / "videos", 1, SynthVideoSpec(shots_max=3), seed=1)
    manifests = prepare_features(manifest, tmp_path / "prepared", _tiny_spec(streams="fusion"),
                                 boundary_file=tmp_path / "videos" / "boundaries.csv")
    assert [m.parent.name for m in manifests] == ["stream1", "stream2"]
    first = read_features(manifests[0].parent / "features" / "v0000.dvtf")
    second = read_features(manifests[1].parent / "features" / "v0000.dvtf")
    assert first.backbone_id.startswith("stub-2d") and second.backbone_id.startswith("stub-3d")
    assert first.n_clips == second.n_clips


def test_run_experiment_is_reproducible(tmp_path):
    data = synth_features(tmp_path / "data", SynthFeatureSpec(n_trailers=30, b=16, clips_min=5, clips_max=10),
                          seed=0)
    spec = _tiny_spec()
    first = run_experiment(spec, data.manifests[0], tmp_path / "run1")
    second = run_experiment(spec, data.manifests[0], tmp_path / "run2")
    assert (tmp_path / "run1" / "report.yaml").read_bytes() == (tmp_path / "run2" / "report.yaml").read_bytes()
    assert first.metrics["micro_ap"].mean == second.metrics["micro_ap"].mean
    assert (tmp_path / "run1" / "splits.csv").exists()
    assert (tmp_path / "run1" / "fold1" / "model.toml").exists()


def test_fusion_run_needs_second_manifest(tmp_path):
    data = synth_features(tmp_path / "data", SynthFeatureSpec(n_trailers=20, b=16, clips_min=5, clips_max=8),
                          seed=0)
    with pytest.raises(ConfigError):
        run_experiment(_tiny_spec(streams="fusion"), data.manifests[0], tmp_path / "run")


@pytest.mark.slow
def test_sweep_over_synthesized_strategies(tmp_path):
    specs = sweep_grid(_tiny_spec(), strategies=["Seq-24", "Shot-24"], streams=["single", "fusion"])
    synth_spec = SynthFeatureSpec(n_trailers=30, b=16, clips_min=5, clips_max=10)
    reports = run_sweep(specs, tmp_path, synth_spec=synth_spec)
    assert len(reports) == 4
    summary = yaml.safe_load((tmp_path / "sweep_summary.yaml").read_text())
    assert set(summary) == {s.run_name() for s in specs}
    timing = (tmp_path / "sweep_timing.csv").read_text().splitlines()
    assert timing[0] == "run,seconds" and len(timing) == 5
    assert (tmp_path / "Shot-24_fps24_c5_transformer_fusion" / "stream2" / "fold1" / "model.dvtm").exists()
    assert (tmp_path / "data" / "Seq-24" / "stream2" / "manifest.jsonl").exists()


@pytest.mark.slow
def test_planted_signal_is_learned(tmp_path):
    data = synth_features(tmp_path / "data", SynthFeatureSpec(n_trailers=600, b=64, snr=2.0), seed=0)
    spec = ExperimentSpec(folds=[1], clips_per_snippet=10, feature_width=64, seed=0,
                          model={"d": 32, "dropout": 0.0},
                          train={"epochs": 50, "lr": 1e-3, "early_stop_patience": 10})
    report = run_experiment(spec, data.manifests[0], tmp_path / "run")
    assert report.metrics["micro_ap"].mean >= 90.0
    assert np.isfinite(report.metrics["macro_ap"].mean)


def _prior_micro_ap(records, split, predictions) -> float:
    """Micro AP of scoring every test trailer with the train subset's genre frequencies."""
    labels = {r.id: r.genres.to_vector() for r in records}
    prior = np.mean([labels[i] for i in split.ids("train")], axis=0)
    constant = PredictionSet(ids=predictions.ids, probabilities=np.tile(prior, (len(predictions.ids), 1)),
                             labels=predictions.labels)
    return micro_ap(constant)


@pytest.mark.slow
def test_shuffled_labels_fall_to_the_prior_baseline(tmp_path):
    data = synth_features(tmp_path / "data", SynthFeatureSpec(n_trailers=600, b=64, snr=2.0, shuffle_labels=True),
                          seed=0)
    spec = ExperimentSpec(folds=[1], clips_per_snippet=10, feature_width=64, seed=0,
                          model={"d": 32, "dropout": 0.0},
                          train={"epochs": 50, "lr": 1e-3, "early_stop_patience": 10})
    report = run_experiment(spec, data.manifests[0], tmp_path / "run")
    split = read_split_file(tmp_path / "run" / "splits.csv")[0]
    predictions = read_predictions(tmp_path / "run" / "predictions_fold1.csv")
    baseline = _prior_micro_ap(data.records, split, predictions)
    assert abs(report.metrics["micro_ap"].mean / 100 - baseline) <= 0.05


@pytest.mark.slow
def test_shot_clips_beat_sequential_clips_on_planted_shots(tmp_path):
    scores = {"Shot-24": [], "Seq-24": []}
    for seed in range(5):
        for strategy in scores:
            synth_spec = SynthFeatureSpec(n_trailers=150, b=16, clips_min=6, clips_max=12, snr=0.4,
                                          strategy=strategy)
            data = synth_features(tmp_path / f"{strategy}-{seed}" / "data", synth_spec, seed=seed)
            spec = _tiny_spec(strategy=strategy, seed=seed, train={"epochs": 15, "batch_size": 16, "lr": 1e-3})
            report = run_experiment(spec, data.manifests[0], tmp_path / f"{strategy}-{seed}" / "run")
            scores[strategy].append(report.metrics["micro_ap"].mean)
    assert np.mean(scores["Shot-24"]) >= np.mean(scores["Seq-24"])
