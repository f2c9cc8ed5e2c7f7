"""
Experiment orchestration: features -> splits -> per-fold training -> evaluation.

A run directory holds `splits.csv`, one `fold<k>/` per fold (checkpoint, model
config, training log) or `stream1/` and `stream2/` for two-stream runs, the
per-fold predictions and PR curves and `report.yaml`. Every random choice is
drawn from `derive_seed(spec.seed, ...)`, so reruns are byte-identical.
"""

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from trailersmith.aggregator import AggregatorConfig, AggregatorModel
from trailersmith.errors import ConfigError, StorageError, handle_errors
from trailersmith.features import StubFeaturizer, write_features
from trailersmith.metrics import (
    EvalReport,
    PredictionSet,
    evaluate_folds,
    predict_trailer,
    write_pr_curves,
    write_predictions,
    write_report,
)
from trailersmith.records import (
    SplitAssignment,
    TrailerRecord,
    read_boundary_file,
    read_manifest,
    read_split_file,
    resolve_path,
    write_boundary_file,
    write_manifest,
    write_split_file,
)
from trailersmith.segmenter import (
    DetectorConfig,
    Shot,
    build_clip_sequence,
    detect_shots,
    downsample_factor,
    downsample_fps,
    import_boundaries,
    seq_partition,
)
from trailersmith.settings import TrailersmithSettings, derive_seed
from trailersmith.splitter import make_folds
from trailersmith.synth import SynthFeatureSpec, parse_strategy, synth_features
from trailersmith.trainer import FeatureDataset, TrainConfig, fit

logger = logging.getLogger("trailersmith.experiment")

STANDARD_STRATEGIES = ("Seq-24", "Seq-32", "Shot-24", "Shot-32")
STANDARD_FPS = (4, 6, 8, 12, 24)
STANDARD_CLIPS = (5, 60)
REFERENCE_FPS = 24


class ExperimentSpec(BaseModel):
    """One cell of an experiment grid."""
    model_config = ConfigDict(frozen=True, extra="forbid", protected_namespaces=())

    strategy: str = "Shot-24"
    fps: int = Field(default=24, ge=1)
    clips_per_snippet: int = Field(default=30, ge=1)
    aggregator: Literal["transformer", "gru", "conv"] = "transformer"
    streams: Literal["single", "fusion"] = "single"
    seed: int = 0
    folds: List[int] = Field(default_factory=lambda: [1, 2, 3])
    workers: int = Field(default=1, ge=1)
    feature_width: int = Field(default=256, ge=2)
    model: Dict[str, object] = Field(default_factory=dict)
    train: Dict[str, object] = Field(default_factory=dict)
    detector: Dict[str, object] = Field(default_factory=dict)

    @field_validator("strategy")
    @classmethod
    def _check_strategy(cls, value: str) -> str:
        parse_strategy(value)
        if value not in STANDARD_STRATEGIES:
            logger.warning(f"Non-standard strategy {value}")
        return value

    @field_validator("fps")
    @classmethod
    def _check_fps(cls, value: int) -> int:
        if value not in STANDARD_FPS:
            logger.warning(f"Non-standard frame rate {value}")
        return value

    @field_validator("clips_per_snippet")
    @classmethod
    def _check_clips(cls, value: int) -> int:
        if not STANDARD_CLIPS[0] <= value <= STANDARD_CLIPS[1]:
            logger.warning(f"clips_per_snippet {value} is outside {STANDARD_CLIPS[0]}..{STANDARD_CLIPS[1]}")
        return value

    @field_validator("folds")
    @classmethod
    def _check_folds(cls, value: List[int]) -> List[int]:
        if not value or min(value) < 1 or len(set(value)) != len(value):
            raise ConfigError("Folds must be distinct positive integers", {"folds": value})
        return sorted(value)

    @classmethod
    def from_settings(cls, settings: TrailersmithSettings, **overrides) -> "ExperimentSpec":
        model = settings.model.model_dump()
        aggregator = model.pop("aggregator")
        values = dict(
            strategy=settings.experiment.strategy,
            fps=settings.experiment.fps,
            clips_per_snippet=settings.snippets.clips_per_snippet,
            aggregator=aggregator,
            streams=settings.experiment.streams,
            seed=settings.experiment.seed,
            folds=list(settings.experiment.folds),
            workers=settings.experiment.workers,
            feature_width=settings.segmenter.feature_width,
            model=model,
            train=settings.train.model_dump(),
            detector=settings.segmenter.model_dump(exclude={"feature_width"}),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def clip_length(self) -> int:
        return parse_strategy(self.strategy)[1]

    @property
    def shot_aware(self) -> bool:
        return parse_strategy(self.strategy)[0] == "Shot"

    @property
    def stream_count(self) -> int:
        return 2 if self.streams == "fusion" else 1

    def aggregator_config(self, b: int) -> AggregatorConfig:
        return AggregatorConfig(kind=self.aggregator, b=b, **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(clips_per_snippet=self.clips_per_snippet, strategy=self.strategy,
                           seed=self.seed, **self.train)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(**self.detector)

    def run_name(self) -> str:
        return f"{self.strategy}_fps{self.fps}_c{self.clips_per_snippet}_{self.aggregator}_{self.streams}"


def input_frames(clips_per_snippet: int, f: int) -> int:
    """Frames in one snippet's input tensor."""
    return clips_per_snippet * f


def memory_fraction(fps: int, reference_fps: int = REFERENCE_FPS) -> float:
    """Input-tensor size relative to sampling at the reference frame rate."""
    return fps / reference_fps


# Features

def _downsample_shots(shots: Sequence[Shot], factor: int, n_frames: int) -> List[Shot]:
    """Map source-rate shots onto kept frames; shots that lose every frame disappear."""
    starts = sorted({math.ceil(shot.start_frame / factor) for shot in shots})
    starts = [s for s in starts if s < n_frames]
    edges = starts + [n_frames]
    return [Shot(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _featurizers(spec: ExperimentSpec) -> List[StubFeaturizer]:
    modes = ["3d"] if spec.streams == "single" else ["2d", "3d"]
    return [StubFeaturizer(spec.feature_width, mode=mode, bins=spec.detector_config().bins,
                           seed=derive_seed(spec.seed, "featurizer", mode)) for mode in modes]


def _prepare_one(record: TrailerRecord, manifest_path: Path, spec: ExperimentSpec,
                 boundaries: Optional[Dict[str, List[Tuple[int, int]]]],
                 featurizers: Sequence[StubFeaturizer], out_dirs: Sequence[Path]) -> Tuple[List[Shot], int]:
    if record.video_path is None:
        raise ConfigError(f"Trailer '{record.id}' has neither features nor a video")
    frames = np.load(resolve_path(manifest_path, record.video_path), allow_pickle=False)
    factor = downsample_factor(record.fps, spec.fps)
    frames = downsample_fps(frames, record.fps, spec.fps)
    if boundaries is not None:
        source_shots = import_boundaries(boundaries, record.id)
        shots = _downsample_shots(source_shots, factor, len(frames))
    else:
        shots = detect_shots(frames, spec.detector_config())
    f = spec.clip_length
    clips = build_clip_sequence(frames, shots, f) if spec.shot_aware else seq_partition(frames, f)
    for featurizer, out_dir in zip(featurizers, out_dirs):
        write_features(out_dir / "features" / f"{record.id}.dvtf", featurizer.featurize(clips))
    return shots, len(frames)


def prepare_features(manifest_path: Union[str, Path], out_dir: Union[str, Path], spec: ExperimentSpec,
                     boundary_file: Optional[Union[str, Path]] = None) -> List[Path]:
    """
    Segment and featurize every video of a manifest.

    Writes one feature manifest per stream (stub-3d, or stub-2d then stub-3d for fusion)
    plus `boundaries.csv` with the shots at the target frame rate. Returns the manifests.
    """
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    records = read_manifest(manifest_path)
    if not records:
        raise ConfigError(f"Manifest {manifest_path} is empty")
    boundaries = read_boundary_file(boundary_file) if boundary_file is not None else None
    featurizers = _featurizers(spec)
    out_dirs = [out_dir] if len(featurizers) == 1 else [out_dir / "stream1", out_dir / "stream2"]

    with ThreadPoolExecutor(max_workers=spec.workers) as executor:
        results = list(executor.map(
            lambda r: _prepare_one(r, manifest_path, spec, boundaries, featurizers, out_dirs), records))

    write_boundary_file(out_dir / "boundaries.csv", {r.id: shots for r, (shots, _) in zip(records, results)})
    manifests = []
    for stream_dir in out_dirs:
        stream_records = [
            TrailerRecord(id=r.id, feature_path=f"features/{r.id}.dvtf", genres=r.genres, fps=spec.fps,
                          duration_frames=n_frames)
            for r, (_, n_frames) in zip(records, results)
        ]
        write_manifest(stream_dir / "manifest.jsonl", stream_records)
        manifests.append(stream_dir / "manifest.jsonl")
    logger.info(f"Prepared {len(records)} trailers with {spec.strategy} at {spec.fps} fps")
    return manifests


def has_features(records: Sequence[TrailerRecord]) -> bool:
    return all(r.feature_path is not None for r in records)


# Splits, training and evaluation

def load_or_make_splits(records: Sequence[TrailerRecord], spec: ExperimentSpec,
                        split_file: Optional[Union[str, Path]] = None) -> List[SplitAssignment]:
    """Folds from a split file, or SOIS folds seeded by derive_seed(seed, 'split')."""
    if split_file is not None:
        folds = {a.fold: a for a in read_split_file(split_file)}
        missing = [k for k in spec.folds if k not in folds]
        if missing:
            raise ConfigError(f"Split file has no fold {missing[0]}", {"path": str(split_file)})
        return [folds[k] for k in spec.folds]
    generated = make_folds([r.genres for r in records], n_folds=max(spec.folds),
                           seed=derive_seed(spec.seed, "split"), ids=[r.id for r in records])
    return [a for a in generated if a.fold in spec.folds]


def stream_dirs(run_dir: Path, spec: ExperimentSpec) -> List[Path]:
    if spec.stream_count == 1:
        return [run_dir]
    return [run_dir / f"stream{s}" for s in range(1, spec.stream_count + 1)]


def train_folds(dataset: FeatureDataset, splits: Sequence[SplitAssignment], spec: ExperimentSpec,
                run_dir: Union[str, Path], stream: int = 1) -> Dict[int, AggregatorModel]:
    """Train one model per fold; folds run concurrently on `spec.workers` threads."""
    run_dir = Path(run_dir)
    config = spec.aggregator_config(dataset.b)
    train_config = spec.train_config()

    def run(split: SplitAssignment) -> AggregatorModel:
        fold_dir = run_dir / f"fold{split.fold}"
        model = AggregatorModel(config, seed=derive_seed(spec.seed, "model", split.fold, stream))
        rng = np.random.default_rng(derive_seed(spec.seed, "train", split.fold, stream))
        result = fit(dataset, split, model, train_config, rng=rng, log_path=fold_dir / "train_log.jsonl")
        result.model.save(fold_dir / "model.dvtm")
        logger.info(f"fold {split.fold}: best epoch {result.best_epoch}, val loss {result.best_val_loss:.4f}")
        return result.model

    with ThreadPoolExecutor(max_workers=spec.workers) as executor:
        models = list(executor.map(run, splits))
    return {split.fold: model for split, model in zip(splits, models)}


def load_fold_models(run_dir: Union[str, Path], folds: Sequence[int]) -> Dict[int, AggregatorModel]:
    run_dir = Path(run_dir)
    models = {}
    for k in folds:
        path = run_dir / f"fold{k}" / "model.dvtm"
        if not path.exists():
            raise ConfigError(f"No trained model for fold {k}; run `trailersmith train` first", {"path": str(path)})
        models[k] = AggregatorModel.load(path)
    return models


def predict_fold(datasets: Sequence[FeatureDataset], models: Sequence[AggregatorModel],
                 split: SplitAssignment, c: int) -> PredictionSet:
    """Snippet-averaged test predictions; two datasets/models are late-fused."""
    primary = datasets[0]
    ids = [i for i in split.ids("test") if i in primary.rows]
    if not ids:
        raise ConfigError("Test subset is empty", {"fold": split.fold})
    probabilities = []
    for trailer_id in ids:
        fused = (datasets[1].rows[trailer_id], models[1]) if len(models) > 1 else None
        probabilities.append(predict_trailer(primary.rows[trailer_id], models[0], c, fused_with=fused))
    return PredictionSet(ids=ids, probabilities=np.stack(probabilities),
                         labels=np.stack([primary.labels[i].to_vector() for i in ids]))


def evaluate_run(datasets: Sequence[FeatureDataset], splits: Sequence[SplitAssignment],
                 fold_models: Sequence[Dict[int, AggregatorModel]], spec: ExperimentSpec,
                 out_dir: Union[str, Path]) -> EvalReport:
    """Write predictions_fold<k>.csv, pr_curves_fold<k>.csv and report.yaml."""
    out_dir = Path(out_dir)
    per_fold = []
    for split in splits:
        predictions = predict_fold(datasets, [models[split.fold] for models in fold_models], split,
                                   spec.clips_per_snippet)
        write_predictions(out_dir / f"predictions_fold{split.fold}.csv", predictions)
        write_pr_curves(out_dir / f"pr_curves_fold{split.fold}.csv", predictions)
        per_fold.append(predictions)
    report = evaluate_folds(per_fold, meta=report_meta(spec, fold_models))
    write_report(out_dir / "report.yaml", report)
    return report


def report_meta(spec: ExperimentSpec, fold_models: Sequence[Dict[int, AggregatorModel]]) -> Dict[str, object]:
    any_model = next(iter(fold_models[0].values()))
    return {
        "strategy": spec.strategy,
        "fps": spec.fps,
        "clips_per_snippet": spec.clips_per_snippet,
        "aggregator": spec.aggregator,
        "streams": spec.streams,
        "seed": spec.seed,
        "folds": list(spec.folds),
        "parameter_count": sum(next(iter(m.values())).parameter_count() for m in fold_models),
        "snippet_width": any_model.config.snippet_width,
        "input_frames": input_frames(spec.clips_per_snippet, spec.clip_length),
        "memory_fraction": round(memory_fraction(spec.fps), 4),
    }


def load_datasets(manifests: Sequence[Union[str, Path]], workers: int = 1) -> List[FeatureDataset]:
    datasets = []
    for manifest in manifests:
        records = read_manifest(manifest)
        if not records:
            raise ConfigError(f"Manifest {manifest} is empty")
        datasets.append(FeatureDataset.from_records(records, manifest, workers=workers))
    if len(datasets) > 1 and set(datasets[0].ids) != set(datasets[1].ids):
        raise ConfigError("Fusion manifests cover different trailers")
    return datasets


def run_experiment(spec: ExperimentSpec, manifest: Union[str, Path], out_dir: Union[str, Path],
                   second_manifest: Optional[Union[str, Path]] = None,
                   split_file: Optional[Union[str, Path]] = None,
                   boundary_file: Optional[Union[str, Path]] = None) -> EvalReport:
    """Segment/featurize when needed, split, train every fold and stream, evaluate."""
    out_dir = Path(out_dir)
    records = read_manifest(manifest)
    if not records:
        raise ConfigError(f"Manifest {manifest} is empty")

    if has_features(records):
        manifests = [Path(manifest)]
        if spec.stream_count == 2:
            if second_manifest is None:
                raise ConfigError("Fusion over feature files needs a second manifest (--manifest2)")
            manifests.append(Path(second_manifest))
    else:
        manifests = prepare_features(manifest, out_dir / "features", spec, boundary_file)

    splits = load_or_make_splits(records, spec, split_file)
    write_split_file(out_dir / "splits.csv", splits)
    datasets = load_datasets(manifests, spec.workers)
    fold_models = [
        train_folds(dataset, splits, spec, directory, stream=s)
        for s, (dataset, directory) in enumerate(zip(datasets, stream_dirs(out_dir, spec)), start=1)
    ]
    return evaluate_run(datasets, splits, fold_models, spec, out_dir)


# Sweeps

def sweep_grid(base: ExperimentSpec, strategies: Sequence[str] = (), fps: Sequence[int] = (),
               clips: Sequence[int] = (), aggregators: Sequence[str] = (),
               streams: Sequence[str] = ()) -> List[ExperimentSpec]:
    """Cartesian product over the given axes; an empty axis keeps the base value."""
    axes = [
        list(strategies) or [base.strategy],
        list(fps) or [base.fps],
        list(clips) or [base.clips_per_snippet],
        list(aggregators) or [base.aggregator],
        list(streams) or [base.streams],
    ]
    values = base.model_dump()
    return [
        ExperimentSpec(**{**values, "strategy": s, "fps": r, "clips_per_snippet": c, "aggregator": a, "streams": m})
        for s, r, c, a, m in itertools.product(*axes)
    ]


def run_sweep(specs: Sequence[ExperimentSpec], out_dir: Union[str, Path],
              manifest: Optional[Union[str, Path]] = None,
              second_manifest: Optional[Union[str, Path]] = None,
              synth_spec: Optional[SynthFeatureSpec] = None,
              split_file: Optional[Union[str, Path]] = None) -> Dict[str, EvalReport]:
    """
    Run every grid cell under `<out>/<run name>/`.

    Without a manifest, planted-signal features are synthesized once per strategy
    (boundary-straddling clips carry noise) under `<out>/data/<strategy>/`.
    Wall-clock timings go to `sweep_timing.csv`, kept apart from the deterministic reports.
    """
    out_dir = Path(out_dir)
    if manifest is None and synth_spec is None:
        raise ConfigError("A sweep needs a manifest or a synthetic feature spec")
    reports: Dict[str, EvalReport] = {}
    timings: List[Tuple[str, float]] = []
    for spec in specs:
        if manifest is None:
            data_dir = out_dir / "data" / spec.strategy
            if not (data_dir / "manifest.jsonl").exists():
                synth_features(data_dir, synth_spec.model_copy(update={"strategy": spec.strategy,
                                                                       "two_streams": True}),
                               seed=derive_seed(spec.seed, "synth"))
            run_manifest, run_second = data_dir / "manifest.jsonl", data_dir / "stream2" / "manifest.jsonl"
        else:
            run_manifest, run_second = manifest, second_manifest
        name = spec.run_name()
        started = time.perf_counter()
        logger.info(f"Sweep run {name}")
        reports[name] = run_experiment(spec, run_manifest, out_dir / name, second_manifest=run_second,
                                       split_file=split_file)
        timings.append((name, time.perf_counter() - started))
    write_sweep_summary(out_dir / "sweep_summary.yaml", reports)
    _write_timings(out_dir / "sweep_timing.csv", timings)
    return reports


@handle_errors(error_type=StorageError)
def write_sweep_summary(path: Path, reports: Dict[str, EvalReport]) -> None:
    summary = {
        name: {metric: s.rounded(per_fold=False) for metric, s in report.metrics.items()}
        for name, report in reports.items()
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(summary, sort_keys=False), encoding="utf-8")


@handle_errors(error_type=StorageError)
def _write_timings(path: Path, timings: Sequence[Tuple[str, float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run", "seconds"])
        for name, seconds in timings:
            writer.writerow([name, f"{seconds:.3f}"])
