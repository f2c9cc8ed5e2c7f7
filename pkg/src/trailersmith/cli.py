"""Command-line interface"""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from trailersmith.errors import EXIT_VALIDATION, TrailersmithError, exit_code_for
from trailersmith.experiment import (
    ExperimentSpec,
    evaluate_run,
    load_datasets,
    load_fold_models,
    load_or_make_splits,
    prepare_features,
    run_experiment,
    run_sweep,
    sweep_grid,
    train_folds,
)
from trailersmith.genres import GENRES
from trailersmith.metrics import EvalReport, read_report
from trailersmith.records import read_boundary_file, read_manifest, read_split_file, write_split_file
from trailersmith.settings import DEFAULT_CONFIG_NAME, TrailersmithSettings, create_default_config, load_settings
from trailersmith.splitter import genre_stats, statistics_report, write_cooccurrence_csv, write_statistics
from trailersmith.synth import SynthFeatureSpec, SynthVideoSpec, synth_features, write_synth_videos
from trailersmith.version import __version__ as VERSION

console = Console()
logger = logging.getLogger("trailersmith")

METRIC_LABELS = (("micro_ap", "μAP"), ("macro_ap", "mAP"), ("weighted_ap", "wAP"), ("sample_ap", "sAP"))


def _configure_logging(verbose: bool) -> None:
    handler = RichHandler(console=console, show_path=False, show_time=False)
    logger.handlers = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False


def reports_errors(func: Callable) -> Callable:
    """Print domain errors and exit with their exit code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (TrailersmithError, OSError, FloatingPointError, ValueError) as e:
            console.print(f"[red]Error:[/red] {e}")
            sys.exit(exit_code_for(e))
    return wrapper


def _settings(ctx: click.Context, cli_options: Optional[Dict[str, Any]] = None) -> TrailersmithSettings:
    return load_settings(ctx.obj.get("config"), cli_options or {})


def _int_list(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{value}'")


def experiment_options(func: Callable) -> Callable:
    """Flags mirroring ExperimentSpec; unset flags fall back to the config file."""
    options = [
        click.option("--strategy", help="Clip strategy, e.g. Shot-24, Seq-32"),
        click.option("--fps", type=int, help="Frame rate the video is sampled at"),
        click.option("-c", "--clips-per-snippet", type=int, help="Clips per snippet"),
        click.option("--aggregator", type=click.Choice(["transformer", "gru", "conv"]), help="Clip aggregator"),
        click.option("--streams", type=click.Choice(["single", "fusion"]), help="One stream or late fusion of two"),
        click.option("--seed", type=int, help="Top-level random seed"),
        click.option("--folds", help="Comma-separated fold ids, e.g. 1,2,3"),
        click.option("--workers", type=int, help="Worker threads"),
        click.option("--epochs", type=int, help="Maximum training epochs"),
        click.option("--lr", type=float, help="Initial learning rate"),
        click.option("--batch-size", type=int, help="Training batch size"),
        click.option("--d", "reduced_width", type=int, help="Reduced clip width d"),
        click.option("--dropout", type=float, help="Dropout rate"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _spec(ctx: click.Context, flags: Dict[str, Any]) -> ExperimentSpec:
    cli_options = {
        "experiment.strategy": flags.get("strategy"),
        "experiment.fps": flags.get("fps"),
        "snippets.clips_per_snippet": flags.get("clips_per_snippet"),
        "model.aggregator": flags.get("aggregator"),
        "experiment.streams": flags.get("streams"),
        "experiment.seed": flags.get("seed"),
        "experiment.folds": _int_list(flags.get("folds")),
        "experiment.workers": flags.get("workers"),
        "train.epochs": flags.get("epochs"),
        "train.lr": flags.get("lr"),
        "train.batch_size": flags.get("batch_size"),
        "model.d": flags.get("reduced_width"),
        "model.dropout": flags.get("dropout"),
    }
    return ExperimentSpec.from_settings(_settings(ctx, cli_options))


def _report_table(reports: Dict[str, EvalReport]) -> Table:
    table = Table(title="Evaluation (mean ± std over folds, ×100)")
    table.add_column("run")
    for _, label in METRIC_LABELS:
        table.add_column(label, justify="right")
    for name, report in reports.items():
        cells = []
        for key, _ in METRIC_LABELS:
            summary = report.metrics.get(key)
            defined = summary is not None and summary.mean is not None
            cells.append(f"{summary.mean:.2f} ± {summary.std:.2f}" if defined else "-")
        table.add_row(name, *cells)
    return table


@click.group()
@click.version_option(VERSION, prog_name="trailersmith")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file")
@click.option("--verbose", is_flag=True, help="Enable debug logging")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], verbose: bool) -> None:
    """Multi-label movie trailer genre classification from clip features."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path
    ctx.obj["verbose"] = verbose
    _configure_logging(verbose)


@cli.command()
@click.argument("path", type=click.Path(dir_okay=False), default=DEFAULT_CONFIG_NAME)
@click.option("--force", is_flag=True, help="Overwrite an existing file")
@reports_errors
def init(path: str, force: bool) -> None:
    """Write a config file with every default setting."""
    if Path(path).exists() and not force:
        console.print(f"[yellow]{path} already exists; use --force to overwrite[/yellow]")
        sys.exit(EXIT_VALIDATION)
    create_default_config(Path(path))
    console.print(f"[green]Created default config at[/green] {path}")


@cli.group()
def synth() -> None:
    """Generate synthetic videos or clip features with known ground truth."""


@synth.command(name="video")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--n", "n_videos", type=int, help="Number of videos")
@click.option("--seed", type=int, help="Random seed")
@click.pass_context
@reports_errors
def synth_video_command(ctx: click.Context, out: str, n_videos: Optional[int], seed: Optional[int]) -> None:
    """Videos with planted shots, a manifest and the ground-truth boundary file."""
    settings = _settings(ctx, {"synth.video.n_videos": n_videos, "experiment.seed": seed})
    video = settings.synth.video.model_dump()
    count = video.pop("n_videos")
    with console.status("[bold green]Rendering videos..."):
        manifest = write_synth_videos(out, count, SynthVideoSpec(**video), seed=settings.experiment.seed)
    console.print(Panel.fit(f"{count} videos\nmanifest: {manifest}\nboundaries: {Path(out) / 'boundaries.csv'}",
                            title="Synthetic videos"))


@synth.command(name="features")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--n", "n_trailers", type=int, help="Number of trailers")
@click.option("--b", type=int, help="Feature width")
@click.option("--snr", type=float, help="Signal-to-noise ratio (noise sigma = 1/snr)")
@click.option("--strategy", help="Plant latent shots and clip them with this strategy")
@click.option("--two-streams", is_flag=True, help="Also write a second stream")
@click.option("--shuffle-labels", is_flag=True, help="Shuffle labels across trailers")
@click.option("--seed", type=int, help="Random seed")
@click.pass_context
@reports_errors
def synth_features_command(ctx: click.Context, out: str, n_trailers: Optional[int], b: Optional[int],
                           snr: Optional[float], strategy: Optional[str], two_streams: bool,
                           shuffle_labels: bool, seed: Optional[int]) -> None:
    """Clip feature files with a planted genre signal."""
    settings = _settings(ctx, {
        "synth.features.n_trailers": n_trailers,
        "synth.features.b": b,
        "synth.features.snr": snr,
        "synth.features.strategy": strategy,
        "synth.features.two_streams": two_streams or None,
        "synth.features.shuffle_labels": shuffle_labels or None,
        "experiment.seed": seed,
    })
    spec = SynthFeatureSpec(**settings.synth.features.model_dump())
    with console.status("[bold green]Writing feature files..."):
        result = synth_features(out, spec, seed=settings.experiment.seed)
    console.print(Panel.fit("\n".join(str(m) for m in result.manifests),
                            title=f"{spec.n_trailers} synthetic trailers"))


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True, help="Video manifest")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--boundaries", type=click.Path(exists=True, dir_okay=False),
              help="Import shot boundaries instead of detecting them")
@experiment_options
@click.pass_context
@reports_errors
def segment(ctx: click.Context, manifest: str, out: str, boundaries: Optional[str], **flags) -> None:
    """Detect shots, build clips and write feature files."""
    spec = _spec(ctx, flags)
    with console.status(f"[bold green]Segmenting with {spec.strategy} at {spec.fps} fps..."):
        manifests = prepare_features(manifest, out, spec, boundaries)
    console.print(Panel.fit("\n".join(str(m) for m in manifests), title="Feature manifests"))


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Split file to write")
@click.option("--seed", type=int, help="Top-level random seed")
@click.option("--folds", help="Comma-separated fold ids")
@click.pass_context
@reports_errors
def split(ctx: click.Context, manifest: str, out: str, seed: Optional[int], folds: Optional[str]) -> None:
    """Stratified 70/10/20 folds."""
    spec = _spec(ctx, {"seed": seed, "folds": folds})
    records = read_manifest(manifest)
    assignments = load_or_make_splits(records, spec)
    write_split_file(out, assignments)
    table = Table(title="Subset sizes")
    for column in ("fold", "train", "val", "test"):
        table.add_column(column, justify="right")
    for assignment in assignments:
        sizes = assignment.sizes()
        table.add_row(str(assignment.fold), str(sizes["train"]), str(sizes["val"]), str(sizes["test"]))
    console.print(table)


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split file to check")
@click.option("--shots", type=click.Path(exists=True, dir_okay=False), help="Boundary file for shot lengths")
@click.option("--out", type=click.Path(file_okay=False), help="Write statistics.yaml and cooccurrence.csv here")
@reports_errors
def stats(manifest: str, splits: Optional[str], shots: Optional[str], out: Optional[str]) -> None:
    """Label cardinality, genre distribution, co-occurrence and shot lengths."""
    records = read_manifest(manifest)
    folds = read_split_file(splits) if splits else []
    shot_lengths = None
    if shots:
        shot_lengths = [end - start for rows in read_boundary_file(shots).values() for start, end in rows]
    report = statistics_report(records, folds, shot_lengths)

    table = Table(title=f"{report['examples']} trailers")
    table.add_column("genre")
    table.add_column("count", justify="right")
    table.add_column("share", justify="right")
    for genre in GENRES:
        row = report["genres"][genre]
        table.add_row(genre, str(row["count"]), f"{row['proportion']:.3f}")
    console.print(table)
    console.print(f"cardinality {report['label_cardinality']:.3f}, density {report['label_density']:.3f}")
    if "shot_lengths" in report:
        lengths = report["shot_lengths"]
        console.print(f"shot length mode {lengths['mode']}, mean {lengths['mean']:.1f}, median {lengths['median']}")
    for name, fold in report.get("folds", {}).items():
        console.print(f"{name}: {fold['sizes']} max deviation {fold['max_deviation_pp']:.2f} pp")

    if out:
        write_statistics(Path(out) / "statistics.yaml", report)
        write_cooccurrence_csv(Path(out) / "cooccurrence.csv", genre_stats([r.genres for r in records]))
        console.print(f"[green]Statistics written to[/green] {out}")


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True, help="Feature manifest")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory")
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split file (default: generated)")
@click.option("--stream", type=int, default=1, show_default=True, help="Stream number, seeds the model")
@experiment_options
@click.pass_context
@reports_errors
def train(ctx: click.Context, manifest: str, out: str, splits: Optional[str], stream: int, **flags) -> None:
    """Train one model per fold."""
    spec = _spec(ctx, flags)
    records = read_manifest(manifest)
    assignments = load_or_make_splits(records, spec, splits)
    write_split_file(Path(out) / "splits.csv", assignments)
    dataset = load_datasets([manifest], spec.workers)[0]
    with console.status(f"[bold green]Training {len(assignments)} fold(s)..."):
        models = train_folds(dataset, assignments, spec, out, stream=stream)
    console.print(Panel.fit(
        "\n".join(f"fold {k}: {Path(out) / f'fold{k}' / 'model.dvtm'}" for k in models),
        title=f"{spec.aggregator}, {next(iter(models.values())).parameter_count()} parameters"))


def _run_splits(run: str, records, spec: ExperimentSpec, splits: Optional[str]):
    if splits is None and (Path(run) / "splits.csv").exists():
        splits = str(Path(run) / "splits.csv")
    return load_or_make_splits(records, spec, splits)


@cli.command(name="eval")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True, help="Feature manifest")
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Run directory written by `train`")
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split file (default: run/splits.csv)")
@click.option("--out", type=click.Path(file_okay=False), help="Report directory (default: the run directory)")
@experiment_options
@click.pass_context
@reports_errors
def evaluate(ctx: click.Context, manifest: str, run_dir: str, splits: Optional[str], out: Optional[str],
             **flags) -> None:
    """Snippet-averaged test predictions and the AP report."""
    spec = _spec(ctx, {**flags, "streams": "single"})
    records = read_manifest(manifest)
    assignments = _run_splits(run_dir, records, spec, splits)
    datasets = load_datasets([manifest], spec.workers)
    models = load_fold_models(run_dir, [a.fold for a in assignments])
    report = evaluate_run(datasets, assignments, [models], spec, out or run_dir)
    console.print(_report_table({Path(run_dir).name: report}))


@cli.command(name="fuse-eval")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest2", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--run2", "run_dir2", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split file (default: run/splits.csv)")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Report directory")
@experiment_options
@click.pass_context
@reports_errors
def fuse_eval(ctx: click.Context, manifest: str, manifest2: str, run_dir: str, run_dir2: str,
              splits: Optional[str], out: str, **flags) -> None:
    """Late fusion of two trained streams: logits averaged before the sigmoid."""
    spec = _spec(ctx, {**flags, "streams": "fusion"})
    records = read_manifest(manifest)
    assignments = _run_splits(run_dir, records, spec, splits)
    datasets = load_datasets([manifest, manifest2], spec.workers)
    folds = [a.fold for a in assignments]
    report = evaluate_run(datasets, assignments,
                          [load_fold_models(run_dir, folds), load_fold_models(run_dir2, folds)], spec, out)
    console.print(_report_table({"fusion": report}))


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--manifest2", type=click.Path(exists=True, dir_okay=False), help="Second-stream feature manifest")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Run directory")
@click.option("--splits", type=click.Path(exists=True, dir_okay=False), help="Split file (default: generated)")
@click.option("--boundaries", type=click.Path(exists=True, dir_okay=False), help="Import shot boundaries")
@experiment_options
@click.pass_context
@reports_errors
def run(ctx: click.Context, manifest: str, manifest2: Optional[str], out: str, splits: Optional[str],
        boundaries: Optional[str], **flags) -> None:
    """Whole pipeline: segment (for videos), split, train and evaluate."""
    spec = _spec(ctx, flags)
    with console.status(f"[bold green]Running {spec.run_name()}..."):
        report = run_experiment(spec, manifest, out, second_manifest=manifest2, split_file=splits,
                                boundary_file=boundaries)
    console.print(_report_table({spec.run_name(): report}))


@cli.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              help="Manifest to sweep over (default: synthesize features per strategy)")
@click.option("--manifest2", type=click.Path(exists=True, dir_okay=False), help="Second-stream manifest")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--splits", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid-strategies", help="Comma-separated strategies, e.g. Seq-24,Shot-24")
@click.option("--grid-fps", help="Comma-separated frame rates")
@click.option("--grid-clips", help="Comma-separated clips per snippet")
@click.option("--grid-aggregators", help="Comma-separated aggregators")
@click.option("--grid-streams", help="Comma-separated stream modes")
@experiment_options
@click.pass_context
@reports_errors
def sweep(ctx: click.Context, manifest: Optional[str], manifest2: Optional[str], out: str, splits: Optional[str],
          grid_strategies: Optional[str], grid_fps: Optional[str], grid_clips: Optional[str],
          grid_aggregators: Optional[str], grid_streams: Optional[str], **flags) -> None:
    """Run the product of the given grids; one run directory per cell."""
    base = _spec(ctx, flags)
    specs = sweep_grid(
        base,
        strategies=_str_list(grid_strategies),
        fps=_int_list(grid_fps) or [],
        clips=_int_list(grid_clips) or [],
        aggregators=_str_list(grid_aggregators),
        streams=_str_list(grid_streams),
    )
    synth_spec = None
    if manifest is None:
        synth_spec = SynthFeatureSpec(**_settings(ctx).synth.features.model_dump())
    with console.status(f"[bold green]Sweeping {len(specs)} run(s)..."):
        reports = run_sweep(specs, out, manifest=manifest, second_manifest=manifest2, synth_spec=synth_spec,
                            split_file=splits)
    console.print(_report_table(reports))


def _str_list(value: Optional[str]) -> Sequence[str]:
    return [part.strip() for part in value.split(",") if part.strip()] if value else []


@cli.command()
@click.argument("reports", nargs=-1, type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--genres", is_flag=True, help="Also show per-genre AP")
@reports_errors
def report(reports: Sequence[str], genres: bool) -> None:
    """Render report.yaml files side by side."""
    loaded = {str(Path(path).parent.name or path): read_report(path) for path in reports}
    console.print(_report_table(loaded))
    if genres:
        table = Table(title="Per-genre AP (×100)")
        table.add_column("genre")
        for name in loaded:
            table.add_column(name, justify="right")
        for genre in GENRES:
            table.add_row(genre, *(_genre_cell(r, genre) for r in loaded.values()))
        console.print(table)


def _genre_cell(report: EvalReport, genre: str) -> str:
    summary = report.per_genre.get(genre)
    return "-" if summary is None or summary.mean is None else f"{summary.mean:.2f}"


def main() -> None:
    """Main entry point for the CLI."""
    cli(obj={})


if __name__ == "__main__":
    main()
