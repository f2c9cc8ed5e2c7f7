"""
Second-order iterative stratification (SOIS) and dataset statistics.

Keys are genre pairs carried by an example, or a singleton for single-label
examples. The splitter repeatedly picks the key with the fewest unassigned
examples and hands each of its examples to the subset that still needs that key
most, ties broken by remaining capacity and then by the rng. Subset capacities are
floor(ratio * n) with the leftover examples given to the largest remainders, so
every subset ends within one example of floor(ratio * n).
"""

import csv
import io
import logging
import math
import statistics
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from trailersmith.errors import ArgumentError, StorageError, ValidationError, handle_errors
from trailersmith.genres import GENRES, NUM_GENRES, GenreSet, label_matrix
from trailersmith.records import SUBSETS, SplitAssignment, TrailerRecord
from trailersmith.settings import derive_seed

logger = logging.getLogger("trailersmith.splitter")

DEFAULT_RATIOS = (0.70, 0.10, 0.20)

LabelPairKey = Tuple[int, ...]


def label_pair_keys(labels: GenreSet) -> List[LabelPairKey]:
    """Canonical keys of one example: every genre pair, or the lone genre."""
    indices = labels.indices
    if len(indices) == 1:
        return [(indices[0],)]
    return list(combinations(indices, 2))


def subset_capacities(n: int, ratios: Sequence[float]) -> List[int]:
    """floor(ratio * n) per subset plus one extra for the largest remainders until the sizes sum to n."""
    exact = [r * n for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in exact]
    remainders = sorted(range(len(ratios)), key=lambda s: (-(exact[s] - sizes[s]), s))
    for s in remainders[: n - sum(sizes)]:
        sizes[s] += 1
    return sizes


@dataclass
class StratifyState:
    """Greedy bookkeeping: per-key desired counts per subset and remaining subset capacity."""
    desired: Dict[LabelPairKey, List[float]]
    capacity: List[int]

    @classmethod
    def start(cls, example_keys: Sequence[Sequence[LabelPairKey]], ratios: Sequence[float]) -> "StratifyState":
        counts: Dict[LabelPairKey, int] = {}
        for keys in example_keys:
            for key in keys:
                counts[key] = counts.get(key, 0) + 1
        desired = {key: [count * r for r in ratios] for key, count in sorted(counts.items())}
        return cls(desired=desired, capacity=subset_capacities(len(example_keys), ratios))

    def choose(self, key: LabelPairKey, rng: np.random.Generator) -> int:
        eligible = [s for s, cap in enumerate(self.capacity) if cap > 0]
        need = self.desired[key]
        best_need = max(need[s] for s in eligible)
        candidates = [s for s in eligible if need[s] == best_need]
        if len(candidates) > 1:
            best_capacity = max(self.capacity[s] for s in candidates)
            candidates = [s for s in candidates if self.capacity[s] == best_capacity]
        if len(candidates) > 1:
            return candidates[int(rng.integers(len(candidates)))]
        return candidates[0]

    def assign(self, keys: Sequence[LabelPairKey], subset: int) -> None:
        for key in keys:
            self.desired[key][subset] -= 1.0
        self.capacity[subset] -= 1


def _check_inputs(labelsets: Sequence[GenreSet], ratios: Sequence[float], ids: Optional[Sequence[str]]) -> List[str]:
    if not labelsets:
        raise ArgumentError("Cannot split an empty dataset")
    if len(ratios) != len(SUBSETS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ArgumentError("Ratios must be three non-negative values summing to 1", {"ratios": tuple(ratios)})
    for i, labels in enumerate(labelsets):
        if len(labels) == 0:
            raise ValidationError("Every example needs at least one genre", {"index": i})
    ids = list(ids) if ids is not None else [str(i) for i in range(len(labelsets))]
    if len(ids) != len(labelsets) or len(set(ids)) != len(ids):
        raise ArgumentError("ids must be unique and match the label sets")
    return ids


def sois_split(labelsets: Sequence[GenreSet], ratios: Sequence[float] = DEFAULT_RATIOS,
               rng: Optional[np.random.Generator] = None, ids: Optional[Sequence[str]] = None,
               fold: int = 1) -> SplitAssignment:
    """One train/val/test partition stratified over genre pairs."""
    ids = _check_inputs(labelsets, ratios, ids)
    rng = rng if rng is not None else np.random.default_rng(0)
    example_keys = [label_pair_keys(labels) for labels in labelsets]
    state = StratifyState.start(example_keys, ratios)

    # visiting order within a key; the only source of variation between seeds besides exact ties
    order = [int(i) for i in rng.permutation(len(labelsets))]
    unassigned = set(order)
    subset_of: Dict[int, int] = {}
    while unassigned:
        remaining: Dict[LabelPairKey, List[int]] = {}
        for i in order:
            if i in unassigned:
                for key in example_keys[i]:
                    remaining.setdefault(key, []).append(i)
        key = min(remaining, key=lambda k: (len(remaining[k]), k))
        for i in remaining[key]:
            subset = state.choose(key, rng)
            state.assign(example_keys[i], subset)
            subset_of[i] = subset
            unassigned.discard(i)

    return SplitAssignment(fold=fold, subsets={ids[i]: SUBSETS[subset_of[i]] for i in range(len(ids))})


def random_split(labelsets: Sequence[GenreSet], ratios: Sequence[float] = DEFAULT_RATIOS,
                 rng: Optional[np.random.Generator] = None, ids: Optional[Sequence[str]] = None,
                 fold: int = 1) -> SplitAssignment:
    """Unstratified baseline with the same subset sizes."""
    ids = _check_inputs(labelsets, ratios, ids)
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = subset_capacities(len(ids), ratios)
    subsets = np.repeat(np.arange(len(SUBSETS)), sizes)
    rng.shuffle(subsets)
    return SplitAssignment(fold=fold, subsets={trailer_id: SUBSETS[s] for trailer_id, s in zip(ids, subsets)})


def make_folds(labelsets: Sequence[GenreSet], n_folds: int = 3, seed: int = 0,
               ids: Optional[Sequence[str]] = None, ratios: Sequence[float] = DEFAULT_RATIOS) -> List[SplitAssignment]:
    """Folds 1..n_folds, fold k drawn from derive_seed(seed, "fold", k)."""
    if n_folds < 1:
        raise ArgumentError("Need at least one fold", {"n_folds": n_folds})
    return [
        sois_split(labelsets, ratios, np.random.default_rng(derive_seed(seed, "fold", k)), ids=ids, fold=k)
        for k in range(1, n_folds + 1)
    ]


# Statistics

def label_cardinality(labelsets: Sequence[GenreSet]) -> float:
    if not labelsets:
        raise ArgumentError("No label sets")
    return sum(len(labels) for labels in labelsets) / len(labelsets)


def label_density(labelsets: Sequence[GenreSet]) -> float:
    return label_cardinality(labelsets) / NUM_GENRES


def label_count_histogram(labelsets: Sequence[GenreSet]) -> Dict[int, float]:
    """Share of examples carrying exactly k genres, k = 1..g."""
    if not labelsets:
        raise ArgumentError("No label sets")
    counts = np.bincount([len(labels) for labels in labelsets], minlength=NUM_GENRES + 1)
    return {k: float(counts[k] / len(labelsets)) for k in range(1, NUM_GENRES + 1)}


@dataclass
class GenreStats:
    counts: np.ndarray
    proportions: np.ndarray
    cooccurrence: np.ndarray

    def as_dict(self) -> Dict[str, Dict[str, float]]:
        return {
            genre: {"count": int(self.counts[k]), "proportion": float(self.proportions[k])}
            for k, genre in enumerate(GENRES)
        }


def genre_stats(labelsets: Sequence[GenreSet]) -> GenreStats:
    """Per-genre counts and proportions; co-occurrence is symmetric with the counts on its diagonal."""
    if not labelsets:
        raise ArgumentError("No label sets")
    y = label_matrix(labelsets).astype(np.int64)
    counts = y.sum(axis=0)
    return GenreStats(counts=counts, proportions=counts / len(labelsets), cooccurrence=y.T @ y)


def subset_distribution(labelsets: Sequence[GenreSet], ids: Sequence[str],
                        assignment: SplitAssignment) -> Dict[str, object]:
    """Genre proportions overall and per subset, with the largest deviation in percentage points."""
    by_id = dict(zip(ids, labelsets))
    overall = genre_stats(list(labelsets)).proportions
    table: Dict[str, object] = {"all": _proportion_row(overall)}
    deviation = 0.0
    for subset in SUBSETS:
        members = [by_id[i] for i in assignment.ids(subset) if i in by_id]
        if not members:
            continue
        proportions = genre_stats(members).proportions
        table[subset] = _proportion_row(proportions)
        deviation = max(deviation, float(np.max(np.abs(proportions - overall))) * 100.0)
    table["max_deviation"] = deviation
    return table


def _proportion_row(proportions: np.ndarray) -> Dict[str, float]:
    return {genre: float(proportions[k]) for k, genre in enumerate(GENRES)}


def max_deviation(labelsets: Sequence[GenreSet], ids: Sequence[str], assignment: SplitAssignment) -> float:
    return float(subset_distribution(labelsets, ids, assignment)["max_deviation"])


def shot_length_stats(shot_lengths: Sequence[int], bin_width: int = 8) -> Dict[str, object]:
    """Histogram (bins of `bin_width` frames), mode, mean and median of shot lengths in frames."""
    if not shot_lengths:
        raise ArgumentError("No shots")
    lengths = np.asarray(shot_lengths, dtype=np.int64)
    values, counts = np.unique(lengths, return_counts=True)
    edges = np.arange(0, lengths.max() + bin_width + 1, bin_width)
    hist, _ = np.histogram(lengths, bins=edges)
    return {
        "count": int(len(lengths)),
        "mode": int(values[np.argmax(counts)]),
        "mean": float(lengths.mean()),
        "median": float(statistics.median(lengths.tolist())),
        "histogram": {f"{int(lo)}-{int(lo) + bin_width - 1}": int(n) for lo, n in zip(edges[:-1], hist) if n},
    }


def duration_stats(records: Sequence[TrailerRecord]) -> Dict[str, float]:
    if not records:
        raise ArgumentError("No records")
    seconds = [r.duration_seconds for r in records]
    return {"mean": float(np.mean(seconds)), "min": float(min(seconds)), "max": float(max(seconds))}


def statistics_report(records: Sequence[TrailerRecord], folds: Sequence[SplitAssignment] = (),
                      shot_lengths: Optional[Sequence[int]] = None) -> Dict[str, object]:
    labelsets = [r.genres for r in records]
    ids = [r.id for r in records]
    report: Dict[str, object] = {
        "examples": len(records),
        "label_cardinality": round(label_cardinality(labelsets), 4),
        "label_density": round(label_density(labelsets), 4),
        "label_count_histogram": {k: round(v, 4) for k, v in label_count_histogram(labelsets).items()},
        "genres": genre_stats(labelsets).as_dict(),
        "duration_seconds": {k: round(v, 3) for k, v in duration_stats(records).items()},
    }
    if folds:
        report["folds"] = {
            f"fold{a.fold}": {"sizes": a.sizes(),
                              "max_deviation_pp": round(max_deviation(labelsets, ids, a), 3)}
            for a in folds
        }
    if shot_lengths:
        report["shot_lengths"] = shot_length_stats(shot_lengths)
    return report


@handle_errors(error_type=StorageError)
def write_statistics(path: Union[str, Path], report: Dict[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(report, sort_keys=False), encoding="utf-8")


@handle_errors(error_type=StorageError)
def write_cooccurrence_csv(path: Union[str, Path], stats: GenreStats) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["genre"] + list(GENRES))
    for k, genre in enumerate(GENRES):
        writer.writerow([genre] + [int(v) for v in stats.cooccurrence[k]])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")
