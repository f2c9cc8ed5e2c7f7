"""
Synthetic trailers with known ground truth.

`synth_video` renders frames with planted shots and transitions, for checking the
shot detector. `synth_features` writes clip feature files carrying a planted genre
signal, for training and evaluating aggregators without real backbones.
"""

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from trailersmith.errors import ConfigError, StorageError, handle_errors
from trailersmith.features import FeatureSequence, write_features
from trailersmith.genres import GENRE_INDEX, NUM_GENRES, GenreSet
from trailersmith.records import TrailerRecord, write_boundary_file, write_manifest
from trailersmith.segmenter import Shot
from trailersmith.settings import derive_seed

logger = logging.getLogger("trailersmith.synth")

Transition = Literal["cut", "fade", "black"]

# Share of trailers with 1..5 genres; mean 2.55
CARDINALITY_PROBS = (0.15, 0.35, 0.35, 0.10, 0.05)

# Relative genre popularity, in vocabulary order
GENRE_WEIGHTS = np.array([1.4, 0.9, 1.2, 0.8, 1.8, 0.6, 0.7, 0.8, 0.7, 1.3])

# Pairs that co-occur more often than their popularity predicts
PAIR_BOOSTS = {
    ("action", "adventure"): 3.0,
    ("action", "thriller"): 2.5,
    ("action", "science-fiction"): 2.5,
    ("adventure", "fantasy"): 3.0,
    ("comedy", "romance"): 3.0,
    ("crime", "thriller"): 3.0,
    ("crime", "drama"): 2.0,
    ("drama", "romance"): 2.5,
    ("horror", "thriller"): 3.0,
}

STRATEGY_PATTERN = re.compile(r"^(Seq|Shot)-(\d+)$")


def parse_strategy(strategy: str) -> Tuple[str, int]:
    """'Shot-24' -> ('Shot', 24)."""
    match = STRATEGY_PATTERN.match(strategy or "")
    if not match or int(match.group(2)) < 1:
        raise ConfigError(f"Strategy must look like Seq-24 or Shot-32, got '{strategy}'")
    return match.group(1), int(match.group(2))


def _boost_matrix() -> np.ndarray:
    boost = np.ones((NUM_GENRES, NUM_GENRES))
    for (a, b), factor in PAIR_BOOSTS.items():
        boost[GENRE_INDEX[a], GENRE_INDEX[b]] = boost[GENRE_INDEX[b], GENRE_INDEX[a]] = factor
    return boost


def sample_labelset(rng: np.random.Generator) -> GenreSet:
    """Draw a label count, then genres one at a time weighted by popularity and pair affinity."""
    k = int(rng.choice(len(CARDINALITY_PROBS), p=CARDINALITY_PROBS)) + 1
    boost = _boost_matrix()
    chosen: List[int] = []
    weights = GENRE_WEIGHTS.copy()
    for _ in range(k):
        probs = weights.copy()
        probs[chosen] = 0.0
        pick = int(rng.choice(NUM_GENRES, p=probs / probs.sum()))
        chosen.append(pick)
        weights = weights * boost[pick]
    return GenreSet.from_indices(chosen)


def sample_labelsets(n: int, rng: np.random.Generator) -> List[GenreSet]:
    return [sample_labelset(rng) for _ in range(n)]


# Videos

class SynthVideoSpec(BaseModel):
    """Shot layout and rendering of one synthetic video."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    shot_lengths: Optional[List[int]] = None
    shots_min: int = Field(default=3, ge=1)
    shots_max: int = Field(default=8, ge=1)
    shot_min_length: int = Field(default=12, ge=1)
    shot_max_length: int = Field(default=60, ge=1)
    transitions: List[Transition] = Field(default_factory=lambda: ["cut", "fade", "black"])
    transition_sequence: Optional[List[Transition]] = None
    transition_length: int = Field(default=6, ge=1)
    height: int = Field(default=16, ge=1)
    width: int = Field(default=16, ge=1)
    fps: int = Field(default=24, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "SynthVideoSpec":
        if self.shots_min > self.shots_max or self.shot_min_length > self.shot_max_length:
            raise ConfigError("Synthetic video ranges are inverted")
        if self.shot_lengths is not None and (not self.shot_lengths or min(self.shot_lengths) < 1):
            raise ConfigError("Explicit shot lengths must be positive")
        if not self.transitions:
            raise ConfigError("At least one transition type is required")
        if self.shot_lengths is not None and self.transition_sequence is not None \
                and len(self.transition_sequence) != len(self.shot_lengths) - 1:
            raise ConfigError("Need one transition between each pair of shots")
        return self


@dataclass
class SynthVideo:
    frames: np.ndarray
    shots: List[Shot]
    transitions: List[str]
    content_frames: int

    @property
    def boundaries(self) -> List[int]:
        return [shot.start_frame for shot in self.shots[1:]]


def fade_factors(length: int) -> np.ndarray:
    """Brightness of the fade frames: linear ramp down to 0, then back up."""
    down = length // 2
    up = length - down
    return np.concatenate([
        np.array([(down - 1 - k) / down for k in range(down)]) if down else np.zeros(0),
        np.array([k / up for k in range(up)]),
    ])


def _next_green(previous: Optional[int], rng: np.random.Generator) -> int:
    # consecutive shots differ by >= 64 in green, so their histograms never overlap
    while True:
        green = int(rng.integers(64, 201))
        if previous is None or abs(green - previous) >= 64:
            return green


def _render_shot(length: int, color: np.ndarray, spec: SynthVideoSpec, rng: np.random.Generator) -> np.ndarray:
    pattern = rng.integers(-24, 25, size=(spec.height, spec.width, 3))
    noise = rng.integers(-1, 2, size=(length, spec.height, spec.width, 3))
    frames = color[None, None, None, :] + pattern[None] + noise
    return np.clip(frames, 0, 255).astype(np.uint8)


def synth_video(spec: SynthVideoSpec, rng: np.random.Generator, genres: Optional[GenreSet] = None) -> SynthVideo:
    """
    Render planted shots joined by cuts, fades or black runs.

    Transition frames belong to the preceding ground-truth shot. With `genres`, the
    red channel of every shot comes from the palette entry of one of the genres.
    """
    if spec.shot_lengths is not None:
        lengths = list(spec.shot_lengths)
    else:
        count = int(rng.integers(spec.shots_min, spec.shots_max + 1))
        lengths = [int(v) for v in rng.integers(spec.shot_min_length, spec.shot_max_length + 1, size=count)]
    if spec.transition_sequence is not None:
        transitions = list(spec.transition_sequence)
    else:
        transitions = [spec.transitions[int(rng.integers(len(spec.transitions)))] for _ in lengths[1:]]

    palette = genres.indices if genres is not None and len(genres) else None
    rendered: List[np.ndarray] = []
    green: Optional[int] = None
    for length in lengths:
        green = _next_green(green, rng)
        if palette is not None:
            red = 40 + 20 * palette[int(rng.integers(len(palette)))]
        else:
            red = int(rng.integers(64, 201))
        rendered.append(_render_shot(length, np.array([red, green, int(rng.integers(64, 201))]), spec, rng))

    blocks: List[np.ndarray] = []
    shots: List[Shot] = []
    start = 0
    for index, shot_frames in enumerate(rendered):
        blocks.append(shot_frames)
        shot_length = len(shot_frames)
        kind = transitions[index] if index < len(transitions) else None
        if kind == "fade":
            # out of this shot's last frame, down to black, then up into the next shot's first frame
            down = spec.transition_length // 2
            factors = fade_factors(spec.transition_length)
            last = shot_frames[-1].astype(np.float64)
            first_next = rendered[index + 1][0].astype(np.float64)
            ramp = [last * factor for factor in factors[:down]] + [first_next * factor for factor in factors[down:]]
            blocks.append(np.stack(ramp).astype(np.uint8))
            shot_length += spec.transition_length
        elif kind == "black":
            blocks.append(np.zeros((spec.transition_length,) + shot_frames.shape[1:], dtype=np.uint8))
            shot_length += spec.transition_length
        shots.append(Shot(start, start + shot_length))
        start += shot_length

    return SynthVideo(frames=np.concatenate(blocks), shots=shots, transitions=transitions,
                      content_frames=sum(lengths))


@handle_errors(error_type=StorageError)
def write_synth_videos(out_dir: Union[str, Path], n_videos: int, spec: SynthVideoSpec,
                       seed: int = 0) -> Path:
    """Write `videos/<id>.npy`, a manifest and the ground-truth boundary file; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    label_rng = np.random.default_rng(derive_seed(seed, "synth-video", "labels"))
    records = []
    truth: Dict[str, List[Shot]] = {}
    for index in range(n_videos):
        trailer_id = f"v{index:04d}"
        genres = sample_labelset(label_rng)
        video = synth_video(spec, np.random.default_rng(derive_seed(seed, "synth-video", index)), genres)
        np.save(out_dir / "videos" / f"{trailer_id}.npy", video.frames, allow_pickle=False)
        truth[trailer_id] = video.shots
        records.append(TrailerRecord(id=trailer_id, video_path=f"videos/{trailer_id}.npy", genres=genres,
                                     fps=spec.fps, duration_frames=len(video.frames)))
    write_manifest(out_dir / "manifest.jsonl", records)
    write_boundary_file(out_dir / "boundaries.csv", truth)
    logger.info(f"Wrote {n_videos} synthetic videos to {out_dir}")
    return out_dir / "manifest.jsonl"


# Feature sequences

class SynthFeatureSpec(BaseModel):
    """Planted-signal clip features: signal clips are y @ P + noise, distractors are noise."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_trailers: int = Field(default=600, ge=1)
    b: int = Field(default=256, ge=2)
    clips_min: int = Field(default=20, ge=1)
    clips_max: int = Field(default=60, ge=1)
    snr: float = Field(default=2.0, gt=0)
    signal_fraction: float = Field(default=0.5, gt=0, le=1)
    shuffle_labels: bool = False
    two_streams: bool = False
    strategy: Optional[str] = None
    shot_min_length: int = Field(default=8, ge=1)
    shot_max_length: int = Field(default=72, ge=1)
    fps: int = Field(default=24, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "SynthFeatureSpec":
        if self.clips_min > self.clips_max or self.shot_min_length > self.shot_max_length:
            raise ConfigError("Synthetic feature ranges are inverted")
        if self.strategy is not None:
            parse_strategy(self.strategy)
        return self

    @property
    def sigma(self) -> float:
        return 1.0 / self.snr


@dataclass
class SynthFeatureSet:
    manifests: List[Path]
    records: List[TrailerRecord]
    prototypes: List[np.ndarray]


def prototype_matrix(b: int, rng: np.random.Generator) -> np.ndarray:
    """g x b genre prototypes."""
    return rng.standard_normal((NUM_GENRES, b))


def _latent_clip_mask(n_clips: int, strategy: str, spec: SynthFeatureSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """True for clips lying inside one planted shot under the given clip strategy."""
    kind, f = parse_strategy(strategy)
    target_frames = n_clips * f
    lengths: List[int] = []
    while sum(lengths) < target_frames:
        lengths.append(int(rng.integers(spec.shot_min_length, spec.shot_max_length + 1)))
    if kind == "Shot":
        return np.ones(sum(math.ceil(length / f) for length in lengths), dtype=bool)
    total = sum(lengths)
    boundaries = np.cumsum(lengths)[:-1]
    starts = np.arange(0, total, f)
    ends = np.minimum(starts + f, total)
    return np.array([not np.any((boundaries > s) & (boundaries < e)) for s, e in zip(starts, ends)])


def _feature_rows(y: np.ndarray, inside: np.ndarray, prototypes: np.ndarray, spec: SynthFeatureSpec,
                  rng: np.random.Generator) -> np.ndarray:
    n_clips = len(inside)
    signal = inside & (rng.random(n_clips) < spec.signal_fraction)
    if not signal.any() and inside.any():
        signal[int(rng.choice(np.flatnonzero(inside)))] = True
    rows = spec.sigma * rng.standard_normal((n_clips, prototypes.shape[1]))
    rows[signal] += y @ prototypes
    return rows


@handle_errors(error_type=StorageError)
def synth_features(out_dir: Union[str, Path], spec: SynthFeatureSpec, seed: int = 0) -> SynthFeatureSet:
    """
    Write `features/<id>.dvtf` plus `manifest.jsonl` (and a `stream2/` copy with its own
    prototypes when two streams are requested). Identical seeds give identical bytes.
    """
    out_dir = Path(out_dir)
    label_rng = np.random.default_rng(derive_seed(seed, "synth-features", "labels"))
    labelsets = sample_labelsets(spec.n_trailers, label_rng)
    trained_on = list(labelsets)
    if spec.shuffle_labels:
        order = np.random.default_rng(derive_seed(seed, "synth-features", "shuffle")).permutation(len(labelsets))
        trained_on = [labelsets[i] for i in order]

    streams = 2 if spec.two_streams else 1
    stream_dirs = [out_dir] + [out_dir / "stream2"] * (streams - 1)
    prototypes = [prototype_matrix(spec.b, np.random.default_rng(derive_seed(seed, "prototypes", s)))
                  for s in range(streams)]
    records: Dict[int, List[TrailerRecord]] = {s: [] for s in range(streams)}

    for index, genres in enumerate(labelsets):
        trailer_id = f"t{index:05d}"
        layout_rng = np.random.default_rng(derive_seed(seed, "layout", index))
        n_clips = int(layout_rng.integers(spec.clips_min, spec.clips_max + 1))
        if spec.strategy is not None:
            inside = _latent_clip_mask(n_clips, spec.strategy, spec, layout_rng)
        else:
            inside = np.ones(n_clips, dtype=bool)
        y = genres.to_vector()
        for s in range(streams):
            rows = _feature_rows(y, inside, prototypes[s],
                                 spec, np.random.default_rng(derive_seed(seed, "clips", index, s)))
            relative = f"features/{trailer_id}.dvtf"
            write_features(stream_dirs[s] / relative,
                           FeatureSequence(backbone_id=f"synth-s{s + 1}-b{spec.b}", rows=rows.astype(np.float32)))
            records[s].append(TrailerRecord(
                id=trailer_id, feature_path=relative, genres=trained_on[index], fps=spec.fps,
                duration_frames=len(inside) * (parse_strategy(spec.strategy)[1] if spec.strategy else 24),
            ))

    manifests = []
    for s in range(streams):
        write_manifest(stream_dirs[s] / "manifest.jsonl", records[s])
        manifests.append(stream_dirs[s] / "manifest.jsonl")
    logger.info(f"Wrote {spec.n_trailers} synthetic feature sequences ({streams} stream(s)) to {out_dir}")
    return SynthFeatureSet(manifests=manifests, records=records[0], prototypes=prototypes)
