"""
Shot detection and clip generation.

Frames are uint8 RGB rasters of shape (height, width, 3); a video is a sequence of
frames, usually one (n, height, width, 3) array. Shot-f clips never cross a shot
boundary; Seq-f clips are blind contiguous blocks.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from trailersmith.errors import ArgumentError, DimensionError, ValidationError
from trailersmith.records import read_boundary_file

logger = logging.getLogger("trailersmith.segmenter")

Video = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass(frozen=True)
class Shot:
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not 0 <= self.start_frame < self.end_frame:
            raise ValidationError("Shot must satisfy 0 <= start < end",
                                  {"start": self.start_frame, "end": self.end_frame})

    def __len__(self) -> int:
        return self.end_frame - self.start_frame


@dataclass(frozen=True)
class Clip:
    """f frames of one shot; the last pad_count frames are black."""
    frames: np.ndarray
    source_shot: int
    pad_count: int
    start_frame: int

    @property
    def f(self) -> int:
        return int(len(self.frames))

    @property
    def content_frames(self) -> np.ndarray:
        return self.frames[: self.f - self.pad_count]

    @property
    def frame_range(self) -> Tuple[int, int]:
        """Trailer frame indices covered by the non-pad frames."""
        return self.start_frame, self.start_frame + self.f - self.pad_count


class DetectorConfig(BaseModel):
    """Classical shot detector settings."""
    model_config = ConfigDict(frozen=True)

    bins: int = Field(default=16, ge=2)
    cut_threshold: float = Field(default=0.4, gt=0)
    black_threshold: float = Field(default=20 / 255, gt=0)
    min_shot_length: int = Field(default=6, ge=1)
    distance: str = "l1"


# Histogram distances

def l1_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel L1 averaged over channels, in [0, 2]."""
    return np.abs(a - b).sum(axis=-1) / 3.0


def bhattacharyya_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-channel Bhattacharyya distance, in [0, 1]."""
    bins = a.shape[-1] // 3
    coefficient = np.sqrt(a * b).reshape(*a.shape[:-1], 3, bins).sum(axis=-1)
    return np.sqrt(np.clip(1.0 - coefficient, 0.0, 1.0)).mean(axis=-1)


HISTOGRAM_DISTANCES: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "l1": l1_distance,
    "bhattacharyya": bhattacharyya_distance,
}


def frame_histograms(frames: Video, bins: int) -> np.ndarray:
    """Normalized per-channel histograms of many frames, shape (n, 3 * bins)."""
    if bins < 2:
        raise ArgumentError("Histogram needs at least 2 bins", {"bins": bins})
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[1] == 0 or frames.shape[2] == 0:
        raise DimensionError("Frames must be (n, height, width, 3) rasters", {"shape": frames.shape})
    n = frames.shape[0]
    pixels = frames.reshape(n, -1, 3).astype(np.int64)
    index = pixels * bins // 256
    histograms = np.empty((n, 3 * bins), dtype=np.float64)
    offsets = (np.arange(n) * bins)[:, None]
    for channel in range(3):
        counts = np.bincount((index[:, :, channel] + offsets).ravel(), minlength=n * bins)
        histograms[:, channel * bins:(channel + 1) * bins] = counts.reshape(n, bins) / pixels.shape[1]
    return histograms


def frame_histogram(frame: np.ndarray, bins: int = 16) -> np.ndarray:
    """Normalized per-channel histogram of one frame, length 3 * bins."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.size == 0:
        raise DimensionError("Frame must be a non-empty (height, width, 3) raster", {"shape": frame.shape})
    return frame_histograms(frame[None], bins)[0]


def mean_luminance(frames: Video) -> np.ndarray:
    """Rec. 601 luma per frame, scaled to [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    luma = frames[..., 0] * 0.299 + frames[..., 1] * 0.587 + frames[..., 2] * 0.114
    return luma.reshape(len(frames), -1).mean(axis=1) / 255.0


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal [start, end) runs of True."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def _merge_short(boundaries: List[int], n_frames: int, min_length: int) -> List[int]:
    """Drop boundaries so no shot is shorter than min_length, unless it is the only shot."""
    kept = [0] + boundaries + [n_frames]
    i = 1
    while i < len(kept):
        if kept[i] - kept[i - 1] < min_length and len(kept) > 2:
            if i == 1:
                # first shot has no predecessor: merge into the following shot
                del kept[1]
            else:
                # merge into the preceding shot
                del kept[i - 1]
            continue
        i += 1
    return kept[1:-1]


def detect_shots(frames: Video, config: Optional[DetectorConfig] = None) -> List[Shot]:
    """Histogram-difference shot detector with black-run transitions."""
    config = config or DetectorConfig()
    frames = np.asarray(frames)
    n = len(frames)
    if n < 1:
        raise ArgumentError("Cannot segment an empty video")
    if n == 1:
        return [Shot(0, 1)]

    histograms = frame_histograms(frames, config.bins)
    dark = mean_luminance(frames) < config.black_threshold
    distance = HISTOGRAM_DISTANCES[config.distance]
    jumps = distance(histograms[1:], histograms[:-1])

    boundaries = set()
    for i in range(1, n):
        if jumps[i - 1] > config.cut_threshold and not dark[i] and not dark[i - 1]:
            boundaries.add(i)

    for start, end in _runs(dark):
        # transition frames stay with the preceding shot; the next shot starts after the run
        if start > 0 and end < n:
            boundaries.add(end)

    kept = _merge_short(sorted(boundaries), n, config.min_shot_length)
    edges = [0] + kept + [n]
    shots = [Shot(a, b) for a, b in zip(edges[:-1], edges[1:])]
    logger.debug(f"Detected {len(shots)} shots in {n} frames")
    return shots


def validate_shots(shots: Sequence[Shot], n_frames: Optional[int] = None) -> None:
    """Shots must be ordered, disjoint and cover [0, n_frames)."""
    if not shots:
        raise ValidationError("No shots")
    if shots[0].start_frame != 0:
        raise ValidationError("Shots do not start at frame 0", {"start": shots[0].start_frame})
    for previous, current in zip(shots[:-1], shots[1:]):
        if current.start_frame > previous.end_frame:
            raise ValidationError("Gap between shots",
                                  {"end": previous.end_frame, "start": current.start_frame})
        if current.start_frame < previous.end_frame:
            raise ValidationError("Overlapping shots",
                                  {"end": previous.end_frame, "start": current.start_frame})
    if n_frames is not None and shots[-1].end_frame != n_frames:
        raise ValidationError("Shots do not cover the video",
                              {"end": shots[-1].end_frame, "frames": n_frames})


def import_boundaries(
    boundary_file: Union[str, Path, Mapping[str, Sequence[Tuple[int, int]]]],
    trailer_id: str,
    n_frames: Optional[int] = None,
) -> List[Shot]:
    """Shots of one trailer from an external boundary file (rows may be unordered)."""
    rows = boundary_file if isinstance(boundary_file, Mapping) else read_boundary_file(boundary_file)
    if trailer_id not in rows:
        raise ValidationError(f"No boundaries for trailer '{trailer_id}'")
    shots = sorted(Shot(int(start), int(end)) for start, end in rows[trailer_id])
    validate_shots(shots, n_frames)
    return shots


def _black_like(frame: np.ndarray, count: int) -> np.ndarray:
    return np.zeros((count,) + tuple(frame.shape), dtype=frame.dtype)


def partition_shot(shot_frames: Video, f: int, source_shot: int = 0, start_frame: int = 0) -> List[Clip]:
    """Cut a shot into ceil(len / f) clips of f frames, black-padding the last one."""
    if f < 1:
        raise ArgumentError("Clip length f must be at least 1", {"f": f})
    shot_frames = np.asarray(shot_frames)
    length = len(shot_frames)
    if length < 1:
        raise ArgumentError("Cannot partition an empty shot")
    clips = []
    for offset in range(0, length, f):
        block = shot_frames[offset:offset + f]
        pad_count = f - len(block)
        if pad_count:
            block = np.concatenate([block, _black_like(shot_frames[0], pad_count)])
        clips.append(Clip(frames=block, source_shot=source_shot, pad_count=pad_count,
                          start_frame=start_frame + offset))
    return clips


def clip_count(shots: Sequence[Shot], f: int) -> int:
    """|T| for Shot-f: sum over shots of ceil(len / f)."""
    if f < 1:
        raise ArgumentError("Clip length f must be at least 1", {"f": f})
    return sum(math.ceil(len(shot) / f) for shot in shots)


def build_clip_sequence(frames: Video, shots: Sequence[Shot], f: int) -> List[Clip]:
    """The trailer clip sequence T: the Shot-f clips of every shot, in order."""
    frames = np.asarray(frames)
    validate_shots(shots, len(frames))
    sequence: List[Clip] = []
    for index, shot in enumerate(shots):
        sequence.extend(partition_shot(frames[shot.start_frame:shot.end_frame], f,
                                       source_shot=index, start_frame=shot.start_frame))
    return sequence


def seq_partition(frames: Video, f: int) -> List[Clip]:
    """Seq-f: contiguous f-frame blocks ignoring shot boundaries."""
    return partition_shot(frames, f, source_shot=0, start_frame=0)


def downsample_factor(src_fps: float, dst_fps: float) -> int:
    if src_fps <= 0 or dst_fps <= 0:
        raise ArgumentError("Frame rates must be positive", {"src": src_fps, "dst": dst_fps})
    factor = src_fps / dst_fps
    rounded = round(factor)
    if rounded < 1 or abs(factor - rounded) > 1e-9:
        raise ArgumentError("Source frame rate is not a multiple of the target",
                            {"src": src_fps, "dst": dst_fps})
    return int(rounded)


def downsample_fps(frames: Video, src_fps: float, dst_fps: float) -> Video:
    """Keep the first frame out of every src/dst consecutive frames."""
    factor = downsample_factor(src_fps, dst_fps)
    if factor == 1:
        return frames
    return frames[::factor]


def select_keyframe(clip: Clip, bins: int = 16) -> int:
    """Index of the non-pad frame closest (L1) to the clip's mean histogram; ties -> lowest."""
    content = clip.content_frames
    if len(content) == 0:
        raise ArgumentError("Clip has no content frames")
    histograms = frame_histograms(content, bins)
    distances = np.abs(histograms - histograms.mean(axis=0)).sum(axis=1)
    return int(np.argmin(distances))


def clips_straddle(clips: Sequence[Clip], shots: Sequence[Shot]) -> List[bool]:
    """Whether each clip's content frames cross a shot boundary."""
    starts = [shot.start_frame for shot in shots[1:]]
    flags = []
    for clip in clips:
        first, last = clip.frame_range
        flags.append(any(first < boundary < last for boundary in starts))
    return flags
