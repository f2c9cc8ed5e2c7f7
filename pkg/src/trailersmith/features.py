"""
Clip feature sequences and the DVTF binary format.

DVTF layout (little-endian):
    magic "DVTF" | u16 version | u16 len + backbone id (UTF-8) | u32 b | u32 n_clips
    | n_clips * b float32, row-major
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from trailersmith.errors import (
    ArgumentError,
    DataError,
    FormatError,
    LengthError,
    StorageError,
    handle_errors,
)
from trailersmith.segmenter import Clip, frame_histogram, select_keyframe

DVTF_MAGIC = b"DVTF"
DVTF_VERSION = 1
_FLOAT32_LE = np.dtype("<f4")


@dataclass(frozen=True)
class FeatureSequence:
    """One representation row per clip, as produced by a backbone."""
    backbone_id: str
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DataError("Feature rows must be a non-empty n_clips x b matrix", {"shape": rows.shape})
        if not np.all(np.isfinite(rows)):
            raise DataError("Feature rows contain non-finite values", {"backbone": self.backbone_id})
        object.__setattr__(self, "rows", rows)

    @property
    def b(self) -> int:
        return int(self.rows.shape[1])

    @property
    def n_clips(self) -> int:
        return int(self.rows.shape[0])

    def as_float64(self) -> np.ndarray:
        return self.rows.astype(np.float64)


def encode_features(features: FeatureSequence) -> bytes:
    backbone = features.backbone_id.encode("utf-8")
    if len(backbone) > 0xFFFF:
        raise ArgumentError("Backbone id too long", {"bytes": len(backbone)})
    header = DVTF_MAGIC + struct.pack("<HH", DVTF_VERSION, len(backbone)) + backbone
    header += struct.pack("<II", features.b, features.n_clips)
    return header + np.ascontiguousarray(features.rows, dtype=_FLOAT32_LE).tobytes()


def decode_features(payload: bytes) -> FeatureSequence:
    if len(payload) < 8 or payload[:4] != DVTF_MAGIC:
        raise FormatError("Not a DVTF feature file", {"magic": payload[:4]})
    version, name_length = struct.unpack_from("<HH", payload, 4)
    if version != DVTF_VERSION:
        raise FormatError("Unsupported DVTF version", {"version": version})
    offset = 8 + name_length
    if len(payload) < offset + 8:
        raise LengthError("Truncated DVTF header", {"bytes": len(payload)})
    try:
        backbone_id = payload[8:offset].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("Backbone id is not valid UTF-8", {"position": exc.start}) from exc
    b, n_clips = struct.unpack_from("<II", payload, offset)
    offset += 8
    expected = n_clips * b * _FLOAT32_LE.itemsize
    if len(payload) - offset != expected:
        raise LengthError(
            "DVTF payload does not match header",
            {"expected_bytes": expected, "actual_bytes": len(payload) - offset},
        )
    rows = np.frombuffer(payload, dtype=_FLOAT32_LE, offset=offset).reshape(n_clips, b).astype(np.float32)
    return FeatureSequence(backbone_id=backbone_id, rows=rows)


@handle_errors(error_type=StorageError)
def read_features(path: Union[str, Path]) -> FeatureSequence:
    return decode_features(Path(path).read_bytes())


@handle_errors(error_type=StorageError)
def write_features(path: Union[str, Path], features: FeatureSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_features(features))


class StubFeaturizer:
    """
    Stand-in for a frozen pretrained backbone.

    Each clip is summarized by colour histograms and projected to width b by a
    fixed random matrix derived from `seed`. Mode "3d" looks at every frame of
    the clip (mean histogram and mean frame-to-frame histogram change, pad frames
    included); mode "2d" looks at the keyframe only.
    """

    def __init__(self, b: int, mode: str = "3d", bins: int = 16, seed: int = 0):
        if mode not in ("2d", "3d"):
            raise ArgumentError(f"Unknown featurizer mode '{mode}'")
        if b < 1:
            raise ArgumentError("Feature width must be positive", {"b": b})
        self.b = b
        self.mode = mode
        self.bins = bins
        rng = np.random.default_rng(seed)
        width = 3 * bins * (2 if mode == "3d" else 1)
        self.projection = rng.standard_normal((width, b)) / np.sqrt(width) * 4.0
        self.offset = rng.uniform(-0.5, 0.5, size=b)

    @property
    def backbone_id(self) -> str:
        return f"stub-{self.mode}-b{self.b}"

    def describe(self, clip: Clip) -> np.ndarray:
        if self.mode == "2d":
            return frame_histogram(clip.frames[select_keyframe(clip)], self.bins)
        histograms = np.stack([frame_histogram(frame, self.bins) for frame in clip.frames])
        motion = np.abs(np.diff(histograms, axis=0)).mean(axis=0) if len(histograms) > 1 \
            else np.zeros(histograms.shape[1])
        return np.concatenate([histograms.mean(axis=0), motion])

    def featurize(self, clips: Sequence[Clip]) -> FeatureSequence:
        if not clips:
            raise ArgumentError("Cannot featurize an empty clip sequence")
        descriptors = np.stack([self.describe(clip) for clip in clips])
        rows = np.tanh(descriptors @ self.projection + self.offset)
        return FeatureSequence(backbone_id=self.backbone_id, rows=rows.astype(np.float32))
