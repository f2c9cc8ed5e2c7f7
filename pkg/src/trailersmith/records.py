"""
Trailer records and the text artifacts of the pipeline.

Manifests are line-delimited JSON, one TrailerRecord per line. Boundary files
and split files are comma-separated rows without a header.
"""

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from trailersmith.errors import StorageError, TrailersmithError, ValidationError, handle_errors
from trailersmith.genres import GenreSet

SUBSETS = ("train", "val", "test")


class TrailerRecord(BaseModel):
    """One titled video: frame source and/or feature file, frame rate and genres."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, extra="forbid")

    id: str = Field(min_length=1)
    feature_path: Optional[str] = None
    video_path: Optional[str] = None
    genres: GenreSet
    fps: float = Field(gt=0)
    duration_frames: int = Field(ge=1)

    @field_validator("genres", mode="before")
    @classmethod
    def _parse_genres(cls, value):
        if isinstance(value, GenreSet):
            genres = value
        elif isinstance(value, (list, tuple)):
            genres = GenreSet.from_names(value)
        else:
            raise ValidationError("Genres must be a list of names")
        if len(genres) == 0:
            raise ValidationError("Empty genre list")
        return genres

    @field_validator("fps", mode="before")
    @classmethod
    def _parse_fps(cls, value):
        # accepts rationals such as "24000/1001"
        if isinstance(value, str):
            return float(Fraction(value))
        return value

    @field_validator("feature_path", "video_path")
    @classmethod
    def _check_path(cls, value):
        if value is not None and (not value.strip() or "\n" in value or "\x00" in value):
            raise ValidationError("Malformed path", {"path": repr(value)})
        return value

    @model_validator(mode="after")
    def _has_source(self) -> "TrailerRecord":
        if self.feature_path is None and self.video_path is None:
            raise ValidationError("Record needs a feature_path or a video_path", {"id": self.id})
        return self

    @property
    def duration_seconds(self) -> float:
        return self.duration_frames / self.fps

    def to_json(self) -> str:
        data = {"id": self.id}
        if self.feature_path is not None:
            data["feature_path"] = self.feature_path
        if self.video_path is not None:
            data["video_path"] = self.video_path
        data["genres"] = self.genres.names
        data["fps"] = int(self.fps) if float(self.fps).is_integer() else self.fps
        data["duration_frames"] = self.duration_frames
        return json.dumps(data, separators=(",", ":"))


def parse_manifest(content: Union[bytes, str]) -> List[TrailerRecord]:
    """Parse a line-delimited manifest. Blank lines are skipped; order is preserved."""
    if isinstance(content, bytes):
        try:
            content = content.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ValidationError("Manifest is not valid UTF-8", {"offset": e.start})

    records: List[TrailerRecord] = []
    seen = set()
    for line_number, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Malformed manifest line: {e.msg}", {"line": line_number})
        if not isinstance(data, dict):
            raise ValidationError("Manifest line is not an object", {"line": line_number})
        try:
            record = TrailerRecord.model_validate(data)
        except TrailersmithError as e:
            raise ValidationError(e.message, {**e.details, "line": line_number})
        except PydanticValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(part) for part in first["loc"])
            raise ValidationError(f"Invalid field '{where}': {first['msg']}", {"line": line_number})
        if record.id in seen:
            raise ValidationError(f"Duplicate trailer id '{record.id}'", {"line": line_number})
        seen.add(record.id)
        records.append(record)
    return records


def serialize_manifest(records: Iterable[TrailerRecord]) -> str:
    return "".join(record.to_json() + "\n" for record in records)


@handle_errors(error_type=StorageError)
def read_manifest(path: Union[str, Path]) -> List[TrailerRecord]:
    return parse_manifest(Path(path).read_bytes())


@handle_errors(error_type=StorageError)
def write_manifest(path: Union[str, Path], records: Iterable[TrailerRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_manifest(records), encoding="utf-8")


def resolve_path(manifest_path: Union[str, Path], relative: str) -> Path:
    """Paths inside a manifest are relative to the manifest's directory."""
    candidate = Path(relative)
    if candidate.is_absolute():
        return candidate
    return Path(manifest_path).parent / candidate


# Boundary files

def parse_boundary_rows(content: str) -> Dict[str, List[Tuple[int, int]]]:
    """Group `trailer_id,start_frame,end_frame` rows by trailer id."""
    rows: Dict[str, List[Tuple[int, int]]] = {}
    for line_number, row in enumerate(csv.reader(io.StringIO(content)), start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 3:
            raise ValidationError("Boundary row needs 3 fields", {"line": line_number})
        trailer_id, start, end = (cell.strip() for cell in row)
        try:
            rows.setdefault(trailer_id, []).append((int(start), int(end)))
        except ValueError:
            raise ValidationError("Boundary frames must be integers", {"line": line_number})
    return rows


@handle_errors(error_type=StorageError)
def read_boundary_file(path: Union[str, Path]) -> Dict[str, List[Tuple[int, int]]]:
    return parse_boundary_rows(Path(path).read_text(encoding="utf-8"))


@handle_errors(error_type=StorageError)
def write_boundary_file(path: Union[str, Path], shots_by_trailer: Dict[str, Sequence]) -> None:
    """Write shots (anything with start_frame/end_frame) in trailer insertion order."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for trailer_id, shots in shots_by_trailer.items():
        for shot in shots:
            writer.writerow([trailer_id, shot.start_frame, shot.end_frame])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")


# Split files

@dataclass
class SplitAssignment:
    """Subset of every trailer id in one fold."""
    fold: int
    subsets: Dict[str, str] = field(default_factory=dict)

    def ids(self, subset: str) -> List[str]:
        if subset not in SUBSETS:
            raise ValidationError(f"Unknown subset '{subset}'")
        return [trailer_id for trailer_id, s in self.subsets.items() if s == subset]

    def sizes(self) -> Dict[str, int]:
        return {subset: len(self.ids(subset)) for subset in SUBSETS}


def parse_split_rows(content: str) -> List[SplitAssignment]:
    folds: Dict[int, SplitAssignment] = {}
    for line_number, row in enumerate(csv.reader(io.StringIO(content)), start=1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 3:
            raise ValidationError("Split row needs 3 fields", {"line": line_number})
        trailer_id, fold, subset = (cell.strip() for cell in row)
        try:
            fold_number = int(fold)
        except ValueError:
            raise ValidationError("Fold must be an integer", {"line": line_number})
        if subset not in SUBSETS:
            raise ValidationError(f"Unknown subset '{subset}'", {"line": line_number})
        assignment = folds.setdefault(fold_number, SplitAssignment(fold=fold_number))
        if trailer_id in assignment.subsets:
            raise ValidationError(
                f"Trailer '{trailer_id}' assigned twice in fold {fold_number}", {"line": line_number}
            )
        assignment.subsets[trailer_id] = subset
    return [folds[k] for k in sorted(folds)]


@handle_errors(error_type=StorageError)
def read_split_file(path: Union[str, Path]) -> List[SplitAssignment]:
    return parse_split_rows(Path(path).read_text(encoding="utf-8"))


@handle_errors(error_type=StorageError)
def write_split_file(path: Union[str, Path], assignments: Sequence[SplitAssignment]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for assignment in assignments:
        for trailer_id, subset in assignment.subsets.items():
            writer.writerow([trailer_id, assignment.fold, subset])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buffer.getvalue(), encoding="utf-8")
