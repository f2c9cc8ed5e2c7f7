"""Tests for genre sets, manifests, boundary files and split files."""

import shutil
import tempfile
import unittest
from pathlib import Path

import pytest

from trailersmith.errors import StorageError, ValidationError
from trailersmith.genres import GENRES, NUM_GENRES, GenreSet, label_matrix
from trailersmith.records import (
    SplitAssignment,
    parse_boundary_rows,
    parse_manifest,
    parse_split_rows,
    read_manifest,
    read_split_file,
    resolve_path,
    serialize_manifest,
    write_boundary_file,
    write_manifest,
    write_split_file,
)
from trailersmith.segmenter import Shot


def test_vocabulary_is_fixed():
    assert NUM_GENRES == 10
    assert GENRES[0] == "action" and GENRES[-1] == "thriller"
    assert GENRES.index("science-fiction") == 8


def test_genre_set_from_names_and_vector():
    genres = GenreSet.from_names(["thriller", "Drama"])
    assert genres.names == ["drama", "thriller"]
    assert len(genres) == 2
    assert "drama" in genres and "comedy" not in genres
    vector = genres.to_vector()
    assert vector.shape == (10,)
    assert vector[4] == 1.0 and vector[9] == 1.0 and vector.sum() == 2.0
    assert GenreSet.from_vector(vector) == genres
    assert str(genres) == "drama|thriller"


def test_unknown_genre_is_rejected():
    with pytest.raises(ValidationError):
        GenreSet.from_names(["western"])


def test_label_matrix_rows_follow_input_order():
    y = label_matrix([GenreSet.from_names(["action"]), GenreSet.from_names(["comedy", "romance"])])
    assert y.shape == (2, 10)
    assert y[0].nonzero()[0].tolist() == [0]
    assert y[1].nonzero()[0].tolist() == [2, 7]


def test_parse_manifest_single_line():
    line = '{"id":"t1","feature_path":"t1.dvtf","genres":["drama","thriller"],"fps":24,"duration_frames":2928}'
    records = parse_manifest(line.encode("utf-8"))
    assert len(records) == 1
    record = records[0]
    assert record.id == "t1"
    assert record.genres == GenreSet.from_names(["drama", "thriller"])
    assert record.fps == 24
    assert record.duration_frames == 2928
    assert record.duration_seconds == pytest.approx(122.0)


def test_parse_manifest_empty_file():
    assert parse_manifest(b"") == []
    assert parse_manifest(b"\n\n") == []


def test_parse_manifest_unknown_genre():
    line = '{"id":"t1","feature_path":"t1.dvtf","genres":["western"],"fps":24,"duration_frames":10}'
    with pytest.raises(ValidationError):
        parse_manifest(line)


def test_parse_manifest_empty_genre_list():
    line = '{"id":"t1","feature_path":"t1.dvtf","genres":[],"fps":24,"duration_frames":10}'
    with pytest.raises(ValidationError):
        parse_manifest(line)


def test_parse_manifest_reports_line_number():
    good = '{"id":"t1","feature_path":"t1.dvtf","genres":["drama"],"fps":24,"duration_frames":10}'
    with pytest.raises(ValidationError) as exc:
        parse_manifest(good + "\n{not json\n")
    assert exc.value.details["line"] == 2


def test_parse_manifest_rejects_duplicates_and_missing_sources():
    line = '{"id":"t1","feature_path":"t1.dvtf","genres":["drama"],"fps":24,"duration_frames":10}'
    with pytest.raises(ValidationError):
        parse_manifest(line + "\n" + line)
    with pytest.raises(ValidationError):
        parse_manifest('{"id":"t1","genres":["drama"],"fps":24,"duration_frames":10}')
    with pytest.raises(ValidationError):
        parse_manifest('{"id":"t1","feature_path":"a","genres":["drama"],"fps":0,"duration_frames":10}')


def test_rational_frame_rate():
    records = parse_manifest('{"id":"t","video_path":"t.npy","genres":["horror"],"fps":"24000/1001",'
                             '"duration_frames":10}')
    assert records[0].fps == pytest.approx(23.976, abs=1e-3)


def test_manifest_serialization_preserves_order(make_record):
    records = [make_record("b", ["drama"]), make_record("a", ["action", "comedy"])]
    text = serialize_manifest(records)
    assert text.splitlines()[0].startswith('{"id":"b"')
    assert parse_manifest(text) == records


def test_boundary_rows_grouped_by_trailer():
    rows = parse_boundary_rows("t1,0,30\nt1,30,54\n\nt2,0,10\n")
    assert rows == {"t1": [(0, 30), (30, 54)], "t2": [(0, 10)]}
    with pytest.raises(ValidationError):
        parse_boundary_rows("t1,0\n")
    with pytest.raises(ValidationError):
        parse_boundary_rows("t1,a,b\n")


def test_split_rows():
    folds = parse_split_rows("a,1,train\nb,1,test\na,2,val\n")
    assert [f.fold for f in folds] == [1, 2]
    assert folds[0].ids("train") == ["a"]
    assert folds[0].sizes() == {"train": 1, "val": 0, "test": 1}
    with pytest.raises(ValidationError):
        parse_split_rows("a,1,holdout\n")
    with pytest.raises(ValidationError):
        parse_split_rows("a,1,train\na,1,test\n")


def test_resolve_path_relative_to_manifest(tmp_path):
    manifest = tmp_path / "data" / "manifest.jsonl"
    assert resolve_path(manifest, "features/x.dvtf") == tmp_path / "data" / "features" / "x.dvtf"
    absolute = str(tmp_path / "elsewhere.dvtf")
    assert resolve_path(manifest, absolute) == Path(absolute)


class TestArtifactFiles(unittest.TestCase):
    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_manifest_file_round_trip(self):
        records = parse_manifest('{"id":"t1","feature_path":"t1.dvtf","genres":["drama"],"fps":24,'
                                 '"duration_frames":10}')
        path = self.temp_dir / "nested" / "manifest.jsonl"
        write_manifest(path, records)
        self.assertEqual(read_manifest(path), records)

    def test_missing_manifest_is_storage_error(self):
        with self.assertRaises(StorageError):
            read_manifest(self.temp_dir / "absent.jsonl")

    def test_boundary_file_uses_shot_frames(self):
        path = self.temp_dir / "boundaries.csv"
        write_boundary_file(path, {"t1": [Shot(0, 30), Shot(30, 54)]})
        self.assertEqual(path.read_text(), "t1,0,30\nt1,30,54\n")

    def test_split_file_round_trip(self):
        folds = [SplitAssignment(fold=1, subsets={"a": "train", "b": "val"}),
                 SplitAssignment(fold=2, subsets={"a": "test", "b": "train"})]
        path = self.temp_dir / "splits.csv"
        write_split_file(path, folds)
        loaded = read_split_file(path)
        self.assertEqual([f.subsets for f in loaded], [f.subsets for f in folds])


if __name__ == "__main__":
    unittest.main()
