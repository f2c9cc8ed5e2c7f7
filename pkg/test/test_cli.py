"""Command-line tests on a tiny synthetic dataset."""

import shutil
import tempfile
import unittest
from pathlib import Path

import toml
import yaml
from click.testing import CliRunner

from trailersmith.cli import cli
from trailersmith.errors import EXIT_IO, EXIT_OK, EXIT_VALIDATION
from trailersmith.records import read_manifest, read_split_file

TINY_CONFIG = {
    "experiment": {"folds": [1], "seed": 1},
    "snippets": {"clips_per_snippet": 5},
    "model": {"d": 8, "blocks": 1, "heads": 2, "dropout": 0.0},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.001},
    "synth": {"features": {"n_trailers": 30, "b": 16, "clips_min": 5, "clips_max": 12}},
}


class TestCli(unittest.TestCase):
    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.runner = CliRunner()
        self.config = self.temp_dir / "trailersmith.toml"
        self.config.write_text(toml.dumps(TINY_CONFIG))

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def invoke(self, *args):
        return self.runner.invoke(cli, ["--config", str(self.config), *args], obj={})

    def synth(self, *extra):
        out = self.temp_dir / "data"
        result = self.invoke("synth", "features", "--out", str(out), *extra)
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        return out / "manifest.jsonl"

    def test_init_refuses_to_overwrite(self):
        path = self.temp_dir / "new.toml"
        result = self.runner.invoke(cli, ["init", str(path)], obj={})
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertTrue(path.exists())
        result = self.runner.invoke(cli, ["init", str(path)], obj={})
        self.assertEqual(result.exit_code, EXIT_VALIDATION)
        result = self.runner.invoke(cli, ["init", str(path), "--force"], obj={})
        self.assertEqual(result.exit_code, EXIT_OK)

    def test_synth_features_uses_config(self):
        manifest = self.synth("--two-streams")
        records = read_manifest(manifest)
        self.assertEqual(len(records), 30)
        self.assertTrue((manifest.parent / "stream2" / "manifest.jsonl").exists())

    def test_synth_video(self):
        out = self.temp_dir / "videos"
        result = self.invoke("synth", "video", "--out", str(out), "--n", "2")
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertEqual(len(read_manifest(out / "manifest.jsonl")), 2)
        self.assertTrue((out / "boundaries.csv").exists())

    def test_split_and_stats(self):
        manifest = self.synth()
        splits = self.temp_dir / "splits.csv"
        result = self.invoke("split", "--manifest", str(manifest), "--out", str(splits), "--folds", "1,2")
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        folds = read_split_file(splits)
        self.assertEqual([f.fold for f in folds], [1, 2])
        self.assertEqual(folds[0].sizes(), {"train": 21, "val": 3, "test": 6})

        stats_dir = self.temp_dir / "stats"
        result = self.invoke("stats", "--manifest", str(manifest), "--splits", str(splits), "--out", str(stats_dir))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        report = yaml.safe_load((stats_dir / "statistics.yaml").read_text())
        self.assertEqual(report["examples"], 30)
        self.assertIn("fold2", report["folds"])
        self.assertTrue((stats_dir / "cooccurrence.csv").exists())

    def test_train_eval_and_report(self):
        manifest = self.synth()
        run_dir = self.temp_dir / "run"
        result = self.invoke("train", "--manifest", str(manifest), "--out", str(run_dir))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertTrue((run_dir / "fold1" / "model.dvtm").exists())
        self.assertEqual(len((run_dir / "fold1" / "train_log.jsonl").read_text().splitlines()), 2)

        result = self.invoke("eval", "--manifest", str(manifest), "--run", str(run_dir))
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        report = yaml.safe_load((run_dir / "report.yaml").read_text())
        self.assertEqual(set(report["metrics"]), {"micro_ap", "macro_ap", "weighted_ap", "sample_ap"})
        self.assertEqual(report["meta"]["clips_per_snippet"], 5)
        self.assertTrue((run_dir / "predictions_fold1.csv").exists())

        result = self.runner.invoke(cli, ["report", str(run_dir / "report.yaml"), "--genres"], obj={})
        self.assertEqual(result.exit_code, EXIT_OK, result.output)
        self.assertIn("mAP", result.output)

    def test_eval_without_models_is_a_validation_error(self):
        manifest = self.synth()
        run_dir = self.temp_dir / "empty_run"
        run_dir.mkdir()
        result = self.invoke("eval", "--manifest", str(manifest), "--run", str(run_dir))
        self.assertEqual(result.exit_code, EXIT_VALIDATION)

    def test_bad_manifest_is_a_validation_error(self):
        manifest = self.temp_dir / "bad.jsonl"
        manifest.write_text('{"id":"t1","feature_path":"t1.dvtf","genres":["western"],"fps":24,"duration_frames":1}\n')
        result = self.invoke("stats", "--manifest", str(manifest))
        self.assertEqual(result.exit_code, EXIT_VALIDATION)

    def test_missing_feature_file_is_a_storage_error(self):
        manifest = self.synth()
        (manifest.parent / "features" / "t00003.dvtf").unlink()
        result = self.invoke("train", "--manifest", str(manifest), "--out", str(self.temp_dir / "run"))
        self.assertEqual(result.exit_code, EXIT_IO)

    def test_invalid_model_width_is_a_validation_error(self):
        manifest = self.synth()
        result = self.invoke("train", "--manifest", str(manifest), "--out", str(self.temp_dir / "run"), "--d", "32")
        self.assertEqual(result.exit_code, EXIT_VALIDATION)


if __name__ == "__main__":
    unittest.main()
