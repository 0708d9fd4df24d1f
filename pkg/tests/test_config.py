"""
Tests for run configuration loading and validation.
"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

from histoforge.config import HeadSettings, RunConfig, SnmfParams, TrainConfig, load_run_config, parse_model
from histoforge.exceptions import ConfigurationError


def _minimal():
    return {"paths": {"dataset_root": "data", "weights": "vit.hfwt", "output_dir": "out"}}


class TestRunConfig(unittest.TestCase):
    """JSON run configs."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, data):
        path = self.temp_dir / "run.json"
        path.write_text(json.dumps(data))
        return path

    def test_defaults_and_relative_paths(self):
        config = load_run_config(self._write(_minimal()))
        self.assertEqual(config.magnification, 40)
        self.assertEqual(config.snmf, SnmfParams())
        self.assertEqual(config.checkpoint, "final")
        self.assertEqual(Path(config.paths.dataset_root), self.temp_dir.resolve() / "data")
        self.assertIsNone(config.paths.target_image)

    def test_absolute_paths_kept(self):
        data = _minimal()
        data["paths"]["weights"] = "/models/vit.hfwt"
        self.assertEqual(load_run_config(self._write(data)).paths.weights, "/models/vit.hfwt")

    def test_unknown_key_is_named(self):
        data = _minimal()
        data["train"] = {"epochz": 3}
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(self._write(data))
        self.assertIn("train.epochz", str(ctx.exception))

    def test_bad_magnification(self):
        data = _minimal()
        data["magnification"] = 50
        with self.assertRaises(ConfigurationError) as ctx:
            load_run_config(self._write(data))
        self.assertIn("magnification", str(ctx.exception))

    def test_missing_file_and_bad_json(self):
        with self.assertRaises(ConfigurationError):
            load_run_config(self.temp_dir / "absent.json")
        path = self.temp_dir / "broken.json"
        path.write_text("{")
        with self.assertRaises(ConfigurationError):
            load_run_config(path)

    def test_seed_range(self):
        data = _minimal()
        data["seed"] = 2 ** 64 - 1
        self.assertEqual(load_run_config(self._write(data)).seed, 2 ** 64 - 1)
        data["seed"] = 2 ** 64
        with self.assertRaises(ConfigurationError):
            load_run_config(self._write(data))

    def test_seed_propagates(self):
        config = RunConfig.model_validate({**_minimal(), "seed": 17})
        self.assertEqual(config.stage_snmf().seed, 17)
        self.assertEqual(config.stage_train().seed, 17)


class TestConfigHash(unittest.TestCase):
    """The config hash tracks every field."""

    def test_hash_changes_with_any_field(self):
        base = RunConfig.model_validate(_minimal())
        self.assertEqual(base.config_hash(), RunConfig.model_validate(_minimal()).config_hash())
        variants = [
            {"seed": 1},
            {"jobs": 2},
            {"snmf": {"beta": 0.2}},
            {"train": {"lr": 0.01}},
            {"head": {"variant": "two"}},
            {"stages": {"augment": False}},
            {"checkpoint": "best"},
        ]
        hashes = {base.config_hash()}
        for update in variants:
            hashes.add(RunConfig.model_validate({**_minimal(), **update}).config_hash())
        self.assertEqual(len(hashes), len(variants) + 1)


class TestStageModels(unittest.TestCase):
    """Bounds on individual stage settings."""

    def test_zero_learning_rate_allowed(self):
        self.assertEqual(TrainConfig(lr=0.0).lr, 0.0)

    def test_invalid_values(self):
        with self.assertRaises(ConfigurationError):
            parse_model(TrainConfig, {"epochs": 0}, "train config")
        with self.assertRaises(ConfigurationError):
            parse_model(HeadSettings, {"dropout_p": 1.0}, "head settings")
        with self.assertRaises(ConfigurationError):
            parse_model(SnmfParams, {"r": 3}, "stain parameters")

    def test_frozen(self):
        with self.assertRaises(Exception):
            TrainConfig().lr = 0.5


if __name__ == '__main__':
    unittest.main()
