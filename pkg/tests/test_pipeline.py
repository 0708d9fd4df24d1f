"""
Tests for the stage functions and the pipeline orchestrator.
"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from histoforge.augment import ProvenanceRecord, write_provenance
from histoforge.config import HeadSettings, RunConfig, SnmfParams, TrainConfig, load_run_config
from histoforge.dataset import DatasetManifest, SampleRecord, read_manifest_csv, scan_dataset, write_manifest_csv
from histoforge.exceptions import HistoforgeError, StageError
from histoforge.pipeline import (
    Pipeline, collect_feature_inputs, evaluate_stage, features_stage, file_sha256, ingest_stage,
    normalize_stage, run_pipeline, split_stage, train_stage
)
from histoforge.synthetic import FIXTURE_ENCODER, write_fixture
from histoforge.types import CLASS_ORDER, ClassLabel, Split, save_image
from histoforge.vit import init_random_weights, read_features, save_weights, write_features


def _feature_file(path, dim=8, seed=0):
    """Clustered features with train / validation / test originals plus augmented train rows."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((5, dim)) * 3
    features, records = {}, {}
    for label in CLASS_ORDER:
        for split, count in (("train", 20), ("validation", 5), ("test", 5)):
            for i in range(count):
                sid = f"{label.name}-{split}-{i}"
                features[sid] = centers[label.index] + rng.standard_normal(dim) * 0.3
                records[sid] = {"sample_id": sid, "source": "", "class": label.value, "split": split,
                                "step": "original"}
        sid = f"{label.name}-validation-0"
        features[f"{sid}__HF"] = centers[label.index]
        records[f"{sid}__HF"] = {"sample_id": sid, "source": "", "class": label.value, "split": "validation",
                                 "step": "HF"}
    write_features(path, features, records)
    return path


class TestFixture(unittest.TestCase):
    """The bundled synthetic dataset."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_layout_classifies(self):
        paths = write_fixture(self.temp_dir, per_class=4, size=64)
        manifest = scan_dataset(paths.dataset_root, 40)
        self.assertEqual({label: n for label, n in manifest.class_counts.items()},
                         {label: 4 for label in CLASS_ORDER})
        self.assertEqual(manifest.skipped, ())
        config = load_run_config(paths.config)
        self.assertTrue(Path(config.paths.weights).is_file())
        self.assertEqual(config.train.epochs, 20)


class TestStages(unittest.TestCase):
    """Stage functions run on their own."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_ingest_split_normalize(self):
        paths = write_fixture(self.temp_dir / "fx", per_class=5, size=64)
        out = self.temp_dir / "out"
        manifest = ingest_stage(paths.dataset_root, 40, out / "manifest.csv")
        self.assertEqual(len(manifest), 25)
        splits = split_stage(out / "manifest.csv", 3, out / "splits.csv")
        self.assertEqual((len(splits.train), len(splits.validation), len(splits.test)), (15, 5, 5))

        normalize_stage(paths.target_image, out / "splits.csv", out / "normalized",
                        SnmfParams(max_iters=30, rel_tol=1e-3), jobs=2)
        self.assertTrue((out / "normalized" / "stain_model.json").is_file())
        normalized, normalized_splits = read_manifest_csv(out / "normalized" / "manifest.csv")
        self.assertEqual(normalized_splits.test, splits.test)
        for record in normalized.records:
            self.assertEqual(Path(record.path), out / "normalized" / f"{record.sample_id}.png")
            self.assertTrue(Path(record.path).is_file())

    def test_split_needs_manifest(self):
        with self.assertRaises(HistoforgeError):
            split_stage(self.temp_dir / "absent.csv", 0, self.temp_dir / "splits.csv")

    def test_collect_feature_inputs(self):
        records = tuple(SampleRecord(sid, f"/data/{sid}.png", ClassLabel.BENIGN, 40) for sid in ("a", "b"))
        manifest_path = write_manifest_csv(DatasetManifest(records=records), self.temp_dir / "m.csv")
        provenance = write_provenance([
            ProvenanceRecord("a__original.png", "a", ClassLabel.BENIGN, "original"),
            ProvenanceRecord("a__HF.png", "a", ClassLabel.BENIGN, "HF"),
        ], self.temp_dir / "aug" / "provenance.csv")

        inputs = collect_feature_inputs([provenance, manifest_path])
        self.assertEqual([item.name for item in inputs], ["a__original", "a__HF", "b"])
        self.assertEqual(inputs[1].record()["split"], "train")
        self.assertEqual(inputs[1].path, str(self.temp_dir / "aug" / "a__HF.png"))
        self.assertEqual(inputs[2].record()["split"], "")

    def test_normalize_directory_keeps_same_named_files_apart(self):
        paths = write_fixture(self.temp_dir / "fx", per_class=1, size=64)
        images = sorted(Path(paths.dataset_root).rglob("*.png"))[:2]
        source = self.temp_dir / "src"
        for folder, image in zip(("benign", "malignant"), images):
            (source / folder).mkdir(parents=True)
            shutil.copy(image, source / folder / "img001.png")

        normalize_stage(paths.target_image, source, self.temp_dir / "normalized",
                        SnmfParams(max_iters=30, rel_tol=1e-3))
        for folder in ("benign", "malignant"):
            self.assertTrue((self.temp_dir / "normalized" / folder / "img001.png").is_file())

    def test_nested_augmented_names(self):
        provenance = write_provenance([
            ProvenanceRecord("benign/40X/img001__HF.png", "benign/40X/img001", ClassLabel.BENIGN, "HF"),
            ProvenanceRecord("ductal_carcinoma/40X/img001__HF.png", "ductal_carcinoma/40X/img001",
                             ClassLabel.DUCTAL, "HF"),
        ], self.temp_dir / "aug" / "provenance.csv")
        inputs = collect_feature_inputs([provenance])
        self.assertEqual([item.name for item in inputs],
                         ["benign/40X/img001__HF", "ductal_carcinoma/40X/img001__HF"])

    def test_duplicate_feature_names(self):
        for folder in ("one", "two"):
            save_image(np.zeros((8, 8, 3), dtype=np.uint8), self.temp_dir / folder / "x.png")
        with self.assertRaises(HistoforgeError):
            collect_feature_inputs([self.temp_dir / "one", self.temp_dir / "two"])

    def test_features_from_directory(self):
        weights = self.temp_dir / "vit.hfwt"
        save_weights(init_random_weights(FIXTURE_ENCODER, seed=0), weights)
        rng = np.random.default_rng(0)
        for name in ("p", "q"):
            save_image(rng.integers(0, 256, (100, 120, 3), dtype=np.uint8), self.temp_dir / "imgs" / f"{name}.png")

        count = features_stage(weights, [self.temp_dir / "imgs"], self.temp_dir / "f.bin", jobs=2)
        self.assertEqual(count, 2)
        tensors, records = read_features(self.temp_dir / "f.bin")
        self.assertEqual(sorted(tensors), ["p", "q"])
        self.assertEqual(tensors["p"].shape, (FIXTURE_ENCODER.embed_dim,))
        self.assertEqual(records["p"]["class"], "")

        (self.temp_dir / "empty").mkdir()
        with self.assertRaises(HistoforgeError):
            features_stage(weights, [self.temp_dir / "empty"], self.temp_dir / "g.bin")

    def test_train_and_evaluate(self):
        features = _feature_file(self.temp_dir / "features.bin")
        summary = train_stage(features, None, HeadSettings(), TrainConfig(epochs=10, lr=0.01, batch_size=16),
                              self.temp_dir / "head.hfwt", self.temp_dir / "history.csv",
                              self.temp_dir / "head.best.hfwt")
        self.assertEqual(summary["n_train"], 100)
        self.assertEqual(summary["n_validation"], 25)
        history = pd.read_csv(self.temp_dir / "history.csv")
        self.assertEqual(len(history), 10)
        self.assertLess(history["train_loss"].iloc[-1], history["train_loss"].iloc[0])

        report = evaluate_stage(self.temp_dir / "head.hfwt", features, None, Split.TEST,
                                self.temp_dir / "report.json", {"run": "unit"})
        self.assertGreaterEqual(report.accuracy, 0.9)
        self.assertEqual(report.metadata["n_samples"], 25)
        self.assertEqual(report.metadata["run"], "unit")
        self.assertTrue((self.temp_dir / "report.txt").is_file())


class TestPipeline(unittest.TestCase):
    """Orchestration, stage toggles and failure handling."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.paths = write_fixture(self.temp_dir / "fx", per_class=5, size=64)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _config(self, **updates):
        data = {
            "paths": {"dataset_root": str(self.paths.dataset_root), "weights": str(self.paths.weights),
                      "output_dir": str(self.temp_dir / "run")},
            "stages": {"normalize": False, "augment": False, "features": False, "train": False,
                       "evaluate": False},
        }
        data.update(updates)
        return RunConfig.model_validate(data)

    def test_disabled_stages_are_skipped(self):
        record = run_pipeline(self._config())
        statuses = {stage.name: stage.status for stage in record.stages}
        self.assertEqual(statuses["ingest"], "ok")
        self.assertEqual(statuses["split"], "ok")
        self.assertEqual(statuses["train"], "skipped")
        self.assertTrue(record.succeeded)
        self.assertEqual(set(record.artifacts), {"manifest.csv", "splits.csv"})

        saved = json.loads((self.temp_dir / "run" / "run.json").read_text())
        self.assertEqual(saved["config_hash"], self._config().config_hash())
        self.assertEqual(saved["artifacts"]["splits.csv"], file_sha256(self.temp_dir / "run" / "splits.csv"))

    def test_missing_target_fails_normalize(self):
        config = self._config(stages={"augment": False, "features": False, "train": False, "evaluate": False})
        with self.assertRaises(StageError) as ctx:
            Pipeline(config).run()
        self.assertEqual(ctx.exception.stage, "normalize")
        self.assertIn("[normalize]", str(ctx.exception))

        saved = json.loads((self.temp_dir / "run" / "run.json").read_text())
        self.assertEqual([s["status"] for s in saved["stages"]], ["ok", "ok", "failed"])
        self.assertIn("manifest.csv", saved["artifacts"])

    def test_split_failure_is_tagged(self):
        config = self._config()
        shutil.rmtree(self.paths.dataset_root / "BreaKHis_v1" / "histology_slides" / "breast" / "malignant")
        with self.assertRaises(StageError) as ctx:
            run_pipeline(config)
        self.assertEqual(ctx.exception.stage, "split")


@pytest.mark.slow
class TestEndToEnd(unittest.TestCase):
    """Every stage on the bundled fixture, twice."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_full_run_is_reproducible(self):
        paths = write_fixture(self.temp_dir, per_class=8, seed=0)
        config = load_run_config(paths.config)
        run_dir = Path(config.paths.output_dir)

        first = run_pipeline(config)
        self.assertTrue(first.succeeded)
        report = json.loads((run_dir / "report.json").read_text())
        self.assertEqual(len(report["classes"]), 5)
        self.assertEqual(report["metadata"]["split"], "test")
        self.assertEqual(sum(map(sum, report["confusion"])), 10)

        history = pd.read_csv(run_dir / "history.csv")
        self.assertEqual(len(history), 20)
        self.assertLess(history["train_loss"].iloc[-1], history["train_loss"].iloc[0])

        second = run_pipeline(config)
        self.assertEqual(first.artifacts["report.json"], second.artifacts["report.json"])
        self.assertEqual(first.artifacts["features.bin"], second.artifacts["features.bin"])
        self.assertEqual(first.artifacts["augmented/"], second.artifacts["augmented/"])


if __name__ == '__main__':
    unittest.main()
