"""
Tests for the tensor container, encoder weight loading and feature files.
"""

import shutil
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from histoforge.exceptions import (
    ChecksumMismatchError, MissingTensorError, NonFiniteTensorError, ShapeMismatchError,
    TruncatedContainerError, UnknownTensorError, WeightContainerError
)
from histoforge.vit import (
    VitConfig, VitWeights, decode_container, encode_container, init_random_weights, load_weights,
    read_container, read_features, save_weights, write_container, write_features
)
from histoforge.vit.container import ALIGNMENT, MAGIC


class TestContainerFormat(unittest.TestCase):
    """Byte layout and structural errors."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.tensors = {
            "a": rng.standard_normal((3, 5)).astype(np.float32),
            "b": rng.standard_normal(7).astype(np.float32),
            "c": np.array(2.5, dtype=np.float32),
        }

    def test_bit_exact_with_aligned_offsets(self):
        data = encode_container(self.tensors, {"note": "x"})
        self.assertEqual(data[:8], MAGIC)
        container = decode_container(data)
        self.assertEqual(list(container.tensors), ["a", "b", "c"])
        for name, array in self.tensors.items():
            self.assertEqual(container.tensors[name].shape, array.shape)
            self.assertEqual(container.tensors[name].tobytes(), array.tobytes())
        self.assertEqual(container.metadata["note"], "x")
        self.assertEqual(len(container.metadata["payload_sha256"]), 64)

        header_len = struct.unpack("<I", data[8:12])[0]
        self.assertIn(b'"offset":64', data[12:12 + header_len])
        self.assertEqual(ALIGNMENT, 64)

    def test_encoding_is_deterministic(self):
        self.assertEqual(encode_container(self.tensors), encode_container(dict(self.tensors)))

    def test_bad_magic(self):
        data = b"XXXXXXXX" + encode_container(self.tensors)[8:]
        with self.assertRaises(WeightContainerError):
            decode_container(data)

    def test_too_short(self):
        with self.assertRaises(TruncatedContainerError):
            decode_container(MAGIC + b"\x01")

    def test_truncated_payload_names_tensor(self):
        data = encode_container(self.tensors)
        with self.assertRaises(TruncatedContainerError) as ctx:
            decode_container(data[:-2])
        self.assertIn("c", str(ctx.exception))

    def test_truncated_header(self):
        data = encode_container(self.tensors)
        with self.assertRaises(TruncatedContainerError):
            decode_container(data[:20])

    def test_checksum_mismatch(self):
        data = bytearray(encode_container(self.tensors))
        data[-1] ^= 0x01
        with self.assertRaises(ChecksumMismatchError):
            decode_container(bytes(data))

    def test_header_not_json(self):
        garbage = b"{not json"
        with self.assertRaises(WeightContainerError):
            decode_container(MAGIC + struct.pack("<I", len(garbage)) + garbage)

    def test_reserved_name(self):
        with self.assertRaises(WeightContainerError):
            encode_container({"__metadata__": np.zeros(1)})


class TestWeights(unittest.TestCase):
    """Loading and validating encoder weights."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.config = VitConfig.toy()
        self.weights = init_random_weights(self.config, seed=1)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, tensors):
        path = self.temp_dir / "w.hfwt"
        write_container(path, tensors, {"config": self.config.model_dump()})
        return path

    def test_save_and_load(self):
        path = self.temp_dir / "vit.hfwt"
        sha = save_weights(self.weights, path)
        self.assertEqual(len(sha), 64)
        loaded = load_weights(path)
        self.assertEqual(loaded.config, self.config)
        for name, array in self.weights.tensors.items():
            np.testing.assert_array_equal(loaded[name], array)

    def test_missing_tensor(self):
        tensors = dict(self.weights.tensors)
        del tensors["final_ln.b"]
        with self.assertRaises(MissingTensorError) as ctx:
            load_weights(self._write(tensors))
        self.assertIn("final_ln.b", str(ctx.exception))

    def test_unknown_tensor(self):
        tensors = dict(self.weights.tensors)
        tensors["head.w"] = np.zeros((2, 2), dtype=np.float32)
        with self.assertRaises(UnknownTensorError) as ctx:
            load_weights(self._write(tensors))
        self.assertIn("head.w", str(ctx.exception))

    def test_shape_mismatch(self):
        tensors = dict(self.weights.tensors)
        tensors["pos"] = np.zeros((3, 32), dtype=np.float32)
        with self.assertRaises(ShapeMismatchError) as ctx:
            load_weights(self._write(tensors))
        self.assertIn("pos", str(ctx.exception))

    def test_non_finite(self):
        tensors = dict(self.weights.tensors)
        bad = tensors["cls"].copy()
        bad[3] = np.nan
        tensors["cls"] = bad
        with self.assertRaises(NonFiniteTensorError) as ctx:
            load_weights(self._write(tensors))
        self.assertIn("cls", str(ctx.exception))

    def test_explicit_config_overrides_metadata(self):
        with self.assertRaises(MissingTensorError):
            load_weights(self._write(dict(self.weights.tensors)), VitConfig.toy(n_blocks=3))

    def test_missing_file(self):
        with self.assertRaises(WeightContainerError):
            read_container(self.temp_dir / "absent.hfwt")

    def test_direct_shape_check(self):
        tensors = dict(self.weights.tensors)
        tensors["patch.proj.b"] = np.zeros(5, dtype=np.float32)
        with self.assertRaises(ShapeMismatchError):
            VitWeights(config=self.config, tensors=tensors)


class TestFeatureFiles(unittest.TestCase):
    """Per-image feature containers with provenance records."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_write_and_read(self):
        features = {"x": np.arange(4, dtype=np.float32), "y": np.ones(4, dtype=np.float32)}
        records = {
            "x": {"sample_id": "x", "source": "a.png", "class": "Benign", "split": "train", "step": "original"},
            "y": {"sample_id": "y", "source": "b.png", "class": None, "split": "", "step": "original"},
        }
        path = self.temp_dir / "features.bin"
        write_features(path, features, records)
        loaded, loaded_records = read_features(path)
        np.testing.assert_array_equal(loaded["x"], features["x"])
        self.assertEqual(loaded_records, records)
        self.assertEqual(read_container(path).metadata["feature_dim"], 4)

    def test_feature_without_record(self):
        with self.assertRaises(WeightContainerError):
            write_features(self.temp_dir / "f.bin", {"x": np.zeros(3)}, {})

    def test_mixed_dimensions(self):
        records = {"x": {}, "y": {}}
        with self.assertRaises(ShapeMismatchError):
            write_features(self.temp_dir / "f.bin", {"x": np.zeros(3), "y": np.zeros(4)}, records)

    def test_non_finite_features(self):
        path = self.temp_dir / "f.bin"
        write_features(path, {"x": np.array([1.0, np.inf])}, {"x": {}})
        with self.assertRaises(NonFiniteTensorError):
            read_features(path)


if __name__ == '__main__':
    unittest.main()
