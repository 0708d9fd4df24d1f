"""
Tests for optical density conversion, sparse NMF stain estimation and normalization.
"""

import math
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest

from histoforge.config import SnmfParams
from histoforge.exceptions import (
    HistoforgeError, ImageError, InsufficientTissueError, RankDeficientStainMatrixError, StainError
)
from histoforge.stain import (
    ODMatrix, StainModel, cosine_similarity, estimate_stain_model, factorize, fit_stain_model,
    normalize_to_target, od_to_rgb, order_stains, rgb_to_od, snmf_objective, solve_concentrations
)
from histoforge.synthetic import REFERENCE_STAINS, random_stain_matrix, render, synthetic_stain_image


def _assert_nonincreasing(testcase, history):
    for before, after in zip(history, history[1:]):
        testcase.assertLessEqual(after, before + 1e-9 * max(1.0, abs(before)))


class TestOpticalDensity(unittest.TestCase):
    """Beer-Lambert conversions."""

    def test_white_is_zero(self):
        od = rgb_to_od(np.full((2, 2, 3), 255, dtype=np.uint8), beta=0.0)
        np.testing.assert_array_equal(od.values, 0.0)

    def test_unit_density(self):
        image = np.full((1, 1, 3), 255 * math.exp(-1.0))
        od = rgb_to_od(image, beta=0.0)
        np.testing.assert_allclose(od.values, 1.0, atol=1e-12)

    def test_white_image_is_all_background(self):
        od = rgb_to_od(np.full((5, 7, 3), 255, dtype=np.uint8))
        self.assertEqual(od.n_pixels, 0)
        self.assertEqual(od.mask.sum(), 0)

    def test_zero_pixels_are_lifted(self):
        od = rgb_to_od(np.zeros((1, 1, 3), dtype=np.uint8))
        np.testing.assert_allclose(od.values, math.log(255.0))

    def test_bad_illumination(self):
        with self.assertRaises(StainError):
            rgb_to_od(np.zeros((1, 1, 3), dtype=np.uint8), i0=0)

    def test_wrong_layout_is_an_image_error(self):
        with self.assertRaises(ImageError) as ctx:
            rgb_to_od(np.zeros((4, 4), dtype=np.uint8))
        self.assertIsInstance(ctx.exception, HistoforgeError)
        self.assertIn("(4, 4)", str(ctx.exception))

    def test_render_values(self):
        mask = np.ones((1, 2), dtype=bool)
        rendered = od_to_rgb(ODMatrix(values=np.array([[0.0, 1.0]] * 3), mask=mask))
        np.testing.assert_array_equal(rendered[0, 0], [255, 255, 255])
        np.testing.assert_array_equal(rendered[0, 1], [94, 94, 94])

    def test_background_renders_white(self):
        mask = np.array([[True, False]])
        rendered = od_to_rgb(ODMatrix(values=np.full((3, 1), 2.0), mask=mask))
        np.testing.assert_array_equal(rendered[0, 1], [255, 255, 255])

    def test_round_trip_within_one(self):
        rng = np.random.default_rng(0)
        image = rng.integers(1, 256, size=(16, 16, 3)).astype(np.uint8)
        back = od_to_rgb(rgb_to_od(image, beta=0.0))
        self.assertLessEqual(np.abs(back.astype(int) - image.astype(int)).max(), 1)


class TestSolveConcentrations(unittest.TestCase):
    """Non-negative lasso with a fixed stain matrix."""

    def test_exact_recovery_without_penalty(self):
        h = np.array([[0.7], [0.3]])
        v = REFERENCE_STAINS @ h
        recovered = solve_concentrations(v, REFERENCE_STAINS, 0.0, max_iters=1000, rel_tol=0.0)
        np.testing.assert_allclose(recovered, h, atol=1e-6)

    def test_zero_data(self):
        recovered = solve_concentrations(np.zeros((3, 4)), REFERENCE_STAINS, 0.1)
        np.testing.assert_array_equal(recovered, 0.0)

    def test_huge_penalty(self):
        v = REFERENCE_STAINS @ np.array([[1.0, 0.5], [0.2, 0.9]])
        np.testing.assert_array_equal(solve_concentrations(v, REFERENCE_STAINS, 1e6), 0.0)

    def test_parallel_columns_rejected(self):
        column = REFERENCE_STAINS[:, :1]
        with self.assertRaises(RankDeficientStainMatrixError):
            solve_concentrations(np.ones((3, 2)), np.hstack([column, column]), 0.1)

    def test_non_unit_columns_rejected(self):
        with self.assertRaises(StainError):
            solve_concentrations(np.ones((3, 2)), REFERENCE_STAINS * 2.0, 0.1)


class TestStainEstimation(unittest.TestCase):
    """Sparse NMF recovery on forward-generated images."""

    def test_ordering_puts_blue_first(self):
        w = REFERENCE_STAINS[:, ::-1]
        ordered, h = order_stains(w, np.array([[1.0], [2.0]]))
        np.testing.assert_array_equal(ordered, REFERENCE_STAINS)
        np.testing.assert_array_equal(h, [[2.0], [1.0]])

    def test_recovers_stain_matrix(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            w_true = random_stain_matrix(rng)
            image, _ = synthetic_stain_image(w_true, size=(48, 48), seed=trial)
            model = estimate_stain_model(image, SnmfParams(seed=trial, rel_tol=1e-6, max_iters=500))
            for k in range(2):
                self.assertGreaterEqual(cosine_similarity(model.w[:, k], w_true[:, k]), 0.99)
            np.testing.assert_allclose(np.linalg.norm(model.w, axis=0), 1.0, atol=1e-9)
            self.assertTrue(np.all(model.w >= 0))

    def test_objective_is_nonincreasing(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(40, 40), seed=1)
        od = rgb_to_od(image)
        fac = factorize(od.values, SnmfParams(max_iters=60, rel_tol=0.0))
        self.assertEqual(len(fac.objective_history), fac.n_iters + 1)
        _assert_nonincreasing(self, fac.objective_history)
        self.assertAlmostEqual(fac.objective_history[-1], snmf_objective(od.values, fac.w, fac.h, 0.1), places=6)

    def test_reconstruction_error(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(40, 40), seed=2)
        params = SnmfParams()
        _, od, h, fac = fit_stain_model(image, params)
        relative = np.linalg.norm(od.values - fac.w @ h) / np.linalg.norm(od.values)
        self.assertLessEqual(relative, 0.05)

    def test_percentiles_use_concentration_penalty(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(40, 40), seed=2)
        params = SnmfParams(lambda_sparse=0.1, lambda_concentration=0.01)
        model, od, h, fac = fit_stain_model(image, params)
        resolved = solve_concentrations(od, fac.w, 0.01, params.max_iters, params.rel_tol)
        np.testing.assert_array_equal(h, resolved)
        np.testing.assert_allclose(model.p99, np.maximum(np.percentile(resolved, 99.0, axis=1), 1e-6))

    def test_single_stain_image(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(40, 40), seed=3, single_stain=True)
        fac = factorize(rgb_to_od(image, beta=0.05).values, SnmfParams(beta=0.05))
        best = max(cosine_similarity(fac.w[:, k], REFERENCE_STAINS[:, 0]) for k in range(2))
        self.assertGreaterEqual(best, 0.99)

    def test_seeded_estimation_is_deterministic(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(32, 32), seed=4)
        a = estimate_stain_model(image, SnmfParams(seed=9))
        b = estimate_stain_model(image, SnmfParams(seed=9))
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.p99, b.p99)

    def test_too_little_tissue(self):
        image = np.full((20, 20, 3), 255, dtype=np.uint8)
        image[:5, :5] = 60
        with self.assertRaises(InsufficientTissueError):
            estimate_stain_model(image)

    def test_all_background_for_estimation(self):
        with self.assertRaises(InsufficientTissueError):
            estimate_stain_model(np.full((20, 20, 3), 255, dtype=np.uint8))


class TestNormalization(unittest.TestCase):
    """Re-rendering in a target stain basis."""

    def test_self_normalization(self):
        image, _ = synthetic_stain_image(REFERENCE_STAINS, size=(48, 48), seed=6)
        params = SnmfParams()
        model = estimate_stain_model(image, params)
        out = normalize_to_target(image, model, params)
        self.assertEqual(out.shape, image.shape)
        self.assertLessEqual(np.abs(out.astype(int) - image.astype(int)).max(), 8)

    def test_white_source_stays_white(self):
        target, _ = synthetic_stain_image(REFERENCE_STAINS, size=(32, 32), seed=7)
        model = estimate_stain_model(target)
        white = np.full((10, 12, 3), 255, dtype=np.uint8)
        np.testing.assert_array_equal(normalize_to_target(white, model), white)

    def test_background_passes_through(self):
        target, _ = synthetic_stain_image(REFERENCE_STAINS, size=(32, 32), seed=8)
        model = estimate_stain_model(target)
        source, _ = synthetic_stain_image(random_stain_matrix(np.random.default_rng(1)), size=(32, 32), seed=9)
        source[:4] = 250
        out = normalize_to_target(source, model)
        np.testing.assert_array_equal(out[:4], source[:4])

    def test_same_concentrations_different_stains(self):
        rng = np.random.default_rng(12)
        params = SnmfParams(beta=0.05, rel_tol=1e-7, max_iters=1000)
        target, _ = synthetic_stain_image(REFERENCE_STAINS, size=(48, 48), seed=13)
        target_model = estimate_stain_model(target, params)

        _, h = synthetic_stain_image(REFERENCE_STAINS, size=(48, 48), seed=14)
        first = render(random_stain_matrix(rng), h, (48, 48))
        second = render(random_stain_matrix(rng), h, (48, 48))
        diff = np.abs(normalize_to_target(first, target_model, params).astype(int)
                      - normalize_to_target(second, target_model, params).astype(int))
        self.assertLessEqual(np.percentile(diff, 99), 2)
        self.assertLessEqual(diff.mean(), 1.0)

    def test_normalized_image_takes_target_stains(self):
        params = SnmfParams(beta=0.05, rel_tol=1e-7, max_iters=1000)
        target, _ = synthetic_stain_image(REFERENCE_STAINS, size=(48, 48), seed=15)
        target_model = estimate_stain_model(target, params)
        source, _ = synthetic_stain_image(random_stain_matrix(np.random.default_rng(3)), size=(48, 48), seed=16)
        renormalized = estimate_stain_model(normalize_to_target(source, target_model, params), params)
        for k in range(2):
            self.assertGreaterEqual(cosine_similarity(renormalized.w[:, k], target_model.w[:, k]), 0.98)


class TestStainModel(unittest.TestCase):
    """Stain model validation and JSON persistence."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_json_persistence(self):
        model = StainModel(w=REFERENCE_STAINS.copy(), p99=np.array([1.2, 0.8]), params=SnmfParams(seed=3))
        loaded = StainModel.load_json(model.save_json(self.temp_dir / "model.json"))
        np.testing.assert_array_equal(loaded.w, model.w)
        np.testing.assert_array_equal(loaded.p99, model.p99)
        self.assertEqual(loaded.params, model.params)
        self.assertEqual(len(model.to_dict()["w"]), 6)

    def test_invalid_models(self):
        with self.assertRaises(StainError):
            StainModel(w=REFERENCE_STAINS * 2, p99=np.array([1.0, 1.0]))
        with self.assertRaises(StainError):
            StainModel(w=REFERENCE_STAINS.copy(), p99=np.array([1.0, 0.0]))


@pytest.mark.slow
class TestStainRecoverySweep(unittest.TestCase):
    """Recovery, monotonicity and self-normalization over fifty random stain matrices."""

    def test_fifty_images(self):
        rng = np.random.default_rng(2024)
        for trial in range(50):
            w_true = random_stain_matrix(rng)
            image, _ = synthetic_stain_image(w_true, size=(64, 64), seed=trial)
            params = SnmfParams(seed=trial, rel_tol=1e-6, max_iters=500)
            model, od, _, fac = fit_stain_model(image, params)
            _assert_nonincreasing(self, fac.objective_history)
            for k in range(2):
                self.assertGreaterEqual(cosine_similarity(model.w[:, k], w_true[:, k]), 0.99, f"trial {trial}")
            out = normalize_to_target(image, model, params)
            self.assertLessEqual(np.abs(out.astype(int) - image.astype(int)).max(), 8, f"trial {trial}")


if __name__ == '__main__':
    unittest.main()
