"""Tests for the synthetic task generators"""

import unittest
from dataclasses import replace

import numpy as np

from pit_operator.position_attention import datasets
from pit_operator.position_attention._shared.errors import ConfigError, ShapeError
from pit_operator.position_attention.datasets import TaskConfig
from pit_operator.position_attention.geometry import Mesh


class TestGaussianRandomFields(unittest.TestCase):
    """Statistics of the circulant-embedding sampler"""

    def test_moments(self):
        grid = Mesh.periodic_grid((32,))
        fields = datasets.grf_1d(grid, length_scale=0.1, seed=0, count=2000)
        self.assertEqual(fields.shape, (2000, 32))
        self.assertLess(abs(fields.mean()), 0.1)
        self.assertLess(abs(fields.var() - 1.0), 0.1)
        lag_one = np.mean(fields * np.roll(fields, 1, axis=1))
        self.assertLess(abs(lag_one - np.exp(-((1.0 / 32) ** 2) / 0.02)), 0.1)

    def test_covariance_at_several_lags(self):
        grid = Mesh.periodic_grid((64,))
        fields = datasets.grf_1d(grid, length_scale=0.1, seed=9, count=1000)
        for lag in (2, 5):
            empirical = np.mean(fields * np.roll(fields, lag, axis=1))
            analytic = np.exp(-((lag / 64.0) ** 2) / (2.0 * 0.1**2))
            self.assertLess(abs(empirical - analytic), 0.1 * analytic, lag)

    def test_variance_scales(self):
        grid = Mesh.periodic_grid((16,))
        unit = datasets.grf_1d(grid, seed=3, count=4)
        scaled = datasets.grf_1d(grid, variance=4.0, seed=3, count=4)
        np.testing.assert_allclose(scaled, 2.0 * unit, atol=1e-12)

    def test_seeded_draws(self):
        grid = Mesh.interior_grid((8, 8))
        a = datasets.grf_2d(grid, seed=1, count=2)
        b = datasets.grf_2d(grid, seed=1, count=2)
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.shape, (2, 64))

    def test_dimension_checks(self):
        with self.assertRaises(ShapeError):
            datasets.grf_1d(Mesh.interior_grid((4, 4)))
        with self.assertRaises(ShapeError):
            datasets.grf_2d(Mesh.periodic_grid((8,)))
        with self.assertRaises(ValueError):
            datasets.grf(Mesh(points=np.zeros((3, 1))))
        with self.assertRaises(ValueError):
            datasets.grf(Mesh.periodic_grid((8,)), length_scale=0.0)


class TestSmoothing(unittest.TestCase):
    """Tests for the periodic Gaussian blur"""

    def setUp(self):
        self.grid = Mesh.periodic_grid((128,))
        self.x = self.grid.points[:, 0]

    def test_constants_are_preserved(self):
        out = datasets.gaussian_smoothing(np.full((2, 128), 3.5), self.grid, 0.1)
        np.testing.assert_allclose(out, 3.5, atol=1e-13)

    def test_narrow_kernel_is_identity(self):
        values = np.random.default_rng(0).standard_normal(128)
        out = datasets.gaussian_smoothing(values, self.grid, 1e-4)
        np.testing.assert_allclose(out, values, atol=1e-12)

    def test_mean_is_preserved(self):
        values = np.random.default_rng(1).standard_normal(128)
        out = datasets.gaussian_smoothing(values, self.grid, 0.05)
        self.assertAlmostEqual(out.mean(), values.mean(), places=12)

    def test_sine_is_damped(self):
        width = 0.05
        out = datasets.gaussian_smoothing(np.sin(2.0 * np.pi * self.x), self.grid, width)
        expected = np.exp(-2.0 * np.pi**2 * width**2) * np.sin(2.0 * np.pi * self.x)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_matches_dense_quadrature(self):
        values = np.random.default_rng(2).standard_normal((2, 128))
        weights = np.empty((128, 128))
        for i in range(128):
            for j in range(128):
                lag = abs(self.x[i] - self.x[j])
                lag = min(lag, 1.0 - lag)
                weights[i, j] = np.exp(-0.5 * (lag / 0.05) ** 2)
            weights[i] /= weights[i].sum()
        out = datasets.gaussian_smoothing(values, self.grid, 0.05)
        np.testing.assert_allclose(out, values @ weights.T, atol=1e-12)

    def test_refinement_converges(self):
        def smooth_at(resolution):
            grid = Mesh.periodic_grid((resolution,))
            x = grid.points[:, 0]
            return datasets.gaussian_smoothing(np.exp(np.sin(2.0 * np.pi * x)), grid, 0.05)

        reference = smooth_at(128)
        errors = [
            np.max(np.abs(smooth_at(r) - reference[:: 128 // r])) for r in (8, 16, 32)
        ]
        self.assertLessEqual(errors[1], errors[0] / 4.0)
        self.assertLessEqual(errors[2], max(errors[1] / 4.0, 1e-12))

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            datasets.gaussian_smoothing(np.ones(128), self.grid, 0.0)
        with self.assertRaises(ValueError):
            datasets.gaussian_smoothing(np.ones(16), Mesh.interior_grid((4, 4)), 0.1)


class TestAdvection(unittest.TestCase):
    """Tests for the Fourier shift"""

    def setUp(self):
        self.grid = Mesh.periodic_grid((64,))
        self.x = self.grid.points[:, 0]
        self.values = datasets.grf_1d(self.grid, seed=2, count=3)

    def test_zero_shift(self):
        out = datasets.advect_periodic(self.values, self.grid, 0.0)
        np.testing.assert_allclose(out, self.values, atol=1e-12)

    def test_grid_shift_is_a_roll(self):
        out = datasets.advect_periodic(self.values, self.grid, 5.0 / 64)
        np.testing.assert_allclose(out, np.roll(self.values, 5, axis=1), atol=1e-12)

    def test_full_period(self):
        out = datasets.advect_periodic(self.values, self.grid, 1.0)
        np.testing.assert_allclose(out, self.values, atol=1e-12)

    def test_shifts_compose(self):
        once = datasets.advect_periodic(self.values, self.grid, 0.3)
        twice = datasets.advect_periodic(
            datasets.advect_periodic(self.values, self.grid, 0.1), self.grid, 0.2
        )
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_sine(self):
        out = datasets.advect_periodic(np.sin(2.0 * np.pi * self.x), self.grid, 0.137)
        np.testing.assert_allclose(out, np.sin(2.0 * np.pi * (self.x - 0.137)), atol=1e-12)


class TestDarcy(unittest.TestCase):
    """Tests for the finite difference Darcy solver"""

    def test_constant_coefficient_symmetry(self):
        u = datasets.solve_darcy(np.ones((9, 9)))
        np.testing.assert_allclose(u, u.T, atol=1e-12)
        np.testing.assert_allclose(u, u[::-1, :], atol=1e-12)
        self.assertEqual(np.unravel_index(np.argmax(u), u.shape), (4, 4))

    def test_solution_scales_inversely_with_coefficient(self):
        a = np.where(np.random.default_rng(0).uniform(size=(10, 10)) > 0.5, 12.0, 3.0)
        u = datasets.solve_darcy(a)
        np.testing.assert_allclose(datasets.solve_darcy(2.0 * a), 0.5 * u, atol=1e-12)
        np.testing.assert_allclose(datasets.solve_darcy(a, forcing=3.0), 3.0 * u, atol=1e-12)

    def test_five_point_residual(self):
        n = 12
        u = datasets.solve_darcy(np.ones((n, n)))
        p = np.pad(u, 1)
        neighbors = p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2]
        np.testing.assert_allclose((4.0 * u - neighbors) * (n + 1) ** 2, 1.0, atol=1e-8)

    def test_matches_dense_solve(self):
        n = 8
        a = np.where(np.random.default_rng(6).uniform(size=(n, n)) > 0.5, 12.0, 3.0)
        inv_h2 = (n + 1) ** 2
        matrix = np.zeros((n * n, n * n))
        for i in range(n):
            for j in range(n):
                row = i * n + j
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    k, m = i + di, j + dj
                    inside = 0 <= k < n and 0 <= m < n
                    face = 0.5 * (a[i, j] + (a[k, m] if inside else a[i, j]))
                    matrix[row, row] += face * inv_h2
                    if inside:
                        matrix[row, k * n + m] -= face * inv_h2
        expected = np.linalg.solve(matrix, np.ones(n * n)).reshape(n, n)
        np.testing.assert_allclose(datasets.solve_darcy(a), expected, rtol=1e-10, atol=1e-14)

    def test_positive_solution(self):
        a = np.where(np.random.default_rng(4).uniform(size=(8, 8)) > 0.3, 12.0, 3.0)
        self.assertTrue(np.all(datasets.solve_darcy(a) > 0.0))

    def test_invalid_coefficients(self):
        with self.assertRaises(ShapeError):
            datasets.solve_darcy(np.ones((4, 5)))
        with self.assertRaises(ValueError):
            datasets.solve_darcy(np.zeros((4, 4)))


class TestTasks(unittest.TestCase):
    """Tests for the task builders"""

    def setUp(self):
        self.config = TaskConfig(
            n_train=6, n_test=3, input_resolution=64, output_resolution=64, fine_resolution=128
        )

    def test_shapes(self):
        split = datasets.make_task(replace(self.config, output_resolution=32))
        self.assertEqual(split.train.inputs.shape, (6, 64, 1))
        self.assertEqual(split.train.outputs.shape, (6, 32, 1))
        self.assertEqual(split.test.inputs.shape, (3, 64, 1))
        self.assertEqual(split.test.split, datasets.TEST)
        self.assertEqual(split.train.metadata["task"], datasets.SMOOTHING)

    def test_determinism(self):
        a = datasets.make_task(self.config, seed=4)
        b = datasets.make_task(self.config, seed=4)
        np.testing.assert_array_equal(a.train.inputs, b.train.inputs)
        np.testing.assert_array_equal(a.test.outputs, b.test.outputs)
        c = datasets.make_task(self.config, seed=5)
        self.assertFalse(np.array_equal(a.train.inputs, c.train.inputs))

    def test_train_and_test_differ(self):
        split = datasets.make_task(replace(self.config, n_test=6))
        self.assertFalse(np.array_equal(split.train.inputs, split.test.inputs))

    def test_resolutions_share_the_fine_draw(self):
        fine = datasets.make_dataset(self.config, seed=2)
        coarse = datasets.make_dataset(
            replace(self.config, input_resolution=32, output_resolution=32), seed=2
        )
        np.testing.assert_array_equal(coarse.inputs, fine.inputs[:, ::2])
        np.testing.assert_array_equal(coarse.outputs, fine.outputs[:, ::2])

    def test_advection_task(self):
        config = replace(self.config, task=datasets.ADVECTION, advection_time=0.25)
        ds = datasets.make_dataset(config, seed=0)
        np.testing.assert_allclose(ds.outputs, np.roll(ds.inputs, 16, axis=1), atol=1e-10)

    def test_downsample(self):
        ds = datasets.make_dataset(self.config, seed=0)
        coarse = datasets.downsample_dataset(ds, 4, output_factor=2)
        self.assertEqual(coarse.input_mesh.grid_shape, (16,))
        self.assertEqual(coarse.output_mesh.grid_shape, (32,))
        np.testing.assert_array_equal(coarse.inputs, ds.inputs[:, ::4])
        self.assertEqual(coarse.metadata["downsample"], "4/2")
        with self.assertRaises(ValueError):
            cloud = Mesh(points=ds.input_mesh.points)
            datasets.downsample_dataset(replace(ds, input_mesh=cloud), 2)

    def test_darcy_task(self):
        config = TaskConfig(
            task=datasets.DARCY, n_train=2, n_test=1, input_resolution=16, output_resolution=8
        )
        split = datasets.make_task(config, seed=0)
        self.assertEqual(split.train.inputs.shape, (2, 256, 1))
        self.assertEqual(split.train.outputs.shape, (2, 64, 1))
        self.assertEqual(set(np.unique(split.train.inputs)), {3.0, 12.0})
        self.assertTrue(np.all(split.train.outputs > 0.0))
        full = datasets.solve_darcy(split.test.inputs[0, :, 0].reshape(16, 16))
        np.testing.assert_allclose(split.test.outputs[0, :, 0], full[::2, ::2].ravel(), atol=1e-12)

    def test_covering_fine_grid(self):
        covered = self.config.covering([48, 1000])
        self.assertEqual(covered.fine_resolution, 48000)
        self.assertEqual(self.config.fine_resolution, 128)
        config = replace(covered, input_resolution=1000, output_resolution=48)
        ds = datasets.make_dataset(replace(config, n_test=1), seed=0)
        self.assertEqual(ds.inputs.shape, (1, 1000, 1))
        self.assertEqual(ds.outputs.shape, (1, 48, 1))

        advection = replace(self.config, task=datasets.ADVECTION, n_test=2)
        fine = advection.covering([1024])
        self.assertEqual(fine.fine_resolution, 1024)
        high = datasets.make_dataset(replace(fine, input_resolution=1024, output_resolution=1024))
        low = datasets.make_dataset(replace(fine, input_resolution=64, output_resolution=64))
        np.testing.assert_array_equal(low.inputs, high.inputs[:, ::16])
        np.testing.assert_allclose(high.outputs, np.roll(high.inputs, 256, axis=1), atol=1e-10)

        darcy = TaskConfig(task=datasets.DARCY)
        self.assertEqual(darcy.covering([7]), darcy)
        with self.assertRaises(ConfigError) as ctx:
            self.config.covering([1021, 1019])
        self.assertEqual(ctx.exception.key, "fine_resolution")

    def test_dataset_validation(self):
        mesh = Mesh.periodic_grid((4,))
        with self.assertRaises(ShapeError):
            datasets.OperatorDataset(mesh, mesh, np.zeros((2, 4, 1)), np.zeros((3, 4, 1)))
        with self.assertRaises(ShapeError):
            datasets.OperatorDataset(mesh, mesh, np.zeros((2, 5, 1)), np.zeros((2, 4, 1)))
        with self.assertRaises(ValueError):
            datasets.OperatorDataset(mesh, mesh, np.full((1, 4, 1), np.nan), np.zeros((1, 4, 1)))
        sample = datasets.OperatorDataset(mesh, mesh, np.ones((2, 4, 1)), np.zeros((2, 4, 1)))[1]
        self.assertEqual(sample.inputs.shape, (4, 1))

    def test_invalid_task_config(self):
        cases = [
            ("task", replace(self.config, task="heat")),
            ("n_train", replace(self.config, n_train=0)),
            ("input_resolution", replace(self.config, input_resolution=48)),
            ("kernel_width", replace(self.config, kernel_width=0.0)),
            ("variance", replace(self.config, variance=-1.0)),
            ("input_resolution", TaskConfig(task=datasets.DARCY, input_resolution=128)),
            (
                "output_resolution",
                TaskConfig(task=datasets.DARCY, input_resolution=32, output_resolution=12),
            ),
        ]
        for key, config in cases:
            with self.assertRaises(ConfigError) as ctx:
                datasets.make_task(config)
            self.assertEqual(ctx.exception.key, key)
        with self.assertRaises(ValueError):
            datasets.make_dataset(self.config, split="validation")


if __name__ == "__main__":
    unittest.main()
