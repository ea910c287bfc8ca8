import os
import tempfile

import numpy as np

from helpers import TestHelper

from bdsde_fk.errors import InvalidArgumentError, MissingPointError
from bdsde_fk.forward_sde import brownian_increments
from bdsde_fk.noise_field import (FieldRealization, PointDeclarations, ProbeSpec, evaluate_increment,
                                  kernel_eval, make_kernel, refine_realization, reverse_realization,
                                  sample_increments, shift_realization, table, validate_kernel)


def _uniform_sets(points, n_steps):
    return [np.asarray(points, dtype=float).reshape(-1, 1)] * n_steps


class TestKernels(TestHelper):

    def test_registry(self):
        self.assertEqual(make_kernel("constant", q0=2.0).gram(0.0, [0.0, 1.0], [3.0]).tolist(), [[2.0], [2.0]])
        exponential = make_kernel("exponential", scale=2.0)
        self.assertAlmostEqual(exponential.gram(0.0, [0.0], [1.0])[0, 0], np.exp(-0.5))
        gaussian = make_kernel("squared_exponential", scale=1.0, amplitude=3.0)
        self.assertAlmostEqual(gaussian.pairwise(0.0, [[0.0]], [[1.0]])[0], 3.0 * np.exp(-0.5))
        with self.assertRaises(InvalidArgumentError):
            make_kernel("matern")
        with self.assertRaises(InvalidArgumentError):
            make_kernel("exponential", scale=-1.0)
        self.assertAlmostEqual(kernel_eval(exponential, 0.0, 0.0, 2.0), np.exp(-1.0))
        with self.assertRaises(InvalidArgumentError):
            kernel_eval(exponential, 0.0, np.nan, 1.0)

    def test_time_modulation(self):
        kernel = make_kernel("constant", modulation=0.5, period=2.0, q0=1.0)
        self.assertTrue(kernel.is_time_dependent)
        self.assertAlmostEqual(kernel.diagonal(0.5, [[0.0]])[0], 1.5)
        self.assertAlmostEqual(kernel.diagonal(1.5, [[0.0]])[0], 0.5)
        self.assertAlmostEqual(kernel.bound_M, 1.5)
        with self.assertRaises(InvalidArgumentError):
            make_kernel("constant", modulation=1.0)

    def test_validate_valid_kernels(self):
        probe = ProbeSpec(n_samples=400, seed=3)
        for kernel in [make_kernel("constant", q0=1.0),
                       make_kernel("exponential", scale=0.5),
                       make_kernel("squared_exponential", scale=1.0),
                       make_kernel("exponential", modulation=0.3, period=1.0)]:
            report = validate_kernel(kernel, probe)
            self.assertTrue(report.passed, msg=f"{kernel.family}: {report.violations}")
            self.assertLessEqual(report.symmetry_error, 1e-12)

    def test_validate_reports_indefinite_table(self):
        kernel = table([[0.0], [1.0]], [[1.0, 2.0], [2.0, 1.0]])
        report = validate_kernel(kernel, ProbeSpec(n_samples=50))
        self.assertFalse(report.passed)
        self.assertIn("psd", report.violations)
        self.assertAlmostEqual(report.min_eigenvalue, -1.0)
        self.assertEqual(report.to_dict()["passed"], False)

    def test_degenerate_probe(self):
        with self.assertRaises(InvalidArgumentError):
            validate_kernel(make_kernel("constant"), ProbeSpec(low=1.0, high=1.0))


class TestSampling(TestHelper):

    def test_constant_kernel_is_rank_one(self):
        grid = np.linspace(0, 1, 11)
        realization = sample_increments(make_kernel("constant", q0=1.0), grid, _uniform_sets([-1.0, 0.0, 2.5], 10), 7)
        for k in range(10):
            values = realization.increments_at(k, [[-1.0], [0.0], [2.5]])
            self.assertTrue(np.all(values == values[0]))
        self.assertEqual(set(realization.strategies), {"rank_one"})

    def test_exponential_covariance(self):
        n_steps = 4000
        grid = np.linspace(0, n_steps * 0.5, n_steps + 1)
        kernel = make_kernel("exponential", scale=1.0, amplitude=2.0)
        realization = sample_increments(kernel, grid, _uniform_sets([0.0, 1.0], n_steps), 11)
        samples = np.array([realization.increments[k] for k in range(n_steps)])
        covariance = np.cov(samples.T)
        self.assertAlmostEqual(covariance[0, 0], 2.0 * 0.5, delta=0.1)
        self.assertAlmostEqual(covariance[1, 1], 2.0 * 0.5, delta=0.1)
        self.assertAlmostEqual(covariance[0, 1] / covariance[0, 0], np.exp(-1.0), delta=0.06)
        self.assertEqual(set(realization.strategies), {"markov"})

    def test_dense_two_dimensional(self):
        n_steps = 3000
        grid = np.linspace(0, n_steps, n_steps + 1)
        kernel = make_kernel("squared_exponential", scale=1.0)
        points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        realization = sample_increments(kernel, grid, [points] * n_steps, 5)
        samples = np.array([realization.increments_at(k, points) for k in range(n_steps)])
        expected = kernel.gram(0.0, points, points)
        self.assertArrayClose(np.cov(samples.T), expected, atol=0.15)
        self.assertEqual(set(realization.strategies), {"dense"})

    def test_low_rank_strategy(self):
        grid = np.linspace(0, 1, 3)
        points = np.linspace(-1, 1, 60)[:, None]
        realization = sample_increments(make_kernel("squared_exponential", scale=0.5), grid, [points] * 2, 2,
                                        dense_limit=10)
        self.assertEqual(set(realization.strategies), {"low_rank"})
        self.assertTrue(np.all(np.isfinite(realization.increments[0])))

    def test_zero_length_step(self):
        grid = np.array([0.0, 0.5, 0.5, 1.0])
        realization = sample_increments(make_kernel("exponential"), grid, _uniform_sets([0.0, 1.0], 3), 1)
        self.assertTrue(np.all(realization.increments[1] == 0))
        self.assertFalse(np.all(realization.increments[0] == 0))

    def test_missing_point(self):
        realization = sample_increments(make_kernel("constant"), [0.0, 1.0], _uniform_sets([0.0], 1), 0)
        with self.assertRaises(MissingPointError) as context:
            realization.increments_at(0, [[0.5]])
        self.assertEqual(context.exception.step, 0)
        self.assertEqual(realization.increment(0, 0.0), realization.increments[0][0])
        self.assertEqual(evaluate_increment(realization, 0, [0.0]), realization.increments[0][0])
        with self.assertRaises(MissingPointError):
            evaluate_increment(realization, 0, [0.5])

    def test_duplicate_points_merge(self):
        points = np.array([[0.0], [1e-14], [1.0]])
        realization = sample_increments(make_kernel("exponential"), [0.0, 1.0], [points], 0)
        self.assertEqual(len(realization.points[0]), 2)

    def test_seeded_and_extensible(self):
        kernel = make_kernel("exponential", scale=0.7)
        short = sample_increments(kernel, np.linspace(0, 1, 5), _uniform_sets([0.0, 0.3], 4), 42)
        long = sample_increments(kernel, np.linspace(0, 2, 9), _uniform_sets([0.0, 0.3], 8), 42)
        again = sample_increments(kernel, np.linspace(0, 1, 5), _uniform_sets([0.0, 0.3], 4), 42)
        other = sample_increments(kernel, np.linspace(0, 1, 5), _uniform_sets([0.0, 0.3], 4), 43)
        self.assertEqual(short.realization_id, again.realization_id)
        self.assertNotEqual(short.realization_id, other.realization_id)
        for k in range(4):
            self.assertArrayClose(short.increments[k], long.increments[k], atol=0)
        self.assertArrayClose(long.head(4).increments[3], short.increments[3], atol=0)

    def test_container_round_trip(self):
        realization = sample_increments(make_kernel("squared_exponential", scale=0.4), np.linspace(0, 1, 6),
                                        [np.array([[0.0, 1.0], [0.5, -0.5]])] * 5, 9)
        path = os.path.join(tempfile.mkdtemp(), "field.bin")
        realization.save(path)
        loaded = FieldRealization.load(path)
        self.assertEqual(loaded.realization_id, realization.realization_id)
        self.assertEqual(loaded.to_bytes(), realization.to_bytes())
        for k in range(5):
            self.assertArrayClose(loaded.increments[k], realization.increments[k], atol=0)
        self.assertEqual(loaded.kernel, realization.kernel)

    def test_bad_inputs(self):
        kernel = make_kernel("constant")
        with self.assertRaises(InvalidArgumentError):
            sample_increments(kernel, [0.0, 1.0, 0.5], _uniform_sets([0.0], 2), 0)
        with self.assertRaises(InvalidArgumentError):
            sample_increments(kernel, [0.0, 1.0], _uniform_sets([0.0], 2), 0)
        with self.assertRaises(InvalidArgumentError):
            sample_increments(kernel, [0.0, 1.0], [np.array([[np.nan]])], 0)


class TestRealizationAlgebra(TestHelper):

    def setUp(self):
        super().setUp()
        declarations = PointDeclarations(np.linspace(0, 4, 17))
        declarations.declare_everywhere([-1.0, 0.0, 1.0])
        self.realization = declarations.sample(make_kernel("exponential", scale=0.5), 123)

    def test_shift(self):
        shifted = shift_realization(self.realization, 1.0)
        self.assertEqual(shifted.n_steps, 12)
        self.assertAlmostEqual(shifted.time_grid[0], 0.0)
        self.assertArrayClose(shifted.increments[0], self.realization.increments[4], atol=0)
        twice = shift_realization(shift_realization(self.realization, 0.5), 0.5)
        self.assertArrayClose(twice.increments[2], shifted.increments[2], atol=0)
        with self.assertRaises(InvalidArgumentError):
            shift_realization(self.realization, -1.0)
        with self.assertRaises(InvalidArgumentError):
            shift_realization(self.realization, 0.3)

    def test_reverse(self):
        reversed_field = reverse_realization(self.realization, 2.0, 4)
        self.assertArrayClose(reversed_field.time_grid, [0.0, 0.25, 0.5, 0.75, 1.0])
        for i in range(4):
            self.assertArrayClose(reversed_field.increments[i], -self.realization.increments[7 - i], atol=0)
        with self.assertRaises(InvalidArgumentError):
            reverse_realization(self.realization, 0.5, 4)

    def test_cumulative(self):
        total = sum(self.realization.increment(k, 0.0) for k in range(16))
        self.assertAlmostEqual(self.realization.cumulative(0.0), total)

    def test_refinement_preserves_coarse_sums(self):
        fine_sets = [np.array([[-1.0], [0.0], [0.5], [1.0]])] * 32
        fine = refine_realization(self.realization, fine_sets, 77)
        self.assertEqual(fine.n_steps, 32)
        coarse_points = np.array([[-1.0], [0.0], [1.0]])
        for k in range(16):
            halves = fine.increments_at(2 * k, coarse_points) + fine.increments_at(2 * k + 1, coarse_points)
            self.assertArrayClose(halves, self.realization.increments_at(k, coarse_points), atol=1e-12)
        self.assertTrue(np.isfinite(fine.increment(0, 0.5)))

    def test_refinement_of_a_rank_one_field(self):
        declarations = PointDeclarations(np.linspace(0, 1, 5))
        declarations.declare_everywhere([0.0, 1.0])
        coarse = declarations.sample(make_kernel("constant", q0=2.0), 8)
        fine = refine_realization(coarse, [np.array([[0.0], [0.3], [1.0]])] * 8, 9)
        for k in range(8):
            self.assertAlmostEqual(fine.increment(k, 0.3), fine.increment(k, 0.0), delta=1e-5)
        for k in range(4):
            self.assertAlmostEqual(fine.increment(2 * k, 0.3) + fine.increment(2 * k + 1, 0.3),
                                   coarse.increment(k, 0.0), delta=1e-5)

    def test_undeclared_step_uses_origin(self):
        declarations = PointDeclarations([0.0, 1.0, 2.0])
        declarations.declare(1, [[3.0]])
        realization = declarations.sample(make_kernel("constant"), 0)
        self.assertTrue(np.isfinite(realization.increment(0, 0.0)))
        with self.assertRaises(MissingPointError):
            realization.increment(0, 3.0)

    def test_shift_by_a_period_preserves_law(self):
        kernel = make_kernel("constant", modulation=0.5, period=1.0, q0=1.0)
        samples = []
        for seed in range(400):
            declarations = PointDeclarations(np.linspace(0, 2, 17))
            declarations.declare_everywhere([0.0])
            shifted = shift_realization(declarations.sample(kernel, seed), 1.0)
            samples.append([shifted.increments[i][0] for i in range(8)])
        samples = np.asarray(samples)
        for i in range(8):
            expected = float(kernel.time_factor(i / 8)) / 8
            se = expected * np.sqrt(2 / (len(samples) - 1))
            self.assertWithinStandardErrors(np.var(samples[:, i], ddof=1), expected, se, n_se=4)
            self.assertWithinStandardErrors(np.mean(samples[:, i]), 0.0, np.sqrt(expected / len(samples)), n_se=4)


class TestIndependence(TestHelper):

    def test_field_is_independent_of_brownian_motion(self):
        grid = np.linspace(0, 1, 4097)
        declarations = PointDeclarations(grid)
        declarations.declare_everywhere([0.0])
        seed = 9
        field_increments = np.array(declarations.sample(make_kernel("constant"), seed).increments)[:, 0]
        brownian = brownian_increments(grid, 1, 1, seed)[:, 0, 0]
        correlation = np.corrcoef(field_increments, brownian)[0, 1]
        self.assertLessEqual(abs(correlation), 4 / np.sqrt(len(grid) - 1))
        self.assertAlmostEqual(np.sum(field_increments ** 2), 1.0, delta=0.1)
