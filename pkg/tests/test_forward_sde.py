import numpy as np

from helpers import TestHelper

from bdsde_fk.errors import InvalidArgumentError
from bdsde_fk.forward_sde import (PathBundle, brownian_increments, check_coefficients, coarsen_increments,
                                  discounted_moment_bound, dispersed_start, make_coefficients, moment_probe, restart,
                                  simulate, simulate_with_increments)
from bdsde_fk.noise_field import ProbeSpec


class TestCoefficients(TestHelper):

    def test_registry(self):
        ou = make_coefficients("ornstein_uhlenbeck", theta=2.0, mean=1.0, diffusion=0.5)
        self.assertEqual(ou.family, "linear")
        self.assertArrayClose(ou.drift_at(np.array([[0.0], [1.0]])), [[2.0], [0.0]])
        self.assertAlmostEqual(ou.lipschitz_K, 2.0)
        tanh = make_coefficients("tanh", drift_slope=0.3, diffusion=1.0, diffusion_slope=0.2)
        self.assertEqual(tanh.diffusion_at(np.zeros((4, 1))).shape, (4, 1, 1))
        self.assertTrue(tanh.bounded)
        self.assertFalse(ou.bounded)
        with self.assertRaises(InvalidArgumentError):
            make_coefficients("cubic")

    def test_check_coefficients(self):
        probe = ProbeSpec(n_samples=500, seed=1)
        for coefficients in [make_coefficients("ornstein_uhlenbeck", theta=1.5, diffusion=1.0),
                             make_coefficients("tanh", dim=2, drift_slope=-0.5, diffusion=1.0, diffusion_slope=0.3),
                             make_coefficients("constant", dim=3, drift=0.1)]:
            report = check_coefficients(coefficients, probe)
            self.assertTrue(report.passed(coefficients), msg=f"{coefficients.family}: {report}")


class TestSimulation(TestHelper):

    def test_ornstein_uhlenbeck_moments(self):
        coefficients = make_coefficients("ornstein_uhlenbeck", theta=1.0, diffusion=1.0)
        bundle = simulate(coefficients, [1.0], np.linspace(0, 1, 201), 20000, seed=3)
        final = bundle.states[-1, :, 0]
        self.assertAlmostEqual(final.mean(), np.exp(-1.0), delta=0.02)
        self.assertAlmostEqual(final.var(), (1 - np.exp(-2.0)) / 2, delta=0.02)

    def test_reproducible_by_blocks(self):
        coefficients = make_coefficients("constant", dim=2)
        grid = np.linspace(0, 1, 9)
        small = simulate(coefficients, np.zeros(2), grid, 1500, seed=12)
        large = simulate(coefficients, np.zeros(2), grid, 3000, seed=12)
        again = simulate(coefficients, np.zeros(2), grid, 1500, seed=12)
        self.assertArrayClose(large.states[:, :1500], small.states, atol=0)
        self.assertArrayClose(again.dW, small.dW, atol=0)
        other = simulate(coefficients, np.zeros(2), grid, 1500, seed=13)
        self.assertFalse(np.array_equal(other.dW, small.dW))

    def test_linear_flow(self):
        coefficients = make_coefficients("ornstein_uhlenbeck", theta=0.5, diffusion=1.0)
        bundle = simulate(coefficients, [0.0], np.linspace(0, 2, 41), 10, seed=0, with_flow=True)
        self.assertArrayClose(bundle.flow[-1, :, 0, 0], np.full(10, (1 - 0.5 * 0.05) ** 40), atol=1e-12)

    def test_tanh_flow_matches_perturbation(self):
        coefficients = make_coefficients("tanh", drift_slope=-0.7, diffusion=1.0, diffusion_slope=0.4)
        grid = np.linspace(0, 1, 51)
        x0 = np.linspace(-1, 1, 200)[:, None]
        bundle = simulate(coefficients, x0, grid, 200, seed=4, with_flow=True)
        h = 1e-6
        shifted = simulate_with_increments(coefficients, x0 + h, grid, bundle.dW)
        finite_difference = (shifted.states[-1, :, 0] - bundle.states[-1, :, 0]) / h
        self.assertArrayClose(bundle.flow[-1, :, 0, 0], finite_difference, atol=1e-4)

    def test_restart_reproduces_tail(self):
        coefficients = make_coefficients("tanh", drift_slope=0.2, diffusion=0.8, diffusion_slope=0.1)
        bundle = simulate(coefficients, [0.5], np.linspace(0, 1, 17), 64, seed=8, with_flow=True)
        tail = restart(bundle, 6)
        self.assertArrayClose(tail.states, bundle.states[6:], atol=0)
        self.assertArrayClose(tail.time_grid, bundle.time_grid[6:], atol=0)

    def test_head_and_retimed(self):
        bundle = simulate(make_coefficients("constant"), [0.0], np.linspace(0, 1, 11), 5, seed=0)
        head = bundle.head(4)
        self.assertEqual(head.n_steps, 4)
        self.assertArrayClose(head.states, bundle.states[:5], atol=0)
        moved = bundle.retimed(3.0)
        self.assertAlmostEqual(moved.start_time, 3.0)
        self.assertArrayClose(moved.dt, bundle.dt)
        with self.assertRaises(InvalidArgumentError):
            bundle.head(11)

    def test_frame_and_container(self):
        bundle = simulate(make_coefficients("constant", dim=2), np.zeros(2), np.linspace(0, 1, 4), 3, seed=0)
        frame = bundle.to_frame()
        self.assertEqual(len(frame), 4 * 3)
        self.assertEqual(list(frame.columns), ["step", "path", "time", "x0", "dw0", "x1", "dw1"])
        self.assertTrue(np.all(np.isnan(frame[frame["step"] == 3]["dw0"])))
        loaded = PathBundle.from_bytes(bundle.to_bytes())
        self.assertArrayClose(loaded.states, bundle.states, atol=0)
        self.assertEqual(loaded.coefficients, bundle.coefficients)

    def test_dispersed_start(self):
        starts = dispersed_start(-1.0, 1.0, 100, 2, seed=5)
        self.assertEqual(starts.shape, (100, 2))
        lattice = -1.0 + 2.0 * (np.arange(100) + 0.5) / 100
        for i in range(2):
            self.assertArrayClose(np.sort(starts[:, i]), lattice)
        self.assertFalse(np.array_equal(starts[:, 0], starts[:, 1]))

    def test_coarsen(self):
        dW = np.arange(12.0).reshape(6, 2, 1)
        coarse = coarsen_increments(dW, 3)
        self.assertEqual(coarse.shape, (2, 2, 1))
        self.assertEqual(coarse[0, 0, 0], 0 + 2 + 4)
        with self.assertRaises(InvalidArgumentError):
            coarsen_increments(dW, 4)

    def test_euler_strong_error_halves_with_the_step(self):
        coefficients = make_coefficients("ornstein_uhlenbeck", theta=1.0, diffusion=1.0)
        finest = 256
        dW = brownian_increments(np.linspace(0, 1, finest + 1), 2000, 1, 7)
        reference = simulate_with_increments(coefficients, [1.0], np.linspace(0, 1, finest + 1), dW).states[-1]
        errors = []
        for n in (8, 16):
            coarse = simulate_with_increments(coefficients, [1.0], np.linspace(0, 1, n + 1),
                                              coarsen_increments(dW, finest // n))
            errors.append(np.mean(np.abs(coarse.states[-1] - reference)))
        self.assertAlmostEqual(errors[1] / errors[0], 0.5, delta=0.15)

    def test_invalid(self):
        coefficients = make_coefficients("constant")
        with self.assertRaises(InvalidArgumentError):
            simulate(coefficients, [0.0], np.linspace(0, 1, 3), 0, seed=0)
        with self.assertRaises(InvalidArgumentError):
            simulate(coefficients, [0.0], [0.0, 0.5, 0.5], 3, seed=0)


class TestPathMoments(TestHelper):

    def test_constant_paths_exact(self):
        coefficients = make_coefficients("constant", diffusion=0.0)
        bundle = simulate(coefficients, [2.0], np.linspace(0, 1, 11), 4, seed=0)
        self.assertAlmostEqual(moment_probe(bundle, 1, 1.0), 4.0 * (1 - np.exp(-1.0)))
        self.assertAlmostEqual(discounted_moment_bound(coefficients, [2.0], 1, 1.0, 0.0, 1.0), 4.0)
        with self.assertRaises(InvalidArgumentError):
            moment_probe(bundle, 0.5, 1.0)

    def test_bound_dominates_ornstein_uhlenbeck(self):
        coefficients = make_coefficients("ornstein_uhlenbeck", theta=1.0, diffusion=1.0)
        bundle = simulate(coefficients, [1.0], np.linspace(0, 2, 81), 4000, seed=2)
        bound = discounted_moment_bound(coefficients, [1.0], 1, 1.0, 0.0, 2.0, constant=4.0)
        self.assertLessEqual(moment_probe(bundle, 1, 1.0), bound)
