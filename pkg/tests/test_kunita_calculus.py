import numpy as np

from helpers import TestHelper

from bdsde_fk.errors import InvalidArgumentError
from bdsde_fk.forward_sde import (brownian_increments, coarsen_increments, make_coefficients, simulate,
                                  simulate_with_increments)
from bdsde_fk.kunita_calculus import (ProcessSpec, backward_integral, bracket_quadrature, exponential_moment,
                                      exponential_weight, grid_offset, ito_residual, kernel_weight,
                                      path_increments, product_rule_residual, quadratic_variation)
from bdsde_fk.noise_field import make_kernel, refine_realization, sample_for_bundle


def _setup(kernel, n_steps=32, n_paths=16, seed=0, T=1.0, family="ornstein_uhlenbeck"):
    coefficients = make_coefficients(family, diffusion=1.0) if family == "ornstein_uhlenbeck" else \
        make_coefficients(family)
    bundle = simulate(coefficients, [0.0], np.linspace(0, T, n_steps + 1), n_paths, seed)
    return bundle, sample_for_bundle(kernel, bundle, seed)


class TestBackwardIntegral(TestHelper):

    def test_forward_point_pairing(self):
        bundle, realization = _setup(make_kernel("exponential", scale=0.3), n_steps=8, n_paths=3)
        integrand = bundle.states[:, :, 0] ** 2
        result = backward_integral(integrand, realization, bundle)
        for m in range(3):
            expected = sum(integrand[k + 1, m] * realization.increment(k, bundle.states[k + 1, m])
                           for k in range(8))
            self.assertAlmostEqual(result.values[m], expected, places=12)
        self.assertEqual(result.n_steps, 8)

    def test_constant_kernel_sum(self):
        bundle, realization = _setup(make_kernel("constant"), n_steps=10, n_paths=4)
        result = backward_integral(1.0, realization, bundle)
        total = sum(realization.increments[k][0] for k in range(10))
        self.assertArrayClose(result.values, np.full(4, total), atol=1e-12)

    def test_grid_alignment(self):
        bundle, realization = _setup(make_kernel("constant"), n_steps=10, n_paths=2)
        self.assertEqual(grid_offset(realization, bundle.time_grid), 0)
        with self.assertRaises(InvalidArgumentError):
            path_increments(realization, bundle.retimed(0.05))

    def test_quadratic_variation_identity(self):
        kernel = make_kernel("constant", q0=1.0)
        realized, expected = [], []
        for seed in range(16):
            bundle, realization = _setup(kernel, n_steps=1024, n_paths=4, seed=seed)
            realized.append(np.mean(quadratic_variation(1.0, realization, bundle)))
            expected.append(np.mean(bracket_quadrature(1.0, kernel, bundle)))
        self.assertAlmostEqual(np.mean(expected), 1.0)
        self.assertLessEqual(abs(np.mean(realized) - np.mean(expected)) / np.mean(expected), 0.05)

    def test_quadratic_variation_spatial_kernel(self):
        kernel = make_kernel("exponential", scale=0.5, amplitude=2.0)
        bundle, realization = _setup(kernel, n_steps=2048, n_paths=64, seed=3)
        integrand = np.cos(bundle.states[:, :, 0])
        qv = quadratic_variation(integrand, realization, bundle)
        bracket = bracket_quadrature(integrand, kernel, bundle)
        self.assertLessEqual(abs(qv.mean() - bracket.mean()) / bracket.mean(), 0.1)

    def test_riemann_sum_converges_under_refinement(self):
        coefficients = make_coefficients("constant", drift=0.0, diffusion=1.0)
        n_paths, finest = 100, 64
        dW = brownian_increments(np.linspace(0, 1, finest + 1), n_paths, 1, 5)
        bundles = {n: simulate_with_increments(coefficients, [0.0], np.linspace(0, 1, n + 1),
                                               coarsen_increments(dW, finest // n))
                   for n in (16, 32, 64)}
        realizations = {16: sample_for_bundle(make_kernel("squared_exponential", scale=1.0), bundles[16], 5)}
        for n in (32, 64):
            fine_sets = [bundles[n].states[k + 1] for k in range(n)]
            realizations[n] = refine_realization(realizations[n // 2], fine_sets, n)
        sums = {n: backward_integral(np.cos(bundles[n].states[:, :, 0]), realizations[n], bundles[n]).values
                for n in bundles}
        coarse_gap = np.mean((sums[16] - sums[32]) ** 2)
        fine_gap = np.mean((sums[32] - sums[64]) ** 2)
        self.assertGreater(coarse_gap, 0.0)
        self.assertLess(fine_gap / coarse_gap, 0.8)


class TestItoFormula(TestHelper):

    def test_backward_correction_sign(self):
        kernel = make_kernel("constant", q0=1.0)
        process = ProcessSpec(s0=0.0, f=0.0, g=1.0, h=0.0)
        with_correction, without_correction = [], []
        for seed in range(40):
            bundle, realization = _setup(kernel, n_steps=64, n_paths=1, seed=seed)
            with_correction.append(ito_residual(process, "square", realization, bundle).mean)
            without_correction.append(ito_residual(process, "square", realization, bundle, g_correction=False).mean)
        se = np.std(with_correction, ddof=1) / np.sqrt(40)
        self.assertWithinStandardErrors(np.mean(with_correction), 0.0, se)
        se = np.std(without_correction, ddof=1) / np.sqrt(40)
        self.assertWithinStandardErrors(np.mean(without_correction), -1.0, se)

    def test_brownian_correction_sign(self):
        bundle, realization = _setup(make_kernel("constant"), n_steps=64, n_paths=4000, seed=1, family="constant")
        process = ProcessSpec(s0=0.5, f=0.0, g=0.0, h=1.0)
        full = ito_residual(process, "square", realization, bundle)
        self.assertWithinStandardErrors(full.mean, 0.0, full.stderr)
        dropped = ito_residual(process, "square", realization, bundle, h_correction=False)
        self.assertWithinStandardErrors(dropped.mean, 1.0, dropped.stderr)
        self.assertEqual(full.to_record()["N"], 4000)

    def test_mixed_process(self):
        kernel = make_kernel("exponential", scale=0.2)
        bundle, realization = _setup(kernel, n_steps=256, n_paths=2000, seed=5)
        x = bundle.states[:, :, 0]
        process = ProcessSpec(s0=0.1, f=np.sin(x), g=0.5 * np.cos(x), h=0.3)
        residual = ito_residual(process, "exp_clamped", realization, bundle)
        self.assertLess(abs(residual.mean), 0.05)
        self.assertTrue(np.all(np.isfinite(residual.residuals)))

    def test_unknown_test_function(self):
        bundle, realization = _setup(make_kernel("constant"), n_steps=4, n_paths=2)
        with self.assertRaises(InvalidArgumentError):
            ito_residual(ProcessSpec(), "cube", realization, bundle)

    def test_product_rule_without_drift(self):
        kernel = make_kernel("exponential", scale=0.5)
        bundle, realization = _setup(kernel, n_steps=64, n_paths=50, seed=2)
        process = ProcessSpec(s0=1.0, f=0.0, g=np.tanh(bundle.states[:, :, 0]), h=0.0)
        residual = product_rule_residual(process, exponential_weight(bundle, 0.7), realization, bundle)
        self.assertLess(np.max(np.abs(residual.residuals)), 1e-10)


class TestWeights(TestHelper):

    def test_clamped_intensity(self):
        bundle, _ = _setup(make_kernel("constant", q0=0.5), n_steps=20, n_paths=10)
        weights = kernel_weight(make_kernel("constant", q0=0.5), bundle, 2.0)
        self.assertEqual(weights.shape, (21, 10))
        self.assertArrayClose(weights[-1], np.full(10, np.exp(2.0)), atol=1e-12)
        mean, stderr = exponential_moment(make_kernel("constant", q0=3.0), bundle, 0.5)
        self.assertAlmostEqual(mean, np.exp(1.5))
        self.assertAlmostEqual(stderr, 0.0)
