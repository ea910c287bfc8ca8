import numpy as np

from helpers import TestHelper

from bdsde_fk.drivers import Driver, make_driver, make_terminal, monotonicity_margin, validate_driver
from bdsde_fk.errors import InvalidArgumentError
from bdsde_fk.noise_field import ProbeSpec, make_kernel


class TestDriverMetadata(TestHelper):

    def test_affine_metadata(self):
        driver = make_driver("affine", a=-1.0, h0=2.0)
        self.assertAlmostEqual(driver.lipschitz_K, 1.0)
        self.assertAlmostEqual(driver.margin_K, 0.0)
        self.assertAlmostEqual(driver.monotonicity_mu, 1.0)
        self.assertTrue(driver.time_independent)
        self.assertIsNone(driver.periodic_tau)
        self.assertEqual(driver.growth_gamma, 0.5)
        self.assertFalse(driver.z_dependent)

    def test_affine_with_noise_and_z(self):
        driver = make_driver("affine", a=0.5, b=0.2, beta=1.0, c=0.3, dim=2)
        self.assertAlmostEqual(driver.lipschitz_K, max(2 * max(0.25, 0.04 * 2), 2 * 1.0 ** 2))
        self.assertAlmostEqual(driver.margin_K, max(0.04 * 2, 2 * 1.0 ** 2))
        self.assertAlmostEqual(driver.alpha_z, 2 * 0.09 * 2)
        self.assertIsNone(driver.monotonicity_mu)
        self.assertTrue(driver.z_dependent)
        y, z = np.array([1.0, 2.0]), np.ones((2, 2))
        self.assertArrayClose(driver.g(0.0, np.zeros((2, 2)), y, z), y + 0.6)

    def test_trig_metadata(self):
        driver = make_driver("trig", a=-1.0, cf=1.0, gs=0.1)
        self.assertAlmostEqual(driver.lipschitz_K, 4.0)
        self.assertAlmostEqual(driver.margin_K, 0.01)
        self.assertIsNone(driver.monotonicity_mu)
        steep = make_driver("trig", a=-3.0, cf=1.0)
        self.assertAlmostEqual(steep.monotonicity_mu, 2.0)

    def test_forcing_period(self):
        driver = make_driver("affine", a=-1.0, forcing=1.0, tau=2.0)
        self.assertEqual(driver.periodic_tau, 2.0)
        self.assertFalse(driver.time_independent)
        self.assertAlmostEqual(driver.f(0.5, np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)))[0], 1.0)
        with self.assertRaises(InvalidArgumentError):
            make_driver("affine", forcing=1.0, tau=0.0)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            make_driver("quadratic")
        with self.assertRaises(InvalidArgumentError):
            make_driver("trig", beta=1.0)
        with self.assertRaises(InvalidArgumentError):
            make_driver("affine", alpha=1.0)


class TestValidateDriver(TestHelper):

    def setUp(self):
        super().setUp()
        self.probe = ProbeSpec(n_samples=2000, seed=4)
        self.kernel = make_kernel("constant", q0=1.0)

    def test_honest_drivers_pass(self):
        for driver in [make_driver("affine", a=-1.0, h0=1.0),
                       make_driver("affine", a=0.3, b=0.5, beta=0.4, c=0.2, g0=1.0),
                       make_driver("trig", a=-1.0, cf=1.0, gs=0.2, gc=0.1),
                       make_driver("affine", a=-2.0, forcing=1.0, tau=1.0)]:
            report = validate_driver(driver, self.probe, self.kernel)
            self.assertTrue(report.passed, msg=f"{driver}: {report.violations}")

    def test_understated_lipschitz(self):
        driver = Driver("affine", (("a", 2.0),), lipschitz_K=1.0)
        report = validate_driver(driver, self.probe)
        self.assertIn("f_lipschitz", report.violations)
        self.assertGreater(report.f_lipschitz_ratio, 3.0)

    def test_understated_g_lipschitz(self):
        driver = Driver("affine", (("beta", 2.0),), lipschitz_K=1.0)
        self.assertIn("g_lipschitz", validate_driver(driver, self.probe).violations)

    def test_overstated_monotonicity(self):
        driver = Driver("affine", (("a", -0.5),), lipschitz_K=1.0, monotonicity_mu=1.0)
        self.assertIn("monotonicity", validate_driver(driver, self.probe).violations)

    def test_alpha_product(self):
        driver = make_driver("affine", c=1.0)
        report = validate_driver(driver, self.probe, self.kernel)
        self.assertIn("alpha", report.violations)
        self.assertAlmostEqual(report.alpha_product, 1.0)
        report = validate_driver(driver, self.probe, make_kernel("constant", q0=0.25))
        self.assertNotIn("alpha", report.violations)

    def test_wrong_period(self):
        driver = Driver("affine", (("forcing", 1.0), ("tau", 1.0)), periodic_tau=0.5, time_independent=False)
        report = validate_driver(driver, self.probe)
        self.assertIn("periodicity", report.violations)
        self.assertGreater(report.periodicity_error, 0.1)

    def test_margin(self):
        driver = make_driver("affine", a=-1.0, h0=1.0)
        self.assertAlmostEqual(validate_driver(driver, self.probe, self.kernel).margin, 1.5)
        noisy = make_driver("affine", a=-1.0, beta=1.0)
        self.assertAlmostEqual(monotonicity_margin(noisy, self.kernel, 0.5), 2 - 0.5 - 1 / 0.5 - 1)
        self.assertEqual(monotonicity_margin(make_driver("affine", a=1.0), self.kernel, 0.5), -np.inf)
        self.assertIsNone(validate_driver(driver, self.probe).margin)

    def test_report_dict(self):
        report = validate_driver(make_driver("trig", a=-1.0, gs=0.5), self.probe, self.kernel)
        d = report.to_dict()
        self.assertTrue(d["passed"])
        self.assertLessEqual(d["growth_ratio"], 1.0)


class TestTerminals(TestHelper):

    def test_values(self):
        x = np.array([[0.0], [1.0], [-2.0]])
        self.assertArrayClose(make_terminal("constant", value=3.0)(x), [3.0, 3.0, 3.0])
        self.assertArrayClose(make_terminal("linear", offset=1.0, slope=2.0)(x), [1.0, 3.0, -3.0])
        self.assertArrayClose(make_terminal("gaussian_bump", width=1.0)(x), np.exp(-x[:, 0] ** 2 / 2))
        self.assertArrayClose(make_terminal("cosine", frequency=2.0)(x), np.cos(2 * x[:, 0]))

    def test_clamped_polynomial(self):
        terminal = make_terminal("polynomial_clamped", coefficients=[0.0, 0.0, 0.0, 1.0], clamp=10.0)
        self.assertLess(np.max(np.abs(terminal(np.linspace(-100, 100, 11)[:, None]))), 10.0 + 1e-12)
        self.assertAlmostEqual(terminal(np.array([[0.1]]))[0], 1e-3, places=8)

    def test_gradients_match_finite_differences(self):
        x = np.linspace(-1.5, 1.5, 9)[:, None]
        h = 1e-6
        for terminal in [make_terminal("linear", slope=-0.5),
                         make_terminal("polynomial_clamped", coefficients=[1.0, -1.0, 0.5], clamp=3.0),
                         make_terminal("gaussian_bump", amplitude=2.0, center=0.3, width=0.7),
                         make_terminal("cosine", amplitude=1.5, frequency=2.0, phase=0.1),
                         make_terminal("constant") + make_terminal("cosine")]:
            numeric = (terminal(x + h) - terminal(x - h)) / (2 * h)
            self.assertArrayClose(terminal.gradient(x)[:, 0], numeric, atol=1e-6, msg=terminal.family)

    def test_sum(self):
        total = make_terminal("constant", value=1.0) + make_terminal("linear", slope=1.0)
        self.assertEqual(total.family, "sum")
        self.assertArrayClose(total(np.array([[2.0]])), [3.0])
        self.assertEqual(len(total.to_dict()["parts"]), 2)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            make_terminal("sum")
        with self.assertRaises(InvalidArgumentError):
            make_terminal("constant", slope=1.0)
        with self.assertRaises(InvalidArgumentError):
            make_terminal("gaussian_bump", width=0.0)
        with self.assertRaises(InvalidArgumentError):
            make_terminal("polynomial_clamped", clamp=-1.0)
