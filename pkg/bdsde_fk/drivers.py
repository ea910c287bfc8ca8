"""
Closed registries of BDSDE drivers (f, g) and terminal conditions φ, and the
empirical validation of the Lipschitz, monotonicity and periodicity
conditions they declare.

Driver families
---------------
affine: f = a·y + b·Σz + h0 + forcing·sin(2πt/tau),  g = beta·y + c·Σz + g0
trig:   f = a·y + cf·cos(y) + h0,                    g = gs·sin(y) + gc·cos(y)

Terminal families
-----------------
constant, linear (offset + slope·Σx), polynomial_clamped (L·tanh(P(x_1)/L)),
gaussian_bump, cosine, sum (of other terminals)
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import attrs
import numpy as np

from .errors import InvalidArgumentError
from .seeding import generator

logger = logging.getLogger("bdsde_fk")

DRIVER_FAMILIES = ("affine", "trig")
TERMINAL_FAMILIES = ("constant", "linear", "polynomial_clamped", "gaussian_bump", "cosine", "sum")
DEFAULT_ALPHA = 0.5

DRIVER_PARAMETERS = {
    "affine": ("a", "b", "h0", "forcing", "tau", "beta", "c", "g0"),
    "trig": ("a", "cf", "h0", "gs", "gc"),
}
TERMINAL_PARAMETERS = {
    "constant": ("value",),
    "linear": ("offset", "slope"),
    "polynomial_clamped": ("coefficients", "clamp"),
    "gaussian_bump": ("amplitude", "center", "width"),
    "cosine": ("amplitude", "frequency", "phase"),
}


def _zsum(z):
    return np.sum(z, axis=-1)


@attrs.frozen
class Driver:
    family: str = attrs.field(validator=attrs.validators.in_(DRIVER_FAMILIES))
    params: tuple = ()              # sorted (name, value) pairs
    lipschitz_K: float = 0.0
    margin_K: float = 0.0           # z-Lipschitz constant of f, y-Lipschitz constant of g
    alpha: float = attrs.field(default=DEFAULT_ALPHA)
    alpha_z: float = 0.0            # α_t: constant z-Lipschitz factor of g
    growth_gamma: Optional[float] = None
    monotonicity_mu: Optional[float] = None
    periodic_tau: Optional[float] = None
    time_independent: bool = True
    dim: int = 1

    @alpha.validator
    def _check_alpha(self, attribute, value):
        if not 0 < value < 1:
            raise InvalidArgumentError(f"alpha must lie in (0, 1), got {value}")

    def param(self, name, default=0.0):
        return dict(self.params).get(name, default)

    @property
    def z_dependent(self):
        return self.family == "affine" and (self.param("b") != 0 or self.param("c") != 0)

    def _forcing(self, t):
        amplitude = self.param("forcing")
        if amplitude == 0:
            return 0.0
        tau = self.param("tau", 1.0)
        return amplitude * np.sin(2 * np.pi * np.mod(t, tau) / tau)

    def f(self, t, x, y, z):
        """Values of f for arrays y (M,), z (M, d); x is (M, d)."""
        if self.family == "affine":
            return (self.param("a") * y + self.param("b") * _zsum(z) + self.param("h0")
                    + self._forcing(t))
        return self.param("a") * y + self.param("cf") * np.cos(y) + self.param("h0")

    def g(self, t, x, y, z):
        if self.family == "affine":
            return self.param("beta") * y + self.param("c") * _zsum(z) + self.param("g0")
        return self.param("gs") * np.sin(y) + self.param("gc") * np.cos(y)

    def f_y(self, t, x, y, z):
        if self.family == "affine":
            return np.full_like(np.asarray(y, dtype=float), self.param("a"))
        return self.param("a") - self.param("cf") * np.sin(y)

    def g_y(self, t, x, y, z):
        if self.family == "affine":
            return np.full_like(np.asarray(y, dtype=float), self.param("beta"))
        return self.param("gs") * np.cos(y) - self.param("gc") * np.sin(y)

    def alpha_profile(self, t, x):
        """α_t(x) of the g-Lipschitz condition in z."""
        return np.full(len(np.atleast_2d(x)), self.alpha_z)

    def to_dict(self):
        return {"family": self.family, **dict(self.params), "alpha": self.alpha, "dim": self.dim,
                "growth_gamma": self.growth_gamma}


def make_driver(family, alpha=DEFAULT_ALPHA, growth_gamma=None, dim=1, **params):
    """
    Build a driver and derive its metadata from the parameters.

    Lipschitz constants follow from |u + v|² <= 2|u|² + 2|v|² when f or g
    depend on both y and z.
    """
    if family not in DRIVER_FAMILIES:
        raise InvalidArgumentError(f"Got unexpected driver family {family}")
    unknown = set(params) - set(DRIVER_PARAMETERS[family])
    if unknown:
        raise InvalidArgumentError(f"Unknown {family} driver parameter(s): {', '.join(sorted(unknown))}")
    p = {k: float(v) for k, v in params.items()}
    a = p.get("a", 0.0)
    if family == "affine":
        b, beta, c = p.get("b", 0.0), p.get("beta", 0.0), p.get("c", 0.0)
        k_f = a ** 2 if b == 0 else 2 * max(a ** 2, b ** 2 * dim)
        k_fz = b ** 2 * dim
        if c == 0:
            k_g, alpha_z = beta ** 2, 0.0
        elif beta == 0:
            k_g, alpha_z = 0.0, c ** 2 * dim
        else:
            k_g, alpha_z = 2 * beta ** 2, 2 * c ** 2 * dim
        upper = a
        forcing = p.get("forcing", 0.0)
        tau = p.get("tau", 1.0) if forcing != 0 else None
        if tau is not None and tau <= 0:
            raise InvalidArgumentError(f"Forcing period must be > 0, got {tau}")
        time_independent = forcing == 0
        if growth_gamma is None and beta == 0 and c == 0:
            growth_gamma = 0.5
    else:
        cf = p.get("cf", 0.0)
        k_f = (abs(a) + abs(cf)) ** 2
        k_fz = 0.0
        k_g = (abs(p.get("gs", 0.0)) + abs(p.get("gc", 0.0))) ** 2
        alpha_z = 0.0
        upper = a + abs(cf)
        tau = None
        time_independent = True
        if growth_gamma is None:
            growth_gamma = 0.5
    mu = -upper if upper < 0 else None
    return Driver(family, tuple(sorted(p.items())), lipschitz_K=max(k_f, k_g), margin_K=max(k_fz, k_g),
                  alpha=alpha, alpha_z=alpha_z,
                  growth_gamma=growth_gamma, monotonicity_mu=mu, periodic_tau=tau,
                  time_independent=time_independent, dim=dim)


def monotonicity_margin(driver, kernel, discount):
    """
    2μ - K' - K/(1-α) - K·M, or -inf when the driver declares no μ.

    K bounds the z-dependence of f and the y-dependence of g; the
    y-dependence of f enters through μ alone.
    """
    if driver.monotonicity_mu is None:
        return -np.inf
    K = driver.margin_K
    return 2 * driver.monotonicity_mu - discount - K / (1 - driver.alpha) - K * kernel.bound_M


@dataclass
class DriverReport:
    f_lipschitz_ratio: float
    g_lipschitz_excess: float
    alpha_product: Optional[float]
    monotonicity_excess: Optional[float]
    periodicity_error: Optional[float]
    growth_ratio: Optional[float]
    margin: Optional[float]
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items()}
        d["passed"] = self.passed
        return d


def validate_driver(driver, probe, kernel=None, discount=None, tolerance=1e-10):
    """
    Check the declared inequalities of a driver on random probe tuples.

    Parameters
    ----------
    driver: Driver

    probe: ProbeSpec
        Region for x and t; y and z are drawn in [-value_bound, value_bound].

    kernel: CovarianceKernel or None
        Needed for the α_t·q(t,x,x) <= α check and for the (M) margin.

    discount: float or None
        K' for the margin; defaults to μ/2 when μ is declared.

    Returns
    -------
    DriverReport (report only, never raises on a violated condition)
    """
    probe.check()
    rng = generator(probe.seed, "driver")
    n, d = probe.n_samples, driver.dim
    t = probe.times(rng, n)
    x = probe.points(rng, n)
    bound = probe.value_bound
    y1, y2 = rng.uniform(-bound, bound, size=(2, n))
    z1, z2 = rng.uniform(-bound, bound, size=(2, n, d))
    dy2 = (y1 - y2) ** 2
    dz2 = ((z1 - z2) ** 2).sum(axis=1)
    K = driver.lipschitz_K
    df = driver.f(t, x, y1, z1) - driver.f(t, x, y2, z2)
    dg = driver.g(t, x, y1, z1) - driver.g(t, x, y2, z2)
    alpha_t = driver.alpha_profile(t, x)
    report = DriverReport(
        f_lipschitz_ratio=float(np.max(df ** 2 / (dy2 + dz2))),
        g_lipschitz_excess=float(np.max(dg ** 2 - K * dy2 - alpha_t * dz2)),
        alpha_product=None, monotonicity_excess=None, periodicity_error=None, growth_ratio=None, margin=None,
    )
    scale = 1 + bound ** 2
    if report.f_lipschitz_ratio > K * (1 + 1e-9) + tolerance:
        report.violations.append("f_lipschitz")
    if report.g_lipschitz_excess > tolerance * scale:
        report.violations.append("g_lipschitz")
    if kernel is not None:
        report.alpha_product = float(np.max(alpha_t * kernel.diagonal(t, x)))
        if report.alpha_product > driver.alpha:
            report.violations.append("alpha")
    if driver.monotonicity_mu is not None:
        excess = (y1 - y2) * (driver.f(t, x, y1, z1) - driver.f(t, x, y2, z1)) + driver.monotonicity_mu * dy2
        report.monotonicity_excess = float(np.max(excess))
        if report.monotonicity_excess > tolerance * scale:
            report.violations.append("monotonicity")
    if driver.periodic_tau is not None:
        tau = driver.periodic_tau
        error_f = np.abs(driver.f(t + tau, x, y1, z1) - driver.f(t, x, y1, z1))
        error_g = np.abs(driver.g(t + tau, x, y1, z1) - driver.g(t, x, y1, z1))
        report.periodicity_error = float(max(np.max(error_f), np.max(error_g)))
        if report.periodicity_error > 1e-12:
            report.violations.append("periodicity")
    if driver.growth_gamma is not None:
        g00 = driver.g(t, x, np.zeros(n), np.zeros((n, d)))
        g_zero_z = driver.g(t, x, y1, np.zeros((n, d)))
        denominator = g00 ** 2 + np.abs(y1) ** (2 * driver.growth_gamma)
        report.growth_ratio = float(np.max(g_zero_z ** 2 / np.maximum(denominator, 1e-300)))
    if kernel is not None and driver.monotonicity_mu is not None:
        discount = driver.monotonicity_mu / 2 if discount is None else discount
        report.margin = float(monotonicity_margin(driver, kernel, discount))
    for v in report.violations:
        logger.debug(f"Driver {driver.family} violates {v}")
    return report


@attrs.frozen
class TerminalCondition:
    family: str = attrs.field(validator=attrs.validators.in_(TERMINAL_FAMILIES))
    params: tuple = ()
    parts: tuple = ()

    def param(self, name, default=0.0):
        return dict(self.params).get(name, default)

    def __call__(self, x):
        return self.value(x)

    def value(self, x):
        """φ(x) for x of shape (M, d)."""
        x = np.asarray(x, dtype=float)
        x = x.reshape(len(x), -1)
        if self.family == "constant":
            return np.full(len(x), self.param("value", 1.0))
        if self.family == "linear":
            return self.param("offset") + self.param("slope", 1.0) * x.sum(axis=1)
        if self.family == "polynomial_clamped":
            clamp = self.param("clamp", 50.0)
            return clamp * np.tanh(self._polynomial(x[:, 0]) / clamp)
        if self.family == "gaussian_bump":
            r2 = ((x - self.param("center")) ** 2).sum(axis=1)
            return self.param("amplitude", 1.0) * np.exp(-r2 / (2 * self.param("width", 1.0) ** 2))
        if self.family == "cosine":
            return self.param("amplitude", 1.0) * np.cos(self.param("frequency", 1.0) * x[:, 0] + self.param("phase"))
        return sum(part.value(x) for part in self.parts)

    def gradient(self, x):
        """∇φ(x) of shape (M, d)."""
        x = np.asarray(x, dtype=float)
        x = x.reshape(len(x), -1)
        out = np.zeros_like(x)
        if self.family == "linear":
            out[:] = self.param("slope", 1.0)
        elif self.family == "polynomial_clamped":
            clamp = self.param("clamp", 50.0)
            coefficients = self._coefficients()
            derivative = np.polynomial.polynomial.polyval(x[:, 0], np.polynomial.polynomial.polyder(coefficients))
            out[:, 0] = derivative / np.cosh(self._polynomial(x[:, 0]) / clamp) ** 2
        elif self.family == "gaussian_bump":
            width2 = self.param("width", 1.0) ** 2
            out = -(x - self.param("center")) / width2 * self.value(x)[:, None]
        elif self.family == "cosine":
            frequency = self.param("frequency", 1.0)
            out[:, 0] = -self.param("amplitude", 1.0) * frequency * np.sin(frequency * x[:, 0] + self.param("phase"))
        elif self.family == "sum":
            out = sum(part.gradient(x) for part in self.parts)
        return out

    def _coefficients(self):
        return np.asarray(self.param("coefficients", (0.0, 1.0)), dtype=float)

    def _polynomial(self, v):
        return np.polynomial.polynomial.polyval(v, self._coefficients())

    def __add__(self, other):
        return TerminalCondition("sum", parts=(self, other))

    def to_dict(self):
        d = {"family": self.family, **{k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params}}
        if self.parts:
            d["parts"] = [p.to_dict() for p in self.parts]
        return d


def make_terminal(family, **params):
    if family not in TERMINAL_FAMILIES or family == "sum":
        raise InvalidArgumentError(f"Got unexpected terminal family {family}")
    unknown = set(params) - set(TERMINAL_PARAMETERS[family])
    if unknown:
        raise InvalidArgumentError(f"Unknown {family} terminal parameter(s): {', '.join(sorted(unknown))}")
    normalized = {}
    for k, v in params.items():
        normalized[k] = tuple(float(c) for c in v) if isinstance(v, (list, tuple, np.ndarray)) else float(v)
    if family == "gaussian_bump" and normalized.get("width", 1.0) <= 0:
        raise InvalidArgumentError("Bump width must be > 0")
    if family == "polynomial_clamped" and normalized.get("clamp", 50.0) <= 0:
        raise InvalidArgumentError("Clamp must be > 0")
    return TerminalCondition(family, tuple(sorted(normalized.items())))
