"""
Reference values: the Γ-functional of linear BDSDEs, the explicit
Feynman-Kac estimator with the field held fixed, and closed forms of the
deterministic reductions.
"""

import logging
from dataclasses import dataclass

import attrs
import numpy as np

from .drivers import make_driver
from .errors import InvalidArgumentError
from .forward_sde import make_coefficients, simulate
from .kunita_calculus import kernel_diagonal_along, path_increments

logger = logging.getLogger("bdsde_fk")

MAX_EXPONENT = 700.0
QUADRATURE_NODES = 80


@attrs.frozen
class LinearDriver:
    """f = alpha·y + h, g = beta·y with constant coefficients."""
    h: float = 0.0
    alpha: float = 0.0
    beta: float = 1.0

    def to_driver(self, **kwargs):
        return make_driver("affine", a=self.alpha, h0=self.h, beta=self.beta, **kwargs)


@attrs.define(frozen=True, slots=False, eq=False)
class GammaFunctional:
    """Cumulative exponents E_k along each path; Γ_s^r = exp(E_r - E_s)."""
    exponents: np.ndarray           # (N+1, M)
    clamped: bool = False

    def between(self, s, r):
        exponent = self.exponents[r] - self.exponents[s]
        if np.any(np.abs(exponent) > MAX_EXPONENT):
            logger.warning(f"Γ exponent between steps {s} and {r} clamped to ±{MAX_EXPONENT:g}")
            exponent = np.clip(exponent, -MAX_EXPONENT, MAX_EXPONENT)
        return np.exp(exponent)


def gamma_functional(linear, bundle, realization, increments=None):
    """
    Per-step exponents α Δt + β ΔB_k(X_{k+1}) - ½ β² q(t_k, X_{k+1}, X_{k+1}) Δt,
    accumulated from the start of the bundle grid.
    """
    if increments is None:
        increments = path_increments(realization, bundle)
    dt = bundle.dt[:, None]
    diagonal = kernel_diagonal_along(realization.kernel, bundle)
    steps = linear.alpha * dt + linear.beta * increments - 0.5 * linear.beta ** 2 * diagonal * dt
    exponents = np.vstack([np.zeros((1, bundle.n_paths)), np.cumsum(steps, axis=0)])
    clamped = bool(np.any(np.abs(exponents) > MAX_EXPONENT))
    if clamped:
        logger.warning("Γ exponents exceed the overflow clamp on some paths")
    return GammaFunctional(exponents, clamped)


def linear_solution_samples(linear, terminal, bundle, realization, s=0):
    """Per-path φ(X_T)Γ_s^T + Σ_{k>=s} Γ_s^{t_k} h Δt_k, whose conditional mean given X_s is Y_s."""
    gamma = gamma_functional(linear, bundle, realization)
    values = terminal.value(bundle.states[-1]) * gamma.between(s, bundle.n_steps)
    for k in range(s, bundle.n_steps):
        values = values + gamma.between(s, k) * linear.h * bundle.dt[k]
    return values


@dataclass
class FkEstimate:
    mean: float
    stderr: float
    n_paths: int
    n_steps: int

    def to_dict(self):
        return {"mean": self.mean, "stderr": self.stderr, "M": self.n_paths, "N": self.n_steps}


def brownian_bundle(x, time_grid, n_paths, seed):
    """Paths x + W_r - W_t (b = 0, σ = I) on time_grid, to be declared before sampling the field."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    coefficients = make_coefficients("constant", dim=len(x), drift=0.0, diffusion=1.0)
    return simulate(coefficients, x, time_grid, n_paths, seed)


def explicit_linear_fk(terminal, kernel, realization, t, x, n_paths, seed):
    """
    E_W[φ(x + W_T - W_t) exp(∫ ⃖B(dr, x + W_r - W_t) - ½ ∫ q dr)] with the
    field realization held fixed.

    The W-paths are brownian_bundle(x, grid from t, n_paths, seed); their
    positions must have been declared when the realization was sampled.
    """
    j = realization.step_index(t)
    if j >= realization.n_steps:
        raise InvalidArgumentError(f"No realization steps after t={t}")
    bundle = brownian_bundle(x, realization.time_grid[j:], n_paths, seed)
    increments = path_increments(realization, bundle)
    dt = bundle.dt[:, None]
    exponent = (increments - 0.5 * kernel_diagonal_along(kernel, bundle) * dt).sum(axis=0)
    if np.any(np.abs(exponent) > MAX_EXPONENT):
        logger.warning("Feynman-Kac exponent clamped on some paths")
        exponent = np.clip(exponent, -MAX_EXPONENT, MAX_EXPONENT)
    samples = terminal.value(bundle.states[-1]) * np.exp(exponent)
    stderr = float(np.std(samples, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return FkEstimate(float(np.mean(samples)), stderr, n_paths, bundle.n_steps)


def _is_standard_brownian(coefficients):
    return (coefficients.family == "constant" and np.allclose(coefficients.b0, 0)
            and np.allclose(coefficients.sigma0, np.eye(coefficients.dim)))


def deterministic_fk(terminal, lam, coefficients, t, T, x, n_paths=100_000, n_steps=64, seed=0):
    """
    e^{λ(T-t)} E[φ(X_T^{t,x})], the g ≡ 0 reduction with f(y) = λy.

    Uses Gauss-Hermite quadrature when b = 0, σ = I (d <= 3), Monte Carlo
    otherwise.
    """
    if T < t:
        raise InvalidArgumentError(f"Need t <= T, got t={t}, T={T}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    growth = np.exp(lam * (T - t))
    if T == t:
        return float(growth * terminal.value(x[None, :])[0])
    if _is_standard_brownian(coefficients) and coefficients.dim <= 3:
        nodes, weights = np.polynomial.hermite_e.hermegauss(QUADRATURE_NODES)
        weights = weights / np.sqrt(2 * np.pi)
        d = coefficients.dim
        grids = np.meshgrid(*([nodes] * d), indexing="ij")
        points = np.stack([g.ravel() for g in grids], axis=1)
        w = np.prod(np.meshgrid(*([weights] * d), indexing="ij"), axis=0).ravel()
        values = terminal.value(x[None, :] + np.sqrt(T - t) * points)
        return float(growth * (w @ values))
    bundle = simulate(coefficients, x, np.linspace(t, T, n_steps + 1), n_paths, seed)
    return float(growth * np.mean(terminal.value(bundle.states[-1])))


def heat_bump_solution(x, t, T, amplitude=1.0, center=0.0, width=1.0, sigma=1.0):
    """
    E[φ(x + σ(W_T - W_t))] for the bump φ(x) = A exp(-(x-m)²/(2w²)) in one
    dimension, and its x-derivative.
    """
    x = np.asarray(x, dtype=float)
    variance = width ** 2 + sigma ** 2 * (T - t)
    value = amplitude * width / np.sqrt(variance) * np.exp(-(x - center) ** 2 / (2 * variance))
    return value, -(x - center) / variance * value


def periodic_ode_solution(t, mu, amplitude, tau, h0=0.0):
    """
    Bounded solution of y' = μy - h0 - A sin(2πt/τ), the backward equation
    with f = -μy + h0 + A sin(2πt/τ).
    """
    omega = 2 * np.pi / tau
    t = np.asarray(t, dtype=float)
    return h0 / mu + amplitude * (mu * np.sin(omega * t) + omega * np.cos(omega * t)) / (mu ** 2 + omega ** 2)


def constant_relaxation(t, horizon, mu, c):
    """Solution on [0, horizon] of the backward ODE with f = -μ(y - c) and zero terminal value."""
    return c * (1 - np.exp(-mu * (horizon - np.asarray(t, dtype=float))))
