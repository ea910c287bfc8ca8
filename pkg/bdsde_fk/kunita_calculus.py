"""
Backward Itô-Kunita integration against B(ds, X_s) along simulated paths,
its quadratic variation, and residual checks of the Itô formula and of the
product rule.

Integrands are sampled on the bundle grid as arrays of shape (N+1, M). The
backward integral uses the forward point: step k pairs f_{k+1} with
ΔB_k(X_{k+1}).
"""

import logging
from dataclasses import dataclass

import attrs
import numpy as np

from .errors import InvalidArgumentError

logger = logging.getLogger("bdsde_fk")


def grid_offset(realization, time_grid):
    """Index of the realization step at which the bundle grid starts, checking alignment."""
    j = realization.step_index(time_grid[0])
    n = len(time_grid) - 1
    if j + n > realization.n_steps or not np.allclose(realization.time_grid[j:j + n + 1], time_grid, rtol=0, atol=1e-9):
        raise InvalidArgumentError("Bundle grid is not a contiguous part of the realization grid")
    return j


def path_increments(realization, bundle):
    """ΔB_k(X_{k+1}) for every step and path, shape (N, M)."""
    j = grid_offset(realization, bundle.time_grid)
    return np.stack([realization.increments_at(j + k, bundle.states[k + 1]) for k in range(bundle.n_steps)])


def kernel_diagonal_along(kernel, bundle):
    """q(t_k, X_{k+1}, X_{k+1}) for every step and path, shape (N, M): the variance rate of path_increments."""
    return np.stack([kernel.diagonal(bundle.time_grid[k], bundle.states[k + 1]) for k in range(bundle.n_steps)])


def as_path_array(value, bundle):
    return np.broadcast_to(np.asarray(value, dtype=float), (bundle.n_steps + 1, bundle.n_paths))


@attrs.frozen(eq=False)
class BackwardIntegralResult:
    values: np.ndarray
    quadratic_variation: np.ndarray
    n_steps: int


def backward_integral(integrand, realization, bundle, increments=None):
    """
    Per path Σ_k f_{k+1} ΔB_k(X_{k+1}) and the realized quadratic variation.

    increments may be passed to reuse a previous path_increments call.
    """
    f = as_path_array(integrand, bundle)
    if increments is None:
        increments = path_increments(realization, bundle)
    terms = f[1:] * increments
    return BackwardIntegralResult(values=terms.sum(axis=0), quadratic_variation=(terms ** 2).sum(axis=0),
                                  n_steps=bundle.n_steps)


def quadratic_variation(integrand, realization, bundle, increments=None):
    return backward_integral(integrand, realization, bundle, increments).quadratic_variation


def bracket_quadrature(integrand, kernel, bundle):
    """Time quadrature Σ_k f_{k+1}² q(t_k, X_{k+1}, X_{k+1}) Δt_k, the limit of the realized quadratic variation."""
    f = as_path_array(integrand, bundle)
    return (f[1:] ** 2 * kernel_diagonal_along(kernel, bundle) * bundle.dt[:, None]).sum(axis=0)


def exponential_weight(bundle, beta):
    """Q_t = e^{βt}, shape (N+1, M)."""
    return as_path_array(np.exp(beta * bundle.time_grid)[:, None], bundle).copy()


def clamped_intensity(kernel, bundle):
    """q̃ = q(t_k, X_k, X_k) ∨ 1 at the left point of each step, shape (N, M)."""
    diag = np.stack([kernel.diagonal(bundle.time_grid[k], bundle.states[k]) for k in range(bundle.n_steps)])
    return np.maximum(diag, 1.0)


def kernel_weight(kernel, bundle, beta):
    """Q_t = exp(β ∫_{t_0}^t q̃ ds), shape (N+1, M)."""
    increments = clamped_intensity(kernel, bundle) * bundle.dt[:, None]
    exponent = np.vstack([np.zeros((1, bundle.n_paths)), np.cumsum(increments, axis=0)])
    return np.exp(beta * exponent)


def exponential_moment(kernel, bundle, beta):
    """Empirical E exp(β ∫ q̃ ds) over the whole bundle horizon, with its standard error."""
    weights = kernel_weight(kernel, bundle, beta)[-1]
    return float(np.mean(weights)), float(np.std(weights, ddof=1) / np.sqrt(len(weights))) if len(weights) > 1 else 0.0


TEST_FUNCTIONS = {
    "square": (lambda s: s ** 2, lambda s: 2 * s, lambda s: 2 * np.ones_like(s)),
    "quartic": (lambda s: s ** 4, lambda s: 4 * s ** 3, lambda s: 12 * s ** 2),
}

EXP_CLAMP = 5.0


def _exp_clamped(s):
    return np.exp(EXP_CLAMP * np.tanh(s / EXP_CLAMP))


def _exp_clamped_d1(s):
    return _exp_clamped(s) / np.cosh(s / EXP_CLAMP) ** 2


def _exp_clamped_d2(s):
    sech2 = 1.0 / np.cosh(s / EXP_CLAMP) ** 2
    return _exp_clamped(s) * (sech2 ** 2 - 2.0 / EXP_CLAMP * sech2 * np.tanh(s / EXP_CLAMP))


TEST_FUNCTIONS["exp_clamped"] = (_exp_clamped, _exp_clamped_d1, _exp_clamped_d2)


@attrs.frozen(eq=False)
class ProcessSpec:
    """
    S_t = S_0 + ∫ f ds + ∫ g ⃖B(ds, X_s) + ∫ h dW_s sampled on a bundle grid.

    f, g broadcast to (N+1, M); h broadcasts to (N+1, M, d).
    Discretely S_{k+1} = S_k + (f_k Δt_k + h_k·ΔW_k) + g_{k+1} ΔB_k(X_{k+1}).
    """
    s0: object = 0.0
    f: object = 0.0
    g: object = 0.0
    h: object = 0.0

    def pieces(self, bundle, increments):
        f = as_path_array(self.f, bundle)
        g = as_path_array(self.g, bundle)
        h = np.broadcast_to(np.asarray(self.h, dtype=float), (bundle.n_steps + 1, bundle.n_paths, bundle.dim))
        forward = f[:-1] * bundle.dt[:, None] + np.einsum("kmi,kmi->km", h[:-1], bundle.dW)
        backward = g[1:] * increments
        return f, g, h, forward, backward

    def path(self, bundle, increments):
        _, _, _, forward, backward = self.pieces(bundle, increments)
        s = np.empty((bundle.n_steps + 1, bundle.n_paths))
        s[0] = np.broadcast_to(np.asarray(self.s0, dtype=float), (bundle.n_paths,))
        s[1:] = s[0] + np.cumsum(forward + backward, axis=0)
        return s


@dataclass
class ResidualStatistics:
    mean: float
    stderr: float
    n_paths: int
    dt: float
    residuals: np.ndarray

    @classmethod
    def from_residuals(cls, residuals, bundle):
        n = len(residuals)
        stderr = float(np.std(residuals, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(np.mean(residuals)), stderr, n, float(np.max(bundle.dt)), residuals)

    def to_record(self):
        return {"mean": self.mean, "stderr": self.stderr, "N": self.n_paths, "dt": self.dt}


def ito_residual(process, phi, realization, bundle, kernel=None, g_correction=True, h_correction=True):
    """
    Per-path residual φ(S_T) - [φ(S_0) + ∫φ'(S)dS - ½∫φ''(S) g² q ds + ½∫φ''(S)|h|² ds].

    The correction on the backward term carries the minus sign, the one on
    the Brownian term the plus sign. Either correction can be dropped to
    expose its size.
    """
    if phi not in TEST_FUNCTIONS:
        raise InvalidArgumentError(f"Got unexpected test function {phi}, expected one of {sorted(TEST_FUNCTIONS)}")
    value, d1, d2 = TEST_FUNCTIONS[phi]
    kernel = realization.kernel if kernel is None else kernel
    increments = path_increments(realization, bundle)
    f, g, h, forward, backward = process.pieces(bundle, increments)
    s = process.path(bundle, increments)
    dt = bundle.dt[:, None]
    rhs = value(s[0]) + (d1(s[:-1]) * forward).sum(axis=0) + (d1(s[1:]) * backward).sum(axis=0)
    if g_correction:
        rhs = rhs - 0.5 * (d2(s[1:]) * g[1:] ** 2 * kernel_diagonal_along(kernel, bundle) * dt).sum(axis=0)
    if h_correction:
        rhs = rhs + 0.5 * (d2(s[:-1]) * (h[:-1] ** 2).sum(axis=2) * dt).sum(axis=0)
    return ResidualStatistics.from_residuals(value(s[-1]) - rhs, bundle)


def product_rule_residual(process, weight, realization, bundle):
    """
    Terminal residual of d(SQ) = S dQ + Q dS for a bounded-variation weight Q
    of shape (N+1, M); the backward piece of dS is paired with Q_{k+1}.
    """
    q = as_path_array(weight, bundle)
    increments = path_increments(realization, bundle)
    _, _, _, forward, backward = process.pieces(bundle, increments)
    s = process.path(bundle, increments)
    terms = s[:-1] * np.diff(q, axis=0) + (q[:-1] * forward + q[1:] * backward)
    residual = s[-1] * q[-1] - s[0] * q[0] - np.cumsum(terms, axis=0)[-1]
    return ResidualStatistics.from_residuals(residual, bundle)
