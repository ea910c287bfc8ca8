"""
Least-squares Monte Carlo solver for the backward doubly stochastic equation

    Y_t = φ(X_T) + ∫_t^T f(s, X_s, Y_s, Z_s) ds + ∫_t^T g(s, X_s, Y_s, Z_s) ⃖B(ds, X_s) - ∫_t^T Z_s dW_s

on one fixed field realization, with the Picard contraction monitor, the
variational representation of Z and moment diagnostics.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import attrs
import numpy as np

from . import container
from .errors import ConditioningError, DivergenceError, InvalidArgumentError
from .kunita_calculus import clamped_intensity, path_increments
from .regression import BasisConfig, fit

logger = logging.getLogger("bdsde_fk")

MAX_FLOW_CONDITION = 1e12


@attrs.frozen
class SchemeConfig:
    basis: BasisConfig = BasisConfig()
    n_inner: int = attrs.field(default=0)
    control_variate: bool = True

    @n_inner.validator
    def _check_inner(self, attribute, value):
        if value < 0:
            raise InvalidArgumentError(f"n_inner must be >= 0, got {value}")


@attrs.define(frozen=True, slots=False, eq=False)
class BackwardSolution:
    time_grid: np.ndarray
    Y: np.ndarray               # (N+1, M)
    Z: np.ndarray               # (N, M, d)
    y_tables: list              # RegressionTable per step k < N
    z_tables: list
    terminal: object
    realization_id: str
    diagnostics: dict = attrs.field(factory=dict)

    @property
    def n_steps(self):
        return len(self.time_grid) - 1

    @property
    def n_paths(self):
        return self.Y.shape[1]

    def step_index(self, t, atol=1e-9):
        j = int(np.argmin(np.abs(self.time_grid - t)))
        if abs(self.time_grid[j] - t) > atol * max(1.0, abs(t)):
            raise InvalidArgumentError(f"Time {t} is not on the solution grid")
        return j

    def value(self, k, x):
        """u(t_k, x) at arbitrary points x (n, d)."""
        if k == self.n_steps:
            return self.terminal.value(x)
        return self.y_tables[k].evaluate(x)

    def value_at(self, t, x):
        return self.value(self.step_index(t), x)

    def standard_error(self, k, x):
        if k == self.n_steps:
            return np.zeros(len(np.atleast_2d(x)))
        return self.y_tables[k].standard_error(x)

    def gradient(self, k, x):
        """∇_x u(t_k, x), shape (n, d)."""
        if k == self.n_steps:
            return self.terminal.gradient(x)
        return self.y_tables[k].gradient(x)

    def _container(self):
        header = {"kind": "backward_solution", "realization_id": self.realization_id,
                  "terminal": self.terminal.to_dict(), "diagnostics": self.diagnostics}
        arrays = [("time_grid", self.time_grid), ("Y", self.Y), ("Z", self.Z)]
        for k, (yt, zt) in enumerate(zip(self.y_tables, self.z_tables)):
            arrays += yt.to_arrays(f"y{k}") + zt.to_arrays(f"z{k}")
        return header, arrays

    def to_bytes(self):
        return container.dumps(*self._container())

    def save(self, path):
        container.write(path, *self._container())


def _check_finite(values, step):
    bad = ~np.isfinite(values.reshape(len(values), -1)).all(axis=1)
    if np.any(bad):
        raise DivergenceError("Non-finite backward value", step=step, path=int(np.argmax(bad)))


def _z_step(basis, x_k, y_next, dW_k, dt, control_variate, step):
    """Regression estimate of Z_k = E[Y_{k+1} ΔW_k | X_k] / Δt_k."""
    if control_variate:
        y_next = y_next - fit(basis, x_k, y_next, step).evaluate(x_k)
    table = fit(basis, x_k, y_next[:, None] * dW_k / dt, step)
    return table, table.evaluate(x_k).reshape(len(x_k), -1)


def solve(driver, terminal, bundle, realization, scheme=SchemeConfig(), increments=None):
    """
    Backward regression recursion on one field realization.

    Parameters
    ----------
    driver: Driver
        f and g; the caller is expected to have run validate_driver on it.

    terminal: TerminalCondition

    bundle: PathBundle
        Forward paths; the realization must declare every X_{k+1} at step k.

    realization: FieldRealization
        Fixed field; only increments on [t_k, T] enter Y_k.

    scheme: SchemeConfig
        Basis, implicit inner iterations, Z control variate.

    Returns
    -------
    BackwardSolution with per-step regression tables, so that u(t_k, x) can
    be queried at any x.
    """
    if increments is None:
        increments = path_increments(realization, bundle)
    t, x = bundle.time_grid, bundle.states
    n, m, d = bundle.n_steps, bundle.n_paths, bundle.dim
    Y = np.empty((n + 1, m))
    Z = np.zeros((n, m, d))
    Y[n] = terminal.value(x[n])
    _check_finite(Y[n], n)
    y_tables, z_tables = [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        dt = t[k + 1] - t[k]
        if dt > 0:
            z_tables[k], Z[k] = _z_step(scheme.basis, x[k], Y[k + 1], bundle.dW[k], dt, scheme.control_variate, k)
        else:
            z_tables[k] = fit(scheme.basis, x[k], np.zeros((m, d)), k)
        backward = driver.g(t[k + 1], x[k + 1], Y[k + 1], Z[k]) * increments[k]
        target = Y[k + 1] + driver.f(t[k + 1], x[k + 1], Y[k + 1], Z[k]) * dt + backward
        y_tables[k] = fit(scheme.basis, x[k], target, k)
        Y[k] = y_tables[k].evaluate(x[k])
        for _ in range(scheme.n_inner):
            target = Y[k + 1] + driver.f(t[k], x[k], Y[k], Z[k]) * dt + backward
            y_tables[k] = fit(scheme.basis, x[k], target, k)
            Y[k] = y_tables[k].evaluate(x[k])
        _check_finite(Y[k], k)
        _check_finite(Z[k], k)
    logger.debug(f"Solved {n} backward steps on {m} paths (realization {realization.realization_id})")
    return BackwardSolution(
        time_grid=np.asarray(t, dtype=float), Y=Y, Z=Z, y_tables=y_tables, z_tables=z_tables,
        terminal=terminal, realization_id=realization.realization_id,
        diagnostics={"n_paths": m, "n_steps": n, "basis": attrs.asdict(scheme.basis), "n_inner": scheme.n_inner},
    )


@attrs.frozen
class WeightedNormConfig:
    """Norm E∫ q̃ e^{β∫_s^T q̃}|y|² ds + z_weight·E∫ e^{β∫_s^T q̃}|z|² ds, with q̃ = q(s, X_s, X_s) ∨ 1."""
    beta: float = attrs.field()
    z_weight: float = 1.0

    @beta.validator
    def _check_beta(self, attribute, value):
        if not value > 0:
            raise InvalidArgumentError(f"beta must be > 0, got {value}")


def choose_beta(lipschitz_K, alpha, a=None):
    """
    β = 2/a + K(a+1)/(Ka+α) for some a > 0 with ρ = Ka + α < 1.

    Returns the norm config together with a and ρ. By default a puts ρ
    halfway between α and 1.
    """
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    K = lipschitz_K
    if a is None:
        a = (1 - alpha) / (2 * K) if K > 0 else 1.0
    rho = K * a + alpha
    if a <= 0 or rho >= 1:
        raise InvalidArgumentError(f"Need a > 0 and Ka + alpha < 1, got a={a}, rho={rho}")
    beta = 2 / a + K * (a + 1) / rho
    z_weight = rho / (K * (a + 1)) if K > 0 else 1.0
    return WeightedNormConfig(beta=beta, z_weight=z_weight), a, rho


def _tail_weights(kernel, bundle, beta):
    """q̃_k and e^{β∫_{t_k}^T q̃}, both (N, M), computed in log space."""
    intensity = clamped_intensity(kernel, bundle)
    increments = intensity * bundle.dt[:, None]
    tail = np.cumsum(increments[::-1], axis=0)[::-1]
    return intensity, np.exp(beta * tail)


def weighted_norm(y, z, kernel, bundle, norm):
    """‖(y, z)‖²_{2,β} for y (N+1, M) and z (N, M, d), left-point quadrature."""
    intensity, weights = _tail_weights(kernel, bundle, norm.beta)
    dt = bundle.dt[:, None]
    y_part = (intensity * weights * y[:-1] ** 2 * dt).sum(axis=0)
    z_part = (weights * (z ** 2).sum(axis=2) * dt).sum(axis=0)
    return float(np.mean(y_part + norm.z_weight * z_part))


def picard_step(driver, terminal, bundle, increments, y_frozen, z_frozen, scheme=SchemeConfig()):
    """One application of Ψ: a backward regression pass with (y, z) frozen inside f and g."""
    t, x = bundle.time_grid, bundle.states
    n, m, d = bundle.n_steps, bundle.n_paths, bundle.dim
    Y = np.empty((n + 1, m))
    Z = np.zeros((n, m, d))
    Y[n] = terminal.value(x[n])
    for k in range(n - 1, -1, -1):
        dt = t[k + 1] - t[k]
        if dt > 0:
            _, Z[k] = _z_step(scheme.basis, x[k], Y[k + 1], bundle.dW[k], dt, scheme.control_variate, k)
        target = (Y[k + 1] + driver.f(t[k + 1], x[k + 1], y_frozen[k + 1], z_frozen[k]) * dt
                  + driver.g(t[k + 1], x[k + 1], y_frozen[k + 1], z_frozen[k]) * increments[k])
        Y[k] = fit(scheme.basis, x[k], target, k).evaluate(x[k])
        _check_finite(Y[k], k)
    return Y, Z


@dataclass
class ContractionReport:
    distances: List[float]
    ratios: List[float]
    beta: float
    a: float
    rho: float

    @property
    def median_ratio(self):
        tail = self.ratios[1:] if len(self.ratios) > 1 else self.ratios
        return float(np.median(tail)) if tail else 0.0

    def to_dict(self):
        return {"distances": self.distances, "ratios": self.ratios, "beta": self.beta, "a": self.a,
                "rho": self.rho, "median_ratio": self.median_ratio}


def picard_monitor(driver, terminal, bundle, realization, n_iter, norm=None, scheme=SchemeConfig(), a=None):
    """
    Run (Y⁰, Z⁰) = 0, (Yⁿ, Zⁿ) = Ψ(Yⁿ⁻¹, Zⁿ⁻¹) and report the weighted
    distances between successive iterates and their ratios.
    """
    if n_iter < 1:
        raise InvalidArgumentError(f"Need at least one Picard iteration, got {n_iter}")
    if norm is None:
        norm, a, rho = choose_beta(driver.lipschitz_K, driver.alpha, a)
    else:
        a = float("nan") if a is None else a
        rho = driver.lipschitz_K * a + driver.alpha
    increments = path_increments(realization, bundle)
    y = np.zeros((bundle.n_steps + 1, bundle.n_paths))
    z = np.zeros((bundle.n_steps, bundle.n_paths, bundle.dim))
    distances, ratios = [], []
    for i in range(n_iter):
        y_new, z_new = picard_step(driver, terminal, bundle, increments, y, z, scheme)
        distance = np.sqrt(weighted_norm(y_new - y, z_new - z, realization.kernel, bundle, norm))
        if distances:
            ratios.append(float(distance / distances[-1]) if distances[-1] > 0 else 0.0)
        distances.append(float(distance))
        logger.debug(f"Picard iteration {i + 1}: distance {distance:.4g}")
        y, z = y_new, z_new
    return ContractionReport(distances, ratios, norm.beta, float(a), float(rho))


@dataclass
class VariationalZ:
    """Per-path Z at step k from regression, from the ∇u surface and from the pathwise flow."""
    regression: np.ndarray
    surface: np.ndarray
    flow: np.ndarray

    @staticmethod
    def _relative(a, b):
        scale = np.sqrt(np.mean(b ** 2))
        return float(np.sqrt(np.mean((a - b) ** 2)) / scale) if scale > 0 else float(np.sqrt(np.mean(a ** 2)))

    def distances(self):
        return {"regression_vs_surface": self._relative(self.regression, self.surface),
                "flow_vs_surface": self._relative(self.flow, self.surface),
                "regression_vs_flow": self._relative(self.regression, self.flow)}


def _inverse_flow(flow):
    condition = np.linalg.cond(flow)
    if not np.all(np.isfinite(condition)) or np.max(condition) > MAX_FLOW_CONDITION:
        raise ConditioningError(f"Variational flow is singular (condition {np.max(condition):.3g})")
    return np.linalg.inv(flow)


def variational_z(solution, bundle, driver, terminal, realization, k=0, scheme=SchemeConfig()):
    """
    Z_k = ∇Y_k (∇X_k)^{-1} σ(X_k) with ∇Y_k = ∇u_k(X_k) ∇X_k.

    The surface estimate differentiates the step-k regression analytically.
    The flow estimate propagates ∇Y pathwise from ∇φ(X_N)∇X_N through the
    y-derivatives of f and g and regresses the result on X_k; z-dependence
    of the driver is not carried by the flow estimate.
    """
    if bundle.flow is None:
        raise InvalidArgumentError("variational_z needs a bundle simulated with_flow")
    x, flow = bundle.states, bundle.flow
    t = bundle.time_grid
    increments = path_increments(realization, bundle)
    sigma = bundle.coefficients.diffusion_at(x[k])
    inverse = _inverse_flow(flow[k])
    grad_y = np.einsum("mi,mij->mj", solution.gradient(k, x[k]), flow[k])
    surface = np.einsum("mi,mij,mjl->ml", grad_y, inverse, sigma)

    derivative = np.einsum("mi,mij->mj", terminal.gradient(x[-1]), flow[-1])
    Y, Z = solution.Y, solution.Z
    for j in range(bundle.n_steps - 1, k - 1, -1):
        dt = t[j + 1] - t[j]
        factor = (1 + driver.f_y(t[j + 1], x[j + 1], Y[j + 1], Z[j]) * dt
                  + driver.g_y(t[j + 1], x[j + 1], Y[j + 1], Z[j]) * increments[j])
        derivative = derivative * factor[:, None]
    fitted = fit(scheme.basis, x[k], derivative, k).evaluate(x[k]).reshape(bundle.n_paths, -1)
    flow_z = np.einsum("mi,mij,mjl->ml", fitted, inverse, sigma)
    return VariationalZ(regression=Z[k] if k < solution.n_steps else np.zeros_like(surface),
                        surface=surface, flow=flow_z)


@dataclass
class MomentReport:
    p: float
    sup_y: float
    z_energy: float
    refined_sup_y: Optional[float] = None
    refined_z_energy: Optional[float] = None
    stable: Optional[bool] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def _moments(solution, p):
    sup_y = np.max(np.abs(solution.Y), axis=0) ** (2 * p)
    energy = ((solution.Z ** 2).sum(axis=2) * np.diff(solution.time_grid)[:, None]).sum(axis=0) ** p
    return float(np.mean(sup_y)), float(np.mean(energy))


def moment_report(solution, p, refined=None, stability=0.2):
    """
    Empirical E sup_t |Y_t|^{2p} and E(∫|Z|² dt)^p; with a solution on the
    refined grid, flags growth beyond the relative stability band.
    """
    if not p > 1:
        raise InvalidArgumentError(f"Need p > 1, got {p}")
    sup_y, energy = _moments(solution, p)
    report = MomentReport(p=p, sup_y=sup_y, z_energy=energy)
    if refined is not None:
        report.refined_sup_y, report.refined_z_energy = _moments(refined, p)
        stable = True
        for name, coarse, fine in (("sup_y", sup_y, report.refined_sup_y),
                                   ("z_energy", energy, report.refined_z_energy)):
            if abs(fine - coarse) > stability * max(abs(coarse), 1e-12):
                stable = False
                report.notes.append(f"{name} moved from {coarse:.4g} to {fine:.4g} under refinement")
        report.stable = stable
    return report
