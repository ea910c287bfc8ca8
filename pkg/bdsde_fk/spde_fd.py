"""
Finite differences for the backward semilinear SPDE in one space dimension

    u(t, x) = φ(x) + ∫_t^T [ℒu + f(s, x, u, σ∂u)] ds + ∫_t^T g(s, x, u, σ∂u) ⃖B(ds, x),

with ℒ = ½σ²∂² + b∂. Diffusion is implicit (tridiagonal solve), the driver
and the noise are explicit at the right endpoint of each step.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

import attrs
import numpy as np
import pandas as pd
import scipy.linalg

from .errors import ConditioningError, ContractViolationError, DivergenceError, InvalidArgumentError
from .kunita_calculus import grid_offset
from .oracles import heat_bump_solution

logger = logging.getLogger("bdsde_fk")

SCHEMES = ("imex", "explicit")
CFL_LIMIT = 0.5


@attrs.frozen
class GridSpec:
    """Spatial grid: the probe interval widened by margin_sd standard deviations of X over the horizon."""
    probe_low: float = -2.0
    probe_high: float = 2.0
    n_nodes: int = attrs.field(default=400)
    margin_sd: float = 6.0
    scheme: str = attrs.field(default="imex", validator=attrs.validators.in_(SCHEMES))

    @n_nodes.validator
    def _check_nodes(self, attribute, value):
        if value < 3:
            raise InvalidArgumentError(f"Need at least 3 nodes, got {value}")

    def nodes(self, coefficients, horizon):
        sd = _max_sigma(coefficients) * np.sqrt(max(horizon, 0.0))
        return np.linspace(self.probe_low - self.margin_sd * sd, self.probe_high + self.margin_sd * sd, self.n_nodes)


def _max_sigma(coefficients):
    sigma0 = float(np.max(np.abs(coefficients.sigma0)))
    return sigma0 + abs(coefficients.diffusion_slope) if coefficients.family == "tanh" else sigma0


def _check_one_dimensional(coefficients):
    if coefficients.dim != 1:
        raise InvalidArgumentError("The finite-difference solver is one-dimensional")


@attrs.define(frozen=True, slots=False, eq=False)
class FieldSolution:
    time_grid: np.ndarray
    nodes: np.ndarray
    values: np.ndarray              # (N+1, G)
    noise_sum: np.ndarray           # Σ_k g ΔB_k(x_j), (G,)
    grid: GridSpec
    realization_id: str
    kernel: Optional[dict] = None
    seed: Optional[int] = None
    boundary: str = "neumann"

    @property
    def n_steps(self):
        return len(self.time_grid) - 1

    @property
    def dx(self):
        return float(self.nodes[1] - self.nodes[0])

    def probe_mask(self):
        return (self.nodes >= self.grid.probe_low - 1e-12) & (self.nodes <= self.grid.probe_high + 1e-12)

    def interpolate(self, k, x):
        return np.interp(np.asarray(x, dtype=float).ravel(), self.nodes, self.values[k])

    def to_frame(self):
        """One row per time level, one column per node."""
        frame = pd.DataFrame(self.values, columns=[f"{x:.12g}" for x in self.nodes])
        frame.insert(0, "t", self.time_grid)
        return frame

    def manifest(self):
        return {
            "kind": "field_solution",
            "realization_id": self.realization_id,
            "kernel": self.kernel,
            "seed": self.seed,
            "boundary": self.boundary,
            "grid": {**attrs.asdict(self.grid), "low": float(self.nodes[0]), "high": float(self.nodes[-1]),
                     "dx": self.dx},
            "n_steps": self.n_steps,
            "t0": float(self.time_grid[0]),
            "T": float(self.time_grid[-1]),
        }

    def dump(self, out_dir, stem="field_solution"):
        """Write <stem>.csv and <stem>.json; returns both paths."""
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        json_path = os.path.join(out_dir, f"{stem}.json")
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
        return csv_path, json_path


def _operator_bands(coefficients, nodes):
    """Lower, diagonal and upper bands of ℒ_h with zero-slope boundaries."""
    x = nodes[:, None]
    dx = nodes[1] - nodes[0]
    a = 0.5 * coefficients.diffusion_at(x)[:, 0, 0] ** 2
    b = coefficients.drift_at(x)[:, 0]
    lower = a / dx ** 2 - b / (2 * dx)
    upper = a / dx ** 2 + b / (2 * dx)
    diagonal = -2 * a / dx ** 2
    upper[0] = 2 * a[0] / dx ** 2
    lower[-1] = 2 * a[-1] / dx ** 2
    return lower, diagonal, upper


def _apply(bands, u):
    lower, diagonal, upper = bands
    out = diagonal * u
    out[1:] += lower[1:] * u[:-1]
    out[:-1] += upper[:-1] * u[1:]
    return out


def _implicit_solve(bands, dt, rhs, step):
    lower, diagonal, upper = bands
    ab = np.zeros((3, len(rhs)))
    ab[0, 1:] = -dt * upper[:-1]
    ab[1] = 1 - dt * diagonal
    ab[2, :-1] = -dt * lower[1:]
    try:
        return scipy.linalg.solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as err:
        raise ConditioningError(f"Tridiagonal solve failed at step {step}: {err}") from err


def solve_spde(driver, terminal, coefficients, kernel, realization, grid, time_grid=None):
    """
    Backward IMEX stepping from u_N = φ:

        (I - Δt ℒ_h) u_k = u_{k+1} + Δt f(t_{k+1}, x, u_{k+1}, σ∂_h u_{k+1}) + g(t_{k+1}, ...) ΔB_k(x_j)

    Parameters
    ----------
    driver, terminal: Driver, TerminalCondition

    coefficients: SdeCoefficients
        One-dimensional b and σ defining ℒ.

    kernel: CovarianceKernel or None
        Recorded in the manifest.

    realization: FieldRealization or None
        Must declare every grid node at every step. None means no noise
        (ΔB ≡ 0), for the deterministic reductions.

    grid: GridSpec

    time_grid: array or None
        Defaults to the realization grid; required without a realization.
    """
    _check_one_dimensional(coefficients)
    if time_grid is None:
        if realization is None:
            raise InvalidArgumentError("A time grid is needed when no realization is given")
        time_grid = realization.time_grid
    time_grid = np.asarray(time_grid, dtype=float)
    offset = grid_offset(realization, time_grid) if realization is not None else 0
    nodes = grid.nodes(coefficients, time_grid[-1] - time_grid[0])
    points = nodes[:, None]
    dx = nodes[1] - nodes[0]
    sigma = coefficients.diffusion_at(points)[:, 0, 0]
    bands = _operator_bands(coefficients, nodes)
    n = len(time_grid) - 1
    if grid.scheme == "explicit":
        courant = float(np.max(sigma ** 2) * np.max(np.diff(time_grid)) / dx ** 2)
        if courant > CFL_LIMIT:
            logger.warning(f"Explicit diffusion with σ²Δt/Δx² = {courant:.3g} > {CFL_LIMIT}; expect instability")
    values = np.empty((n + 1, len(nodes)))
    values[n] = terminal.value(points)
    noise_sum = np.zeros(len(nodes))
    for k in range(n - 1, -1, -1):
        dt = time_grid[k + 1] - time_grid[k]
        u = values[k + 1]
        z = (sigma * np.gradient(u, dx, edge_order=1))[:, None]
        rhs = u + dt * driver.f(time_grid[k + 1], points, u, z)
        if realization is not None:
            noise = driver.g(time_grid[k + 1], points, u, z) * realization.increments_at(offset + k, points)
            noise_sum += noise
            rhs = rhs + noise
        if grid.scheme == "explicit":
            values[k] = rhs + dt * _apply(bands, u)
        else:
            values[k] = _implicit_solve(bands, dt, rhs, k)
        if not np.all(np.isfinite(values[k])):
            bad = ~np.isfinite(values[k])
            raise DivergenceError("Non-finite finite-difference value", step=k, path=int(np.argmax(bad)))
    logger.debug(f"Finite differences: {n} steps on {len(nodes)} nodes ({grid.scheme})")
    return FieldSolution(
        time_grid=time_grid, nodes=nodes, values=values, noise_sum=noise_sum, grid=grid,
        realization_id=realization.realization_id if realization is not None else "none",
        kernel=kernel.to_dict() if kernel is not None else None,
        seed=realization.seed if realization is not None else None,
    )


@dataclass
class CrossValidationReport:
    realization_id: str
    levels: List[dict] = field(default_factory=list)

    def at(self, t):
        for level in self.levels:
            if abs(level["t"] - t) < 1e-9:
                return level
        raise InvalidArgumentError(f"No shared time level at t={t}")

    def to_dict(self):
        return {"realization_id": self.realization_id, "levels": self.levels}

    def to_frame(self):
        return pd.DataFrame(self.levels)


def cross_validate(bdsde_solution, fd_solution, probe_nodes=None):
    """
    Distances between the BDSDE regression surface and the FD solution at
    every time level the two grids share.
    """
    if bdsde_solution.realization_id != fd_solution.realization_id:
        raise ContractViolationError(
            f"Solutions come from different realizations ({bdsde_solution.realization_id} "
            f"vs {fd_solution.realization_id})")
    if probe_nodes is None:
        probe_nodes = fd_solution.nodes[fd_solution.probe_mask()]
    probe_nodes = np.asarray(probe_nodes, dtype=float).ravel()
    report = CrossValidationReport(bdsde_solution.realization_id)
    for k_b, t in enumerate(bdsde_solution.time_grid):
        matches = np.flatnonzero(np.isclose(fd_solution.time_grid, t, rtol=0, atol=1e-9))
        if len(matches) == 0:
            continue
        u_fd = fd_solution.interpolate(matches[0], probe_nodes)
        u_mc = bdsde_solution.value(k_b, probe_nodes[:, None])
        l2 = float(np.sqrt(np.mean((u_mc - u_fd) ** 2)))
        scale = float(np.sqrt(np.mean(u_fd ** 2)))
        report.levels.append({"t": float(t), "l2": l2, "linf": float(np.max(np.abs(u_mc - u_fd))),
                              "relative_l2": l2 / scale if scale > 0 else l2})
    if not report.levels:
        raise ContractViolationError("The two solutions share no time level")
    return report


@dataclass
class RefinementReport:
    n_steps: List[int]
    n_nodes: List[int]
    errors: List[float]

    @property
    def ratios(self):
        return [b / a for a, b in zip(self.errors, self.errors[1:]) if a > 0]

    def to_dict(self):
        return {"n_steps": self.n_steps, "n_nodes": self.n_nodes, "errors": self.errors, "ratios": self.ratios}


def heat_refinement(driver, terminal, coefficients, grid, horizon, levels):
    """
    L∞ error at t = 0 over the probe interval against the Gaussian-convolution
    closed form, for each (N, G) pair of levels.

    Needs b = 0, constant σ, a Gaussian bump terminal and f = g = 0.
    """
    _check_one_dimensional(coefficients)
    if terminal.family != "gaussian_bump" or coefficients.family != "constant":
        raise InvalidArgumentError("The heat refinement needs a Gaussian bump and constant coefficients")
    sigma = float(coefficients.sigma0[0, 0])
    report = RefinementReport([], [], [])
    for n_steps, n_nodes in levels:
        spec = attrs.evolve(grid, n_nodes=n_nodes)
        solution = solve_spde(driver, terminal, coefficients, None, None, spec,
                              time_grid=np.linspace(0.0, horizon, n_steps + 1))
        mask = solution.probe_mask()
        exact, _ = heat_bump_solution(solution.nodes[mask], 0.0, horizon, terminal.param("amplitude", 1.0),
                                      terminal.param("center"), terminal.param("width", 1.0), sigma)
        report.n_steps.append(n_steps)
        report.n_nodes.append(n_nodes)
        report.errors.append(float(np.max(np.abs(solution.values[0][mask] - exact))))
    return report
