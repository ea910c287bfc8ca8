"""
Euler-Maruyama simulation of the forward diffusion dX = b(X) ds + σ(X) dW
and of its variational flow ∇X.
"""

import logging
from dataclasses import dataclass

import attrs
import numpy as np
import pandas as pd

from . import container
from .errors import DivergenceError, InvalidArgumentError
from .seeding import BROWNIAN_BLOCK, generator

logger = logging.getLogger("bdsde_fk")

COEFFICIENT_FAMILIES = ("constant", "linear", "tanh")


def _vector(value, dim):
    value = np.asarray(value, dtype=float)
    return np.full(dim, float(value)) if value.ndim == 0 else value.reshape(dim)


def _matrix(value, dim):
    value = np.asarray(value, dtype=float)
    return float(value) * np.eye(dim) if value.ndim == 0 else value.reshape(dim, dim)


@attrs.frozen
class SdeCoefficients:
    """
    Closed registry of coefficient families.

    constant: b(x) = drift, σ(x) = diffusion
    linear:   b(x) = drift_matrix @ x + drift, σ(x) = diffusion
    tanh:     b(x) = drift + drift_slope * tanh(x), σ(x) = diag(diffusion + diffusion_slope * tanh(x))
    """
    family: str = attrs.field(validator=attrs.validators.in_(COEFFICIENT_FAMILIES))
    dim: int = 1
    drift: object = 0.0
    drift_matrix: object = 0.0
    drift_slope: float = 0.0
    diffusion: object = 1.0
    diffusion_slope: float = 0.0

    @property
    def b0(self):
        return _vector(self.drift, self.dim)

    @property
    def sigma0(self):
        if self.family == "tanh":
            return _vector(self.diffusion, self.dim)
        return _matrix(self.diffusion, self.dim)

    @property
    def lipschitz_K(self):
        if self.family == "constant":
            return 0.0
        if self.family == "linear":
            return float(np.linalg.norm(_matrix(self.drift_matrix, self.dim)))
        return abs(self.drift_slope) + abs(self.diffusion_slope)

    @property
    def bounded(self):
        return self.family in ("constant", "tanh")

    def drift_at(self, x):
        if self.family == "linear":
            return x @ _matrix(self.drift_matrix, self.dim).T + self.b0
        if self.family == "tanh":
            return self.b0 + self.drift_slope * np.tanh(x)
        return np.broadcast_to(self.b0, x.shape)

    def diffusion_at(self, x):
        """σ(x) of shape (M, d, d)."""
        if self.family == "tanh":
            diag = self.sigma0 + self.diffusion_slope * np.tanh(x)
            return diag[:, :, None] * np.eye(self.dim)
        return np.broadcast_to(self.sigma0, (len(x), self.dim, self.dim))

    def drift_jacobian(self, x):
        """b'(x) of shape (M, d, d)."""
        if self.family == "linear":
            return np.broadcast_to(_matrix(self.drift_matrix, self.dim), (len(x), self.dim, self.dim))
        if self.family == "tanh":
            sech2 = 1.0 / np.cosh(x) ** 2
            return (self.drift_slope * sech2)[:, :, None] * np.eye(self.dim)
        return np.zeros((len(x), self.dim, self.dim))

    def diffusion_jacobian(self, x):
        """Array J[m, i, j, l] = ∂σ_ij/∂x_l, i.e. the Jacobian of column j at index j."""
        out = np.zeros((len(x), self.dim, self.dim, self.dim))
        if self.family == "tanh":
            sech2 = self.diffusion_slope / np.cosh(x) ** 2
            for j in range(self.dim):
                out[:, j, j, j] = sech2[:, j]
        return out

    def to_dict(self):
        return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v)
                for k, v in attrs.asdict(self).items()}


def make_coefficients(family, **params):
    if family == "ornstein_uhlenbeck":
        # b(x) = -theta (x - mean), σ = diffusion
        theta = params.pop("theta", 1.0)
        mean = params.pop("mean", 0.0)
        return SdeCoefficients("linear", drift_matrix=-theta, drift=theta * mean, **params)
    if family not in COEFFICIENT_FAMILIES:
        raise InvalidArgumentError(f"Got unexpected coefficient family {family}")
    return SdeCoefficients(family, **params)


@dataclass
class CoefficientReport:
    lipschitz_ratio: float
    jacobian_error: float
    max_abs: float

    def passed(self, coefficients, tolerance=1e-5):
        ok = self.lipschitz_ratio <= coefficients.lipschitz_K * (1 + 1e-9) + 1e-12 and self.jacobian_error <= tolerance
        return ok


def check_coefficients(coefficients, probe, h=1e-6):
    """Lipschitz ratio, Jacobian-vs-finite-difference error and sup norm over probe points."""
    probe.check()
    rng = generator(probe.seed, "coefficients")
    d = coefficients.dim
    x = rng.uniform(probe.low, probe.high, size=(probe.n_samples, d))
    y = rng.uniform(probe.low, probe.high, size=(probe.n_samples, d))
    diff_b = np.linalg.norm(coefficients.drift_at(x) - coefficients.drift_at(y), axis=1)
    diff_s = np.linalg.norm(coefficients.diffusion_at(x) - coefficients.diffusion_at(y), axis=(1, 2))
    ratio = (diff_b + diff_s) / np.linalg.norm(x - y, axis=1)
    error = 0.0
    jb = coefficients.drift_jacobian(x)
    js = coefficients.diffusion_jacobian(x)
    for l in range(d):
        e = np.zeros(d)
        e[l] = h
        fd_b = (coefficients.drift_at(x + e) - coefficients.drift_at(x - e)) / (2 * h)
        fd_s = (coefficients.diffusion_at(x + e) - coefficients.diffusion_at(x - e)) / (2 * h)
        error = max(error, float(np.max(np.abs(fd_b - jb[:, :, l]))), float(np.max(np.abs(fd_s - js[:, :, :, l]))))
    max_abs = float(max(np.max(np.abs(coefficients.drift_at(x))), np.max(np.abs(coefficients.diffusion_at(x)))))
    return CoefficientReport(lipschitz_ratio=float(np.max(ratio)), jacobian_error=error, max_abs=max_abs)


@attrs.define(frozen=True, slots=False, eq=False)
class PathBundle:
    coefficients: SdeCoefficients
    time_grid: np.ndarray
    states: np.ndarray          # (N+1, M, d)
    dW: np.ndarray              # (N, M, d)
    flow: object = None         # (N+1, M, d, d) or None
    seed: int = 0

    @property
    def n_steps(self):
        return len(self.time_grid) - 1

    @property
    def n_paths(self):
        return self.states.shape[1]

    @property
    def dim(self):
        return self.states.shape[2]

    @property
    def start_time(self):
        return float(self.time_grid[0])

    @property
    def dt(self):
        return np.diff(self.time_grid)

    def head(self, n_steps):
        if not 0 < n_steps <= self.n_steps:
            raise InvalidArgumentError(f"Cannot keep {n_steps} of {self.n_steps} steps")
        return attrs.evolve(self, time_grid=self.time_grid[:n_steps + 1], states=self.states[:n_steps + 1],
                            dW=self.dW[:n_steps], flow=None if self.flow is None else self.flow[:n_steps + 1])

    def retimed(self, start_time):
        """Same paths on a grid translated to start at start_time (the dynamics are autonomous)."""
        return attrs.evolve(self, time_grid=self.time_grid - self.time_grid[0] + start_time)

    def to_bytes(self):
        header = {"kind": "path_bundle", "coefficients": self.coefficients.to_dict(), "seed": self.seed}
        arrays = [("time_grid", self.time_grid), ("states", self.states), ("dW", self.dW)]
        if self.flow is not None:
            arrays.append(("flow", self.flow))
        return container.dumps(header, arrays)

    @classmethod
    def from_bytes(cls, data):
        header, arrays = container.loads(data)
        if header.get("kind") != "path_bundle":
            raise InvalidArgumentError(f"Container holds {header.get('kind')}, not a path bundle")
        return cls(SdeCoefficients(**header["coefficients"]), arrays["time_grid"], arrays["states"],
                   arrays["dW"], arrays.get("flow"), int(header["seed"]))

    def to_frame(self):
        """Long-format table: one row per (step, path) with time, states and increments."""
        n, m, d = self.states.shape
        data = {
            "step": np.repeat(np.arange(n), m),
            "path": np.tile(np.arange(m), n),
            "time": np.repeat(self.time_grid, m),
        }
        for i in range(d):
            data[f"x{i}"] = self.states[:, :, i].ravel()
            dw = np.vstack([self.dW[:, :, i], np.full((1, m), np.nan)])
            data[f"dw{i}"] = dw.ravel()
        return pd.DataFrame(data)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def brownian_increments(time_grid, n_paths, dim, seed):
    """ΔW of shape (N, M, d); paths come in blocks drawn from the stream (seed, "brownian", block)."""
    dt = np.diff(time_grid)
    n_steps = len(dt)
    out = np.empty((n_steps, n_paths, dim))
    for block, start in enumerate(range(0, n_paths, BROWNIAN_BLOCK)):
        size = min(BROWNIAN_BLOCK, n_paths - start)
        z = generator(seed, "brownian", block).standard_normal((BROWNIAN_BLOCK, n_steps, dim))[:size]
        out[:, start:start + size] = np.swapaxes(z, 0, 1) * np.sqrt(dt)[:, None, None]
    return out


def simulate_with_increments(coefficients, x0, time_grid, dW, with_flow=False, flow0=None, seed=0):
    """Euler-Maruyama on given increments; shared by simulate and restart."""
    time_grid = np.asarray(time_grid, dtype=float)
    n_steps, n_paths, dim = dW.shape
    if len(time_grid) != n_steps + 1:
        raise InvalidArgumentError(f"Grid has {len(time_grid)} instants for {n_steps} increments")
    if dim != coefficients.dim:
        raise InvalidArgumentError(f"Increments have dimension {dim}, coefficients {coefficients.dim}")
    dt = np.diff(time_grid)
    states = np.empty((n_steps + 1, n_paths, dim))
    states[0] = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, dim), (n_paths, dim))
    flow = None
    if with_flow:
        flow = np.empty((n_steps + 1, n_paths, dim, dim))
        flow[0] = np.eye(dim) if flow0 is None else flow0
    for k in range(n_steps):
        x = states[k]
        states[k + 1] = x + coefficients.drift_at(x) * dt[k] + np.einsum("mij,mj->mi", coefficients.diffusion_at(x), dW[k])
        if with_flow:
            jb = coefficients.drift_jacobian(x)
            js = coefficients.diffusion_jacobian(x)
            flow[k + 1] = (flow[k] + np.einsum("mil,mlp->mip", jb, flow[k]) * dt[k]
                           + np.einsum("mijl,mlp,mj->mip", js, flow[k], dW[k]))
        bad = ~np.all(np.isfinite(states[k + 1]), axis=1)
        if np.any(bad):
            raise DivergenceError("Non-finite forward state", step=k + 1, path=int(np.argmax(bad)))
    return PathBundle(coefficients, time_grid, states, dW, flow, seed)


def simulate(coefficients, x0, time_grid, n_paths, seed, with_flow=False):
    """
    Simulate M Euler-Maruyama paths.

    Parameters
    ----------
    coefficients: SdeCoefficients
        Drift and diffusion from the registry.

    x0: array of shape (d,) or (M, d)
        Common starting point, or one starting point per path.

    time_grid: array of shape (N+1,)
        Strictly increasing instants; the start time is time_grid[0].

    n_paths: int
        Number of paths M >= 1.

    seed: int
        Master seed for the Brownian increments.

    with_flow: bool
        Also advance the variational flow ∇X with the same increments.
    """
    time_grid = np.asarray(time_grid, dtype=float)
    if n_paths < 1:
        raise InvalidArgumentError(f"Need at least one path, got {n_paths}")
    if len(time_grid) < 2 or np.any(np.diff(time_grid) <= 0):
        raise InvalidArgumentError("Time grid must be strictly increasing with at least one step")
    dW = brownian_increments(time_grid, n_paths, coefficients.dim, seed)
    bundle = simulate_with_increments(coefficients, x0, time_grid, dW, with_flow=with_flow, seed=seed)
    logger.debug(f"Simulated {n_paths} paths over {len(time_grid) - 1} steps (seed {seed})")
    return bundle


def dispersed_start(low, high, n_paths, dim, seed):
    """Per-path starting points on a uniform lattice of [low, high]^d, shuffled deterministically."""
    u = (np.arange(n_paths) + 0.5) / n_paths
    points = low + (high - low) * np.stack([generator(seed, "start", i).permutation(u) for i in range(dim)], axis=1)
    return points


def restart(bundle, k):
    """Re-simulate from (t_k, X_k) with the residual increments; reproduces the tail exactly."""
    flow0 = None if bundle.flow is None else bundle.flow[k]
    return simulate_with_increments(bundle.coefficients, bundle.states[k], bundle.time_grid[k:], bundle.dW[k:],
                                    with_flow=bundle.flow is not None, flow0=flow0, seed=bundle.seed)


def coarsen_increments(dW, factor):
    """Sum consecutive groups of increments, for coupled coarse/fine comparisons."""
    n_steps = dW.shape[0]
    if n_steps % factor:
        raise InvalidArgumentError(f"{n_steps} steps cannot be grouped by {factor}")
    return dW.reshape(n_steps // factor, factor, *dW.shape[1:]).sum(axis=1)


def moment_probe(bundle, p, discount):
    """
    Empirical E ∫ e^{-K'r} |X_r|^{2p} dr over the bundle horizon.

    The path is frozen on each step and the exponential weight integrated
    exactly, so constant paths give the exact integral.
    """
    if bundle.n_paths == 0 or bundle.n_steps == 0:
        raise InvalidArgumentError("Empty bundle")
    if p < 1 or discount <= 0:
        raise InvalidArgumentError(f"Need p >= 1 and K' > 0, got p={p}, K'={discount}")
    return float(np.mean(discounted_moments(bundle, p, discount)))


def discounted_moments(bundle, p, discount):
    t = bundle.time_grid
    weights = (np.exp(-discount * t[:-1]) - np.exp(-discount * t[1:])) / discount
    powers = np.linalg.norm(bundle.states[:-1], axis=2) ** (2 * p)
    return weights @ powers


def discounted_moment_bound(coefficients, x, p, discount, t, s, constant=1.0):
    """e^{-K't}|x|^{2p} + C ∫_t^s e^{-K'r}(|b(0)|^{2p} + |σ(0)|^{2p}) dr."""
    origin = np.zeros((1, coefficients.dim))
    b0 = np.linalg.norm(coefficients.drift_at(origin)[0])
    s0 = np.linalg.norm(coefficients.diffusion_at(origin)[0])
    integral = (np.exp(-discount * t) - np.exp(-discount * s)) / discount
    return float(np.exp(-discount * t) * np.linalg.norm(np.atleast_1d(x)) ** (2 * p)
                 + constant * integral * (b0 ** (2 * p) + s0 ** (2 * p)))
