"""
Spatial covariance kernels and realizations of the martingale field B(t, x).

A realization is sampled per time step, jointly over a declared finite point
set, with covariance Q_k(x, y) = q(t_k, x, y) * (t_{k+1} - t_k). Lookups are
exact: a point that was not declared for a step raises MissingPointError.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional

import attrs
import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from . import container
from .errors import InvalidArgumentError, MissingPointError, NumericalDegeneracyError
from .seeding import generator

logger = logging.getLogger("bdsde_fk")

FAMILIES = ("constant", "exponential", "squared_exponential", "time_modulated", "table")

DEDUP_DECIMALS = 12             # points closer than 1e-12 are the same site
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)
DEFAULT_JITTER_MAX = 1e-8
DEFAULT_EPS_PSD = 1e-10
DENSE_LIMIT = 2000
MAX_LOW_RANK = 512


def as_points(x, dim=None):
    """Coerce to an (n, d) float array. One-dimensional input is read as n points in 1D."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim in (None, 1) else x.reshape(1, -1)
    if x.ndim != 2:
        raise InvalidArgumentError(f"Expected points of shape (n, d), got {x.shape}")
    return x


def point_keys(x):
    # Rounded copy used for both storage and lookup; "+ 0.0" turns -0.0 into 0.0
    return np.round(as_points(x), DEDUP_DECIMALS) + 0.0


@attrs.frozen
class CovarianceKernel:
    family: str = attrs.field(validator=attrs.validators.in_(FAMILIES))
    amplitude: float = attrs.field(default=1.0, converter=float)
    scale: float = attrs.field(default=1.0, converter=float)
    modulation: float = attrs.field(default=0.0, converter=float)
    period: float = attrs.field(default=1.0, converter=float)
    base: Optional["CovarianceKernel"] = None
    table_points: tuple = ()
    table_values: tuple = ()
    kappa: float = attrs.field(default=0.0, converter=float)
    bound_K: float = attrs.field(default=1.0, converter=float)
    bound_M: float = attrs.field(default=1.0, converter=float)
    holder_gamma: float = attrs.field(default=1.0, converter=float)

    @amplitude.validator
    def _check_amplitude(self, attribute, value):
        if not np.isfinite(value) or value < 0:
            raise InvalidArgumentError(f"Kernel amplitude must be finite and >= 0, got {value}")

    @scale.validator
    def _check_scale(self, attribute, value):
        if not np.isfinite(value) or value <= 0:
            raise InvalidArgumentError(f"Kernel scale must be finite and > 0, got {value}")

    @modulation.validator
    def _check_modulation(self, attribute, value):
        if not 0 <= value < 1:
            raise InvalidArgumentError(f"Time modulation must lie in [0, 1), got {value}")

    @property
    def spatial_family(self):
        return self.base.spatial_family if self.family == "time_modulated" else self.family

    @property
    def is_time_dependent(self):
        return self.family == "time_modulated" and self.modulation > 0

    def time_factor(self, s):
        s = np.asarray(s, dtype=float)
        if self.family != "time_modulated":
            return np.ones_like(s)
        return 1.0 + self.modulation * np.sin(2 * np.pi * s / self.period)

    def _table_index(self, x):
        keys = point_keys(x)
        table = point_keys(np.asarray(self.table_points, dtype=float))
        index = np.empty(len(keys), dtype=int)
        for i, key in enumerate(keys):
            match = np.flatnonzero(np.all(table == key, axis=1))
            if len(match) == 0:
                raise InvalidArgumentError(f"Point {key} is not part of the table kernel")
            index[i] = match[0]
        return index

    def gram(self, s, a, b):
        """Matrix [q(s, a_i, b_j)]."""
        a = as_points(a)
        b = as_points(b)
        if self.family == "time_modulated":
            return float(self.time_factor(s)) * self.base.gram(s, a, b)
        if self.family == "constant":
            return np.full((len(a), len(b)), self.amplitude)
        if self.family == "exponential":
            return self.amplitude * np.exp(-cdist(a, b) / self.scale)
        if self.family == "squared_exponential":
            return self.amplitude * np.exp(-cdist(a, b, "sqeuclidean") / (2 * self.scale ** 2))
        values = np.asarray(self.table_values, dtype=float)
        return values[np.ix_(self._table_index(a), self._table_index(b))]

    def pairwise(self, s, x, y):
        """Elementwise q(s_i, x_i, y_i) for matching rows of x and y."""
        x = as_points(x)
        y = as_points(y)
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(x),))
        if self.family == "time_modulated":
            return self.time_factor(s) * self.base.pairwise(s, x, y)
        if self.family == "constant":
            return np.full(len(x), self.amplitude)
        r = np.linalg.norm(x - y, axis=1)
        if self.family == "exponential":
            return self.amplitude * np.exp(-r / self.scale)
        if self.family == "squared_exponential":
            return self.amplitude * np.exp(-r ** 2 / (2 * self.scale ** 2))
        values = np.asarray(self.table_values, dtype=float)
        return values[self._table_index(x), self._table_index(y)]

    def diagonal(self, s, x):
        x = as_points(x)
        return self.pairwise(s, x, x)

    def to_dict(self):
        d = {
            "family": self.family,
            "amplitude": self.amplitude,
            "scale": self.scale,
            "modulation": self.modulation,
            "period": self.period,
            "kappa": self.kappa,
            "bound_K": self.bound_K,
            "bound_M": self.bound_M,
            "holder_gamma": self.holder_gamma,
        }
        if self.base is not None:
            d["base"] = self.base.to_dict()
        if self.family == "table":
            d["table_points"] = [list(p) for p in self.table_points]
            d["table_values"] = [list(r) for r in self.table_values]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "base" in d:
            d["base"] = cls.from_dict(d["base"])
        if "table_points" in d:
            d["table_points"] = tuple(tuple(float(v) for v in p) for p in d["table_points"])
            d["table_values"] = tuple(tuple(float(v) for v in r) for r in d["table_values"])
        return cls(**d)


def constant(q0=1.0):
    return CovarianceKernel("constant", amplitude=q0, kappa=0.0, bound_K=q0, bound_M=q0)


def exponential(scale=1.0, amplitude=1.0):
    bound = amplitude * max(1.0, 1.0 / scale)
    return CovarianceKernel("exponential", amplitude=amplitude, scale=scale, bound_K=bound, bound_M=amplitude)


def squared_exponential(scale=1.0, amplitude=1.0):
    bound = amplitude * max(1.0, 1.0 / scale)
    return CovarianceKernel("squared_exponential", amplitude=amplitude, scale=scale, bound_K=bound, bound_M=amplitude)


def time_modulated(base, modulation=0.5, period=1.0):
    if base.family in ("time_modulated", "table"):
        raise InvalidArgumentError(f"Cannot modulate a {base.family} kernel")
    return CovarianceKernel(
        "time_modulated", modulation=modulation, period=period, base=base,
        kappa=base.kappa, bound_K=base.bound_K * (1 + modulation),
        bound_M=base.bound_M * (1 + modulation), holder_gamma=base.holder_gamma,
    )


def table(points, values):
    points = as_points(points)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(points), len(points)):
        raise InvalidArgumentError(f"Table kernel needs a {len(points)}x{len(points)} matrix, got {values.shape}")
    bound = float(np.max(np.abs(values)))
    return CovarianceKernel(
        "table",
        table_points=tuple(tuple(p) for p in points.tolist()),
        table_values=tuple(tuple(r) for r in values.tolist()),
        bound_K=bound, bound_M=bound,
    )


KERNEL_FACTORIES = {
    "constant": constant,
    "exponential": exponential,
    "squared_exponential": squared_exponential,
}


def make_kernel(family, modulation=0.0, period=1.0, **params):
    """Build a kernel from a registry name; a nonzero modulation wraps it in time_modulated."""
    if family not in KERNEL_FACTORIES:
        raise InvalidArgumentError(f"Got unexpected kernel family {family}")
    kernel = KERNEL_FACTORIES[family](**params)
    if modulation:
        kernel = time_modulated(kernel, modulation=modulation, period=period)
    return kernel


def kernel_eval(kernel, s, x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, -1)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.isfinite(s)):
        raise InvalidArgumentError(f"Non-finite kernel argument: s={s}, x={x[0]}, y={y[0]}")
    return float(kernel.pairwise(s, x, y)[0])


@attrs.frozen
class ProbeSpec:
    """Bounded sampling region used by the validation reports."""
    low: float = -5.0
    high: float = 5.0
    dim: int = 1
    n_samples: int = 2000
    set_size: int = 8
    value_bound: float = 5.0
    time_low: float = 0.0
    time_high: float = 1.0
    seed: int = 0

    def check(self):
        if not (np.isfinite(self.low) and np.isfinite(self.high)) or self.high <= self.low:
            raise InvalidArgumentError(f"Degenerate probe region [{self.low}, {self.high}]")
        if self.dim < 1 or self.n_samples < 1 or self.set_size < 1:
            raise InvalidArgumentError("Probe spec needs dim, n_samples and set_size >= 1")
        if self.time_high < self.time_low:
            raise InvalidArgumentError(f"Degenerate probe time range [{self.time_low}, {self.time_high}]")

    def points(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    def times(self, rng, n):
        return rng.uniform(self.time_low, self.time_high, size=n)


@dataclass
class KernelReport:
    min_eigenvalue: float
    growth_ratio: float
    max_abs: float
    holder_ratio: float
    symmetry_error: float
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {
            "min_eigenvalue": self.min_eigenvalue,
            "growth_ratio": self.growth_ratio,
            "max_abs": self.max_abs,
            "holder_ratio": self.holder_ratio,
            "symmetry_error": self.symmetry_error,
            "violations": list(self.violations),
            "passed": self.passed,
        }


def validate_kernel(kernel, probe, eps_psd=DEFAULT_EPS_PSD, check_bounded=True):
    """
    Empirical check of the kernel conditions on a probe region.

    Parameters
    ----------
    kernel: CovarianceKernel
        Kernel with its declared metadata (kappa, bound_K, bound_M, holder_gamma).

    probe: ProbeSpec
        Bounded region, sample counts and seed.

    eps_psd: float
        Tolerance on the smallest Gram eigenvalue (relative to the largest diagonal entry).

    check_bounded: bool
        Whether the uniform bound M is part of the report.

    Returns
    -------
    KernelReport with the worst observed values and the list of violated conditions.
    """
    probe.check()
    rng = generator(probe.seed, "probe")
    if kernel.family == "table":
        candidates = as_points(np.asarray(kernel.table_points, dtype=float))
        gram = kernel.gram(0.0, candidates, candidates)
        min_eig = float(scipy.linalg.eigvalsh(gram)[0])
        scale = float(np.max(np.abs(np.diag(gram))))
        i = rng.integers(0, len(candidates), size=probe.n_samples)
        j = rng.integers(0, len(candidates), size=probe.n_samples)
        x, y = candidates[i], candidates[j]
    else:
        min_eig = np.inf
        scale = 0.0
        for _ in range(max(1, probe.n_samples // probe.set_size)):
            pts = probe.points(rng, probe.set_size)
            gram = kernel.gram(probe.times(rng, 1)[0], pts, pts)
            min_eig = min(min_eig, float(scipy.linalg.eigvalsh(gram)[0]))
            scale = max(scale, float(np.max(np.abs(np.diag(gram)))))
        x = probe.points(rng, probe.n_samples)
        y = probe.points(rng, probe.n_samples)
    s = probe.times(rng, len(x))

    q_xy = kernel.pairwise(s, x, y)
    q_yx = kernel.pairwise(s, y, x)
    q_xx = kernel.pairwise(s, x, x)
    norm_x = np.linalg.norm(x, axis=1)
    norm_y = np.linalg.norm(y, axis=1)
    growth = np.abs(q_xy) / (1 + norm_x ** kernel.kappa + norm_y ** kernel.kappa)
    distance = np.linalg.norm(x - y, axis=1)
    apart = distance > 0
    holder = np.abs(q_xx - q_xy)[apart] / distance[apart] ** kernel.holder_gamma
    report = KernelReport(
        min_eigenvalue=min_eig,
        growth_ratio=float(np.max(growth)),
        max_abs=float(max(np.max(np.abs(q_xy)), np.max(np.abs(q_xx)))),
        holder_ratio=float(np.max(holder)) if holder.size else 0.0,
        symmetry_error=float(np.max(np.abs(q_xy - q_yx))),
    )
    tolerance = 1 + 1e-12
    if report.min_eigenvalue < -eps_psd * max(scale, 1.0):
        report.violations.append("psd")
    if kernel.kappa >= 2:
        report.violations.append("kappa")
    if report.growth_ratio > kernel.bound_K * tolerance:
        report.violations.append("growth")
    if check_bounded and report.max_abs > kernel.bound_M * tolerance:
        report.violations.append("bounded")
    if report.holder_ratio > kernel.bound_K * tolerance:
        report.violations.append("holder")
    if report.symmetry_error > 1e-12:
        report.violations.append("symmetry")
    for v in report.violations:
        logger.debug(f"Kernel {kernel.family} violates {v}")
    return report


def _factorize(cov, jitter_max, step, scale=None):
    """
    Return (F, jitter) with F F^T = cov + jitter * scale * I.

    scale defaults to the largest diagonal entry; conditional covariances pass
    the prior one, since their own diagonal may vanish to rounding.
    """
    cov = 0.5 * (cov + cov.T)
    n = len(cov)
    if scale is None:
        scale = float(np.max(np.abs(np.diag(cov))))
    scale = max(scale, np.finfo(float).tiny)
    for jitter in JITTER_LADDER:
        if jitter > jitter_max:
            break
        try:
            factor = scipy.linalg.cholesky(cov + jitter * scale * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            logger.debug(f"Cholesky failed at step {step} with jitter {jitter:g}")
            continue
        if jitter > 1e-10:
            logger.warning(f"Step {step} needed diagonal jitter {jitter:g}")
        return factor, jitter
    # PSD-singular covariances (rank-deficient kernels) still have a symmetric square root
    w, v = scipy.linalg.eigh(cov)
    if w[0] >= -jitter_max * scale:
        logger.debug(f"Step {step}: eigen-factorization fallback (smallest eigenvalue {w[0]:.3g})")
        return v * np.sqrt(np.clip(w, 0, None)), jitter_max
    condition = float(np.max(np.abs(w)) / max(np.min(np.abs(w)), np.finfo(float).tiny))
    raise NumericalDegeneracyError("Covariance factorization failed after jitter escalation", step=step, condition=condition)


def _low_rank_factor(kernel, t, dt, pts, jitter_max, step):
    n = len(pts)
    residual = kernel.diagonal(t, pts) * dt
    scale = max(float(np.max(residual)), np.finfo(float).tiny)
    factor = np.zeros((n, min(n, MAX_LOW_RANK)))
    for r in range(factor.shape[1]):
        i = int(np.argmax(residual))
        if residual[i] <= jitter_max * scale:
            return factor[:, :r], float(residual[i] / scale)
        column = kernel.gram(t, pts, pts[i:i + 1])[:, 0] * dt - factor[:, :r] @ factor[i, :r]
        factor[:, r] = column / np.sqrt(residual[i])
        residual = np.clip(residual - factor[:, r] ** 2, 0, None)
    if np.max(residual) > jitter_max * scale:
        raise NumericalDegeneracyError(f"Low-rank factorization needs more than {MAX_LOW_RANK} columns",
                                       step=step, condition=float(np.max(residual) / scale))
    return factor, float(np.max(residual) / scale)


def _sample_step(kernel, t, dt, pts, rng, jitter_max, dense_limit, step):
    n = len(pts)
    if dt == 0:
        return np.zeros(n), 0.0, "zero"
    family = kernel.spatial_family
    if family == "constant":
        variance = kernel.amplitude if kernel.family == "constant" else kernel.base.amplitude
        variance *= float(kernel.time_factor(t)) * dt
        return np.full(n, np.sqrt(variance) * rng.standard_normal()), 0.0, "rank_one"
    if family == "exponential" and pts.shape[1] == 1:
        # Exact Markov recursion along sorted points (np.unique keeps them sorted)
        base = kernel if kernel.family == "exponential" else kernel.base
        variance = base.amplitude * float(kernel.time_factor(t)) * dt
        z = rng.standard_normal(n)
        rho = np.exp(-np.diff(pts[:, 0]) / base.scale)
        innovation = np.sqrt(variance * (1 - rho ** 2)) * z[1:]
        values = np.empty(n)
        values[0] = np.sqrt(variance) * z[0]
        for i in range(1, n):
            values[i] = rho[i - 1] * values[i - 1] + innovation[i - 1]
        return values, 0.0, "markov"
    if n <= dense_limit or family == "table":
        factor, jitter = _factorize(kernel.gram(t, pts, pts) * dt, jitter_max, step)
        return factor @ rng.standard_normal(factor.shape[1]), jitter, "dense"
    factor, jitter = _low_rank_factor(kernel, t, dt, pts, jitter_max, step)
    return factor @ rng.standard_normal(factor.shape[1]), jitter, "low_rank"


def _check_grid(time_grid):
    time_grid = np.asarray(time_grid, dtype=float)
    if time_grid.ndim != 1 or len(time_grid) < 2:
        raise InvalidArgumentError("Time grid needs at least two instants")
    if not np.all(np.isfinite(time_grid)):
        raise InvalidArgumentError("Time grid has non-finite values")
    if np.any(np.diff(time_grid) < 0):
        raise InvalidArgumentError("Time grid must be non-decreasing")
    return time_grid


def sample_increments(kernel, time_grid, point_sets, seed, jitter_max=DEFAULT_JITTER_MAX, dense_limit=DENSE_LIMIT):
    """
    Sample one realization of the field increments.

    Parameters
    ----------
    kernel: CovarianceKernel
        Spatial (optionally time-modulated) covariance.

    time_grid: array of shape (N+1,)
        Non-decreasing instants; zero-length steps give zero increments.

    point_sets: sequence of N arrays of shape (n_k, d)
        Evaluation sites per step. Sites closer than 1e-12 are merged.

    seed: int
        Master seed. Step k draws from the stream (seed, "field", k).

    jitter_max: float
        Largest relative diagonal jitter tried before giving up.

    dense_limit: int
        Above this many sites a pivoted low-rank factorization is used.

    Returns
    -------
    FieldRealization
    """
    time_grid = _check_grid(time_grid)
    n_steps = len(time_grid) - 1
    if len(point_sets) != n_steps:
        raise InvalidArgumentError(f"Expected {n_steps} point sets, got {len(point_sets)}")
    points, increments, jitters, strategies = [], [], [], []
    dim = None
    for k, pts in enumerate(point_sets):
        keys = point_keys(pts)
        if len(keys) == 0:
            raise InvalidArgumentError(f"Empty point set at step {k}")
        if not np.all(np.isfinite(keys)):
            raise InvalidArgumentError(f"Non-finite point at step {k}")
        if dim is None:
            dim = keys.shape[1]
        elif keys.shape[1] != dim:
            raise InvalidArgumentError(f"Point dimension changes at step {k}")
        unique = np.unique(keys, axis=0)
        dt = time_grid[k + 1] - time_grid[k]
        values, jitter, strategy = _sample_step(
            kernel, time_grid[k], dt, unique, generator(seed, "field", k), jitter_max, dense_limit, k)
        points.append(unique)
        increments.append(values)
        jitters.append(jitter)
        strategies.append(strategy)
    logger.debug(f"Sampled {n_steps} field steps ({sum(len(p) for p in points)} sites) with seed {seed}")
    return FieldRealization(
        kernel=kernel, time_grid=time_grid, points=tuple(points), increments=tuple(increments),
        seed=int(seed), jitter=np.asarray(jitters), strategies=tuple(strategies),
    )


@attrs.define(frozen=True, slots=False, eq=False)
class FieldRealization:
    kernel: CovarianceKernel
    time_grid: np.ndarray
    points: tuple
    increments: tuple
    seed: int
    jitter: np.ndarray
    strategies: tuple = ()
    lineage: str = "sampled"

    @property
    def n_steps(self):
        return len(self.time_grid) - 1

    @property
    def dim(self):
        return self.points[0].shape[1]

    @cached_property
    def realization_id(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    @cached_property
    def _lookup(self):
        return {}

    def _index(self, k):
        if k not in self._lookup:
            pts = self.points[k]
            if pts.shape[1] == 1:
                self._lookup[k] = pts[:, 0]
            else:
                self._lookup[k] = {row.tobytes(): i for i, row in enumerate(pts)}
        return self._lookup[k]

    def increments_at(self, k, x):
        """Vectorized ΔB_k(x_i) for declared points x (shape (n, d))."""
        if not 0 <= k < self.n_steps:
            raise InvalidArgumentError(f"Step {k} outside realization with {self.n_steps} steps")
        keys = point_keys(x) if self.dim == 1 else point_keys(as_points(x, self.dim))
        index = self._index(k)
        if self.dim == 1:
            query = keys[:, 0]
            pos = np.searchsorted(index, query)
            pos_clipped = np.minimum(pos, len(index) - 1)
            found = (pos < len(index)) & (index[pos_clipped] == query)
            if not np.all(found):
                raise MissingPointError(k, keys[np.argmin(found)].tolist())
            return self.increments[k][pos_clipped]
        out = np.empty(len(keys))
        for i, row in enumerate(keys):
            j = index.get(row.tobytes())
            if j is None:
                raise MissingPointError(k, row.tolist())
            out[i] = self.increments[k][j]
        return out

    def increment(self, k, x):
        return float(self.increments_at(k, np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))[0])

    def cumulative(self, x):
        """B(t_N, x) - B(t_0, x); x must be declared at every step."""
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
        return float(sum(self.increments_at(k, x)[0] for k in range(self.n_steps)))

    def step_index(self, t, atol=1e-9):
        """Index j with time_grid[j] == t (to tolerance), or InvalidArgumentError."""
        span = max(1.0, float(np.max(np.abs(self.time_grid))))
        j = int(np.argmin(np.abs(self.time_grid - t)))
        if abs(self.time_grid[j] - t) > atol * span:
            raise InvalidArgumentError(f"Time {t} is not on the realization grid")
        return j

    def head(self, n_steps):
        if not 0 < n_steps <= self.n_steps:
            raise InvalidArgumentError(f"Cannot keep {n_steps} of {self.n_steps} steps")
        return attrs.evolve(
            self, time_grid=self.time_grid[:n_steps + 1], points=self.points[:n_steps],
            increments=self.increments[:n_steps], jitter=self.jitter[:n_steps],
            strategies=self.strategies[:n_steps], lineage=f"{self.lineage}|head({n_steps})")

    def header(self):
        return {
            "kind": "field_realization",
            "kernel": self.kernel.to_dict(),
            "seed": self.seed,
            "dim": self.dim,
            "point_counts": [len(p) for p in self.points],
            "strategies": list(self.strategies),
            "lineage": self.lineage,
        }

    def _arrays(self):
        arrays = [("time_grid", self.time_grid), ("jitter", self.jitter)]
        for k in range(self.n_steps):
            arrays.append((f"points_{k}", self.points[k]))
            arrays.append((f"increments_{k}", self.increments[k]))
        return arrays

    def to_bytes(self):
        return container.dumps(self.header(), self._arrays())

    @classmethod
    def from_bytes(cls, data):
        return cls._from_container(*container.loads(data))

    @classmethod
    def _from_container(cls, header, arrays):
        if header.get("kind") != "field_realization":
            raise InvalidArgumentError(f"Container holds {header.get('kind')}, not a field realization")
        n_steps = len(header["point_counts"])
        return cls(
            kernel=CovarianceKernel.from_dict(header["kernel"]),
            time_grid=arrays["time_grid"],
            points=tuple(arrays[f"points_{k}"] for k in range(n_steps)),
            increments=tuple(arrays[f"increments_{k}"] for k in range(n_steps)),
            seed=int(header["seed"]),
            jitter=arrays["jitter"],
            strategies=tuple(header["strategies"]),
            lineage=header["lineage"],
        )

    def save(self, path):
        container.write(path, self.header(), self._arrays())

    @classmethod
    def load(cls, path):
        return cls._from_container(*container.read(path))


def evaluate_increment(realization, k, x):
    return realization.increment(k, x)


class PointDeclarations:
    """
    Accumulates the evaluation sites every consumer will read, per step of a
    common time grid, before the field is sampled.
    """

    def __init__(self, time_grid, dim=1):
        self.time_grid = _check_grid(time_grid)
        self.dim = dim
        self._sets = [[] for _ in range(len(self.time_grid) - 1)]

    @property
    def n_steps(self):
        return len(self._sets)

    def declare(self, step, points):
        self._sets[step].append(as_points(points, self.dim))

    def declare_everywhere(self, points):
        points = as_points(points, self.dim)
        for k in range(self.n_steps):
            self._sets[k].append(points)

    def declare_paths(self, states, first_step=0):
        """Declare X_{k+1} at step first_step + k for states of shape (N+1, M, d)."""
        for k in range(states.shape[0] - 1):
            self.declare(first_step + k, states[k + 1])

    def point_sets(self):
        sets = []
        for k, chunks in enumerate(self._sets):
            if not chunks:
                logger.debug(f"Nothing declared at step {k}; using the origin")
                chunks = [np.zeros((1, self.dim))]
            sets.append(np.concatenate(chunks, axis=0))
        return sets

    def sample(self, kernel, seed, **kwargs):
        return sample_increments(kernel, self.time_grid, self.point_sets(), seed, **kwargs)


def sample_for_bundle(kernel, bundle, seed, extra_points=None, **kwargs):
    """Realization on the bundle grid declaring every path position X_{k+1} at step k."""
    declarations = PointDeclarations(bundle.time_grid, bundle.dim)
    declarations.declare_paths(bundle.states)
    if extra_points is not None:
        declarations.declare_everywhere(extra_points)
    return declarations.sample(kernel, seed, **kwargs)


def shift_realization(realization, r):
    """
    The realization of s -> B(s + r, .) - B(r, .): drop the steps before
    t_0 + r and move the grid back by r. Increments are reused as is.
    """
    if r < 0:
        raise InvalidArgumentError(f"Shift must be >= 0, got {r}")
    j = realization.step_index(realization.time_grid[0] + r)
    if j >= realization.n_steps:
        raise InvalidArgumentError(f"Shift {r} leaves no step in the realization")
    grid = realization.time_grid[j:] - (realization.time_grid[j] - realization.time_grid[0])
    return attrs.evolve(
        realization, time_grid=grid, points=realization.points[j:], increments=realization.increments[j:],
        jitter=realization.jitter[j:], strategies=realization.strategies[j:],
        lineage=f"{realization.lineage}|shift({j})")


def reverse_realization(realization, at_time, n_steps=None):
    """
    Time reversal at t: the realization of s -> B(t - s, .) - B(t, .) for
    s in [0, n_steps * dt]. Step i reads the original step j-1-i, negated.
    """
    j = realization.step_index(at_time)
    if n_steps is None:
        n_steps = j
    if not 0 < n_steps <= j:
        raise InvalidArgumentError(f"Cannot reverse {n_steps} steps before grid index {j}")
    source = [j - 1 - i for i in range(n_steps)]
    grid = realization.time_grid[j] - realization.time_grid[j - np.arange(n_steps + 1)]
    return attrs.evolve(
        realization, time_grid=grid,
        points=tuple(realization.points[i] for i in source),
        increments=tuple(-realization.increments[i] for i in source),
        jitter=realization.jitter[source], strategies=tuple(realization.strategies[i] for i in source),
        lineage=f"{realization.lineage}|reverse({j},{n_steps})")


def refine_realization(realization, fine_point_sets, seed, jitter_max=DEFAULT_JITTER_MAX):
    """
    Conditional bisection of every step onto a grid with the midpoints inserted.

    The two half-step increments (A, C) at the union U of coarse and requested
    sites are drawn conditionally on the coarse sums A + C at the coarse sites:
    with S = A + C and D = A - C (independent, both with covariance Q_k), S is
    kriged from its known coarse values and D is drawn fresh. The result has
    the exact joint law for time-independent kernels.

    fine_point_sets holds 2N arrays, one per fine step.
    """
    if len(fine_point_sets) != 2 * realization.n_steps:
        raise InvalidArgumentError(f"Expected {2 * realization.n_steps} fine point sets, got {len(fine_point_sets)}")
    kernel = realization.kernel
    grid = realization.time_grid
    fine_grid = np.empty(2 * len(grid) - 1)
    fine_grid[0::2] = grid
    fine_grid[1::2] = 0.5 * (grid[:-1] + grid[1:])
    points, increments, jitters = [], [], []
    for k in range(realization.n_steps):
        coarse = realization.points[k]
        union = np.unique(np.concatenate([coarse, point_keys(fine_point_sets[2 * k]),
                                          point_keys(fine_point_sets[2 * k + 1])]), axis=0)
        dt = grid[k + 1] - grid[k]
        rng = generator(seed, "bisect", k)
        covariance = kernel.gram(grid[k], union, union) * dt
        is_coarse = np.zeros(len(union), dtype=bool)
        pos = np.searchsorted(coarse[:, 0], union[:, 0]) if coarse.shape[1] == 1 else None
        if pos is not None:
            pos_clipped = np.minimum(pos, len(coarse) - 1)
            is_coarse = (pos < len(coarse)) & (coarse[pos_clipped, 0] == union[:, 0])
        else:
            known = {row.tobytes() for row in coarse}
            is_coarse = np.array([row.tobytes() in known for row in union])
        s = np.empty(len(union))
        s[is_coarse] = realization.increments_at(k, union[is_coarse])
        new = ~is_coarse
        jitter = 0.0
        if np.any(new):
            c_pp = covariance[np.ix_(is_coarse, is_coarse)]
            c_np = covariance[np.ix_(new, is_coarse)]
            gain = c_np @ scipy.linalg.pinvh(c_pp)
            conditional = covariance[np.ix_(new, new)] - gain @ c_np.T
            prior = float(np.max(np.diag(covariance)[new]))
            factor, jitter = _factorize(conditional, jitter_max, k, scale=prior)
            s[new] = gain @ s[is_coarse] + factor @ rng.standard_normal(factor.shape[1])
        factor, jitter_d = _factorize(covariance, jitter_max, k)
        d = factor @ rng.standard_normal(factor.shape[1])
        points += [union, union]
        increments += [0.5 * (s + d), 0.5 * (s - d)]
        jitters += [max(jitter, jitter_d)] * 2
    return FieldRealization(
        kernel=kernel, time_grid=fine_grid, points=tuple(points), increments=tuple(increments),
        seed=realization.seed, jitter=np.asarray(jitters), strategies=("bisect",) * len(points),
        lineage=f"{realization.lineage}|bisect({seed})")
