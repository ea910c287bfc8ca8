"""
Infinite-horizon BDSDEs by horizon truncation, and checks of the random
periodic and stationary solutions they define.

Path bundles are simulated on relative grids starting at 0 and retimed to
each start time. The ladder and periodicity checks reuse one bundle; the
stationary check gives every evaluation its own. The field is sampled once
on a common absolute grid after all path positions have been declared, so
horizons, shifts and reversals read the same draws.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import attrs
import numpy as np

from .bdsde_solver import SchemeConfig, solve
from .drivers import make_terminal, monotonicity_margin
from .errors import InvalidArgumentError, PreconditionError
from .forward_sde import dispersed_start, simulate
from .noise_field import PointDeclarations, reverse_realization, sample_increments, shift_realization
from .oracles import periodic_ode_solution
from .seeding import derive_seed

logger = logging.getLogger("bdsde_fk")

ZERO_TERMINAL = make_terminal("constant", value=0.0)


@attrs.frozen
class HorizonParams:
    discount: Optional[float] = None        # K'; μ/2 when unset
    tau: float = attrs.field(default=0.0)
    ladder: tuple = attrs.field(default=(2.0, 4.0, 6.0, 8.0), converter=lambda v: tuple(float(x) for x in v))
    dt: float = attrs.field(default=1.0 / 32)
    n_paths: int = 4096
    check_times: tuple = attrs.field(default=(0.0,), converter=lambda v: tuple(float(x) for x in v))
    shifts: tuple = attrs.field(default=(0.5, 1.0, 2.0), converter=lambda v: tuple(float(x) for x in v))

    @ladder.validator
    def _check_ladder(self, attribute, value):
        if not value or value[0] <= 0 or any(b <= a for a, b in zip(value, value[1:])):
            raise InvalidArgumentError(f"Horizon ladder must be positive and increasing, got {value}")

    @dt.validator
    def _check_dt(self, attribute, value):
        if not value > 0:
            raise InvalidArgumentError(f"dt must be > 0, got {value}")

    @tau.validator
    def _check_tau(self, attribute, value):
        if value < 0:
            raise InvalidArgumentError(f"Period must be >= 0, got {value}")

    def steps(self, length):
        """Number of grid steps covering length, which must be a multiple of dt."""
        n = int(round(length / self.dt))
        if abs(n * self.dt - length) > 1e-9 * max(1.0, length):
            raise InvalidArgumentError(f"{length} is not a multiple of the time step {self.dt}")
        return n

    def grid(self, length):
        n = self.steps(length)
        return np.arange(n + 1) * self.dt


@attrs.frozen
class ShiftOp:
    """θ_r on field realizations."""
    r: float = attrs.field()

    @r.validator
    def _check_r(self, attribute, value):
        if value < 0:
            raise InvalidArgumentError(f"Shift must be >= 0, got {value}")

    def __call__(self, realization):
        return shift_realization(realization, self.r)

    def then(self, other):
        return ShiftOp(self.r + other.r)


def discount_for(driver, params):
    if params.discount is not None:
        return params.discount
    if driver.monotonicity_mu is None:
        raise PreconditionError("Condition (M) needs a monotone driver; none declared")
    return driver.monotonicity_mu / 2


@dataclass
class MarginReport:
    mu: Optional[float]
    margin_K: float
    alpha: float
    bound_M: float
    discount: float
    margin: float

    @property
    def passed(self):
        return self.margin > 0

    def to_dict(self):
        return {**self.__dict__, "passed": self.passed}


def margin_report(driver, kernel, params):
    discount = discount_for(driver, params)
    return MarginReport(driver.monotonicity_mu, driver.margin_K, driver.alpha, kernel.bound_M, discount,
                        float(monotonicity_margin(driver, kernel, discount)))


def require_margin(driver, kernel, params):
    report = margin_report(driver, kernel, params)
    if not report.passed:
        raise PreconditionError(
            f"Condition (M) fails: 2μ - K' - K/(1-α) - KM = {report.margin:.4g} <= 0 "
            f"(μ={report.mu}, K={report.margin_K}, α={report.alpha}, M={report.bound_M}, K'={report.discount})")
    return report


def _probe_array(probes, dim):
    probes = np.asarray(probes, dtype=float)
    return probes.reshape(-1, dim)


def _relative_bundle(coefficients, params, probes, length, seed):
    """Paths on [0, length] from starts spread over the probe box."""
    low, high = float(np.min(probes)), float(np.max(probes))
    if high - low < 1e-6:
        low, high = low - 1.0, high + 1.0
    x0 = dispersed_start(low, high, params.n_paths, coefficients.dim, seed)
    return simulate(coefficients, x0, params.grid(length), params.n_paths, seed)


@dataclass
class HorizonReport:
    horizons: List[float]
    discount: float
    margin: float
    differences: List[float]
    tails: List[float]
    values: List[List[float]]
    stderrs: List[List[float]]
    monotone: bool
    solutions: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if k != "solutions"}


def _decreasing(values, allowed_violations=1):
    violations = sum(b > a for a, b in zip(values, values[1:]))
    return violations <= allowed_violations


def solve_horizon(driver, coefficients, kernel, params, probes, seed, scheme=SchemeConfig(), jobs=1):
    """
    Solve the zero-terminal BDSDE on [0, n_j] for every horizon of the ladder.

    All horizons share one bundle and one realization on the longest grid
    (prefixes of both), so consecutive differences isolate the truncation.
    """
    report_margin = require_margin(driver, kernel, params)
    discount = report_margin.discount
    probes = _probe_array(probes, coefficients.dim)
    longest = params.ladder[-1]
    bundle = _relative_bundle(coefficients, params, probes, longest, seed)
    declarations = PointDeclarations(bundle.time_grid, bundle.dim)
    declarations.declare_paths(bundle.states)
    realization = declarations.sample(kernel, seed)
    steps = [params.steps(n) for n in params.ladder]

    def run(n_steps):
        return solve(driver, ZERO_TERMINAL, bundle.head(n_steps), realization.head(n_steps), scheme)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        solutions = list(executor.map(run, steps))
    differences = []
    for (a, sa), (b, sb) in zip(zip(steps, solutions), zip(steps[1:], solutions[1:])):
        weights = np.exp(-discount * bundle.time_grid[:a + 1])
        gaps = np.mean((sb.Y[:a + 1] - sa.Y) ** 2, axis=1)
        differences.append(float(np.max(weights * gaps)))
    longest_solution = solutions[-1]
    tails = [float(np.exp(-discount * n) * np.mean(longest_solution.Y[s] ** 2))
             for n, s in zip(params.ladder, steps)]
    values = [s.value(0, probes).tolist() for s in solutions]
    stderrs = [s.standard_error(0, probes).tolist() for s in solutions]
    logger.info(f"Horizon ladder {params.ladder}: discounted differences {['%.3g' % d for d in differences]}")
    return HorizonReport(list(params.ladder), discount, report_margin.margin, differences, tails, values, stderrs,
                         _decreasing(differences), solutions)


@dataclass
class PeriodicityReport:
    tau: float
    horizon: float
    check_times: List[float]
    discrepancy: float
    combined_stderr: float
    truncation_estimate: float
    oracle_error: Optional[float]
    rows: List[dict] = field(default_factory=list)

    def to_dict(self):
        return dict(self.__dict__)


def _ode_oracle_applies(driver):
    return (driver.family == "affine" and driver.monotonicity_mu is not None
            and all(driver.param(name) == 0 for name in ("b", "beta", "c", "g0")))


def verify_periodicity(driver, coefficients, kernel, params, probes, seed, scheme=SchemeConfig()):
    """
    Compare u(t + τ, x), computed from the realization R on [t + τ, H], with
    u'(t, x), computed from θ_τ R on [t, H], where H is the longest horizon of
    the ladder. Both use the same forward paths.
    """
    tau = params.tau if driver.periodic_tau is None else driver.periodic_tau
    if driver.periodic_tau is None and not driver.time_independent:
        raise PreconditionError("The driver declares no period and is time dependent")
    if tau <= 0:
        raise PreconditionError("A positive period is needed for the periodicity check")
    horizon = params.ladder[-1]
    tau_steps = params.steps(tau)
    probes = _probe_array(probes, coefficients.dim)
    if any(t + tau >= horizon for t in params.check_times):
        raise InvalidArgumentError(f"Check times plus τ must stay below the horizon {horizon}")
    bundle = _relative_bundle(coefficients, params, probes, horizon, seed)
    declarations = PointDeclarations(params.grid(horizon + tau), bundle.dim)
    for t in params.check_times:
        declarations.declare_paths(bundle.states[:params.steps(horizon - t) + 1], first_step=params.steps(t) + tau_steps)
    realization = declarations.sample(kernel, seed)
    shifted = shift_realization(realization, tau)

    rows, discrepancy, combined, oracle_error = [], 0.0, 0.0, None
    mu = driver.monotonicity_mu
    for t in params.check_times:
        late = bundle.head(params.steps(horizon - t - tau)).retimed(t + tau)
        early = bundle.head(params.steps(horizon - t)).retimed(t)
        u_late = solve(driver, ZERO_TERMINAL, late, realization, scheme)
        u_early = solve(driver, ZERO_TERMINAL, early, shifted, scheme)
        a, b = u_late.value(0, probes), u_early.value(0, probes)
        se = np.sqrt(u_late.standard_error(0, probes) ** 2 + u_early.standard_error(0, probes) ** 2)
        gap = float(np.max(np.abs(a - b)))
        discrepancy = max(discrepancy, gap)
        combined = max(combined, float(np.max(se)))
        row = {"t": t, "discrepancy": gap, "stderr": float(np.max(se))}
        if _ode_oracle_applies(driver):
            exact = periodic_ode_solution(t + tau, mu, driver.param("forcing"), driver.param("tau", 1.0),
                                          driver.param("h0"))
            row["oracle_error"] = float(np.max(np.abs(a - exact)))
            oracle_error = max(oracle_error or 0.0, row["oracle_error"])
        rows.append(row)
    scale = max(1.0, max(abs(r["discrepancy"]) for r in rows))
    rate = mu if mu is not None else 0.0
    truncation = float(scale * np.exp(-rate * (horizon - max(params.check_times) - tau)))
    logger.info(f"Periodicity check τ={tau}: discrepancy {discrepancy:.3g}, stderr {combined:.3g}")
    return PeriodicityReport(tau, horizon, list(params.check_times), discrepancy, combined, truncation,
                             oracle_error, rows)


def resample_after(realization, step, seed):
    """Replace the increments of steps >= step by fresh draws on the same sites."""
    fresh = sample_increments(realization.kernel, realization.time_grid, list(realization.points), seed)
    return attrs.evolve(realization, increments=realization.increments[:step] + fresh.increments[step:],
                        lineage=f"{realization.lineage}|resample({step},{seed})")


@dataclass
class StationaryReport:
    horizon: float
    times: List[float]
    values: List[List[float]]
    stderr: float
    shift_discrepancies: Dict[str, float]
    shift_stderrs: Dict[str, float]
    horizon_difference: float
    horizon_stderr: float
    expected_horizon_scale: float
    shift_truncation: float
    past_measurability_error: float

    def to_dict(self):
        return dict(self.__dict__)


def stationary_solution(driver, coefficients, kernel, params, probes, seed, scheme=SchemeConfig()):
    """
    v(a, x) = Y_0 of the zero-terminal BDSDE driven by the field reversed at
    a, B(s, x) = B̃(a - s, x) - B̃(a, x), over the whole past of a back to the
    fixed anchor 0 of the field grid. Check times are taken from 2H on, where
    H is the longest ladder horizon.

    For every shift r, v(a + r) on B̃ is compared with v(a) on θ̃_r B̃. The two
    read the same recent increments but run over different lengths (a + r
    and a) on independent path bundles, so they agree up to Monte Carlo error
    and a truncation error below shift_truncation. v(a) is also recomputed
    over the last H only, and with the increments after a resampled, which it
    must not read.
    """
    if not driver.time_independent:
        raise PreconditionError("Stationary solutions need a time-independent driver")
    horizon = params.ladder[-1]
    probes = _probe_array(probes, coefficients.dim)
    origin = 2 * horizon
    times = [origin + t for t in params.check_times]
    total = max(times) + max(params.shifts)

    # (reversal time, length, key) of every evaluation; each gets its own bundle
    plan = []
    for a in times:
        plan.append((a, a, ("full", a)))
        plan.append((a, horizon, ("truncated", a)))
        for r in params.shifts:
            plan.append((a + r, a + r, ("direct", a, r)))
            plan.append((a + r, a, ("shifted", a, r)))
    declarations = PointDeclarations(params.grid(total), coefficients.dim)
    bundles = {}
    for i, (at_time, length, key) in enumerate(plan):
        bundle = _relative_bundle(coefficients, params, probes, length, derive_seed(seed, "stationary", i))
        j = params.steps(at_time)
        for step in range(params.steps(length)):
            declarations.declare(j - 1 - step, bundle.states[step + 1])
        bundles[key] = bundle
    base = declarations.sample(kernel, seed)

    def v(realization, at_time, bundle):
        reversed_field = reverse_realization(realization, at_time, bundle.n_steps)
        solution = solve(driver, ZERO_TERMINAL, bundle, reversed_field, scheme)
        return solution.value(0, probes), solution.standard_error(0, probes)

    values, stderr = [], 0.0
    shift_discrepancies, shift_stderrs = {}, {}
    horizon_difference, horizon_stderr = 0.0, 0.0
    past_error = 0.0
    for a in times:
        value, se = v(base, a, bundles[("full", a)])
        values.append(value.tolist())
        stderr = max(stderr, float(np.max(se)))
        short_value, short_se = v(base, a, bundles[("truncated", a)])
        horizon_difference = max(horizon_difference, float(np.max(np.abs(short_value - value))))
        horizon_stderr = max(horizon_stderr, float(np.max(np.sqrt(se ** 2 + short_se ** 2))))
        for r in params.shifts:
            direct, direct_se = v(base, a + r, bundles[("direct", a, r)])
            shifted, shifted_se = v(shift_realization(base, r), a, bundles[("shifted", a, r)])
            key = f"{r:g}"
            shift_discrepancies[key] = max(shift_discrepancies.get(key, 0.0),
                                           float(np.max(np.abs(shifted - direct))))
            shift_stderrs[key] = max(shift_stderrs.get(key, 0.0),
                                     float(np.max(np.sqrt(direct_se ** 2 + shifted_se ** 2))))
        resampled, _ = v(resample_after(base, params.steps(a), seed + 1), a, bundles[("full", a)])
        past_error = max(past_error, float(np.max(np.abs(resampled - value))))
    mu = driver.monotonicity_mu or 0.0
    scale = max(1.0, max(abs(x) for row in values for x in row))
    logger.info(f"Stationary solution: shift discrepancies {shift_discrepancies} (stderr {shift_stderrs}), "
                f"H vs full-past difference {horizon_difference:.3g}")
    return StationaryReport(horizon, list(params.check_times), values, stderr, shift_discrepancies, shift_stderrs,
                            horizon_difference, horizon_stderr, float(scale * np.exp(-mu * horizon)),
                            float(2 * scale * np.exp(-mu * origin)), past_error)
