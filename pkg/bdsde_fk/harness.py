#!/usr/bin/env python3

__license__ = "MIT"
__version__ = "0.1.0"

"""
Experiment runner and command line.

Every subcommand runs one experiment kind from an INI configuration, writes
its data (CSV), report (JSON) and a manifest into the output directory, and
evaluates the tolerances declared for that kind. Exit codes: 0 pass,
2 configuration error, 3 numerical error, 4 tolerance failure.
"""

import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd
import scipy

from .bdsde_solver import moment_report, picard_monitor, solve, variational_z
from .config import config_hash, config_to_text, load_config
from .drivers import validate_driver
from .errors import BdsdeError, InvalidArgumentError, ToleranceError
from .forward_sde import check_coefficients, dispersed_start, simulate
from .horizon import margin_report, solve_horizon, stationary_solution, verify_periodicity
from .kunita_calculus import (ProcessSpec, ResidualStatistics, bracket_quadrature, ito_residual,
                              quadratic_variation)
from .noise_field import PointDeclarations, sample_for_bundle, validate_kernel
from .oracles import (LinearDriver, brownian_bundle, deterministic_fk, explicit_linear_fk, gamma_functional,
                      heat_bump_solution)
from .plots import emit_plots, line_plot
from .seeding import derive_seed
from .spde_fd import cross_validate, heat_refinement, solve_spde

logger = logging.getLogger("bdsde_fk")

DEFAULT_OUT_DIR = "bdsde_fk_output"

DEFAULT_TOLERANCES = {
    "n_se": 3.0,
    "qv_relative": 0.05,
    "pass_fraction": 0.875,
    "heat_linf": 1e-3,
    "cross_relative_l2": 0.05,
    "picard_median": 0.8,
    "horizon_abs": 1e-3,
    "periodic_abs": 1e-2,
    "periodic_oracle": 1e-2,
    "variational_relative": 0.05,
}


@dataclass
class RunManifest:
    kind: str
    config_hash: str
    seed: int
    seeds: List[int]
    versions: Dict[str, str]
    wall_clock: float
    out_dir: str
    outputs: List[str] = field(default_factory=list)
    assertions: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.assertions.values())

    @property
    def failed(self):
        return sorted(name for name, ok in self.assertions.items() if not ok)

    def to_dict(self):
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "seeds": self.seeds,
            "versions": self.versions,
            "wall_clock": self.wall_clock,
            "out_dir": self.out_dir,
            "outputs": self.outputs,
            "assertions": self.assertions,
            "passed": self.passed,
        }

    def write(self, path):
        _write_json(path, self.to_dict())


@dataclass
class Outcome:
    """What one experiment produced: report, named pass/fail checks and the files it wrote."""
    report: dict
    assertions: Dict[str, bool] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    plots: List[dict] = field(default_factory=list)


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value)}")


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)


def _write_csv(out_dir, name, frame):
    frame.to_csv(os.path.join(out_dir, name), index=False, float_format="%.17g")
    return name


def _parallel(fn, items, jobs):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))


def _tolerance(config, name):
    return config.tolerances.get(name, DEFAULT_TOLERANCES[name])


def realization_seeds(config):
    return [derive_seed(config.experiment.seed, "realization", r) for r in range(config.experiment.realizations)]


def _starts(config, seed, dispersed):
    g = config.grid
    d = config.coefficients.dim
    if g.start_low is not None or g.start_high is not None:
        low = g.start_low if g.start_low is not None else g.x0 - 1.0
        high = g.start_high if g.start_high is not None else g.x0 + 1.0
        return dispersed_start(low, high, g.n_paths, d, seed)
    if dispersed:
        points = config.probe_points
        return dispersed_start(float(points.min()) - 0.5, float(points.max()) + 0.5, g.n_paths, d, seed)
    return np.full(d, g.x0)


def _only(driver, *names):
    """True when every driver parameter outside names is zero."""
    return all(value == 0 for key, value in driver.params if key not in names)


def _is_standard_brownian(coefficients):
    return (coefficients.family == "constant" and np.allclose(coefficients.b0, 0)
            and np.allclose(coefficients.sigma0, np.eye(coefficients.dim)))


def _oracle_kind(driver, coefficients):
    if driver.family != "affine":
        return None
    if _only(driver, "beta") and driver.param("beta") == 1 and _is_standard_brownian(coefficients):
        return "linear_fk"
    if _only(driver, "a"):
        return "deterministic"
    return None


def _is_heat_case(driver, coefficients, terminal):
    return (driver.family == "affine" and _only(driver, "a") and coefficients.family == "constant"
            and coefficients.dim == 1 and np.allclose(coefficients.b0, 0) and terminal.family == "gaussian_bump")


def _heat_reference(driver, coefficients, terminal, x, t, T):
    value, derivative = heat_bump_solution(x, t, T, terminal.param("amplitude", 1.0), terminal.param("center"),
                                           terminal.param("width", 1.0), float(coefficients.sigma0[0, 0]))
    growth = np.exp(driver.param("a") * (T - t))
    return growth * value, growth * derivative


def _qv_check(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    grid = config.grid.time_grid()

    def one(seed):
        bundle = simulate(coefficients, _starts(config, seed, False), grid, config.grid.n_paths, seed)
        realization = sample_for_bundle(kernel, bundle, seed)
        qv = quadratic_variation(1.0, realization, bundle)
        expected = bracket_quadrature(1.0, kernel, bundle)
        return {"seed": seed, "realization_id": realization.realization_id,
                "qv": float(np.mean(qv)), "expected": float(np.mean(expected))}

    rows = _parallel(one, realization_seeds(config), jobs)
    frame = pd.DataFrame(rows)
    mean_qv, mean_expected = float(frame["qv"].mean()), float(frame["expected"].mean())
    relative = abs(mean_qv - mean_expected) / mean_expected if mean_expected > 0 else abs(mean_qv)
    report = {"mean_qv": mean_qv, "mean_expected": mean_expected, "relative_error": relative,
              "realizations": len(rows), "n_steps": config.grid.n_steps}
    plot = line_plot("qv_per_realization", range(len(rows)),
                     {"realized": frame["qv"].tolist(), "bracket": frame["expected"].tolist()},
                     "realization", "quadratic variation")
    return Outcome(report, {"qv_relative": relative <= _tolerance(config, "qv_relative")},
                   [_write_csv(out_dir, "qv.csv", frame)], [plot])


def _ito_residual(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    grid = config.grid.time_grid()
    e = config.experiment
    process = ProcessSpec(s0=0.0, f=e.process_f, g=e.process_g, h=e.process_h)

    def one(seed):
        bundle = simulate(coefficients, _starts(config, seed, False), grid, config.grid.n_paths, seed)
        realization = sample_for_bundle(kernel, bundle, seed)
        full = ito_residual(process, e.test_function, realization, bundle)
        without_g = ito_residual(process, e.test_function, realization, bundle, g_correction=False)
        bracket = bracket_quadrature(e.process_g, kernel, bundle)
        return full.residuals, without_g.residuals, bracket, bundle

    results = _parallel(one, realization_seeds(config), jobs)
    bundle = results[-1][3]
    full = ResidualStatistics.from_residuals(np.concatenate([r[0] for r in results]), bundle)
    without_g = ResidualStatistics.from_residuals(np.concatenate([r[1] for r in results]), bundle)
    n_se = _tolerance(config, "n_se")
    assertions = {"unbiased_with_correction": abs(full.mean) <= n_se * full.stderr + 1e-12}
    report = {"with_correction": full.to_record(), "without_g_correction": without_g.to_record()}
    if e.test_function == "square" and e.process_f == 0 and e.process_h == 0:
        expected = -float(np.mean(np.concatenate([r[2] for r in results])))
        report["expected_bias_without_g_correction"] = expected
        assertions["bias_without_correction"] = abs(without_g.mean - expected) <= n_se * without_g.stderr + 1e-12
    frame = pd.DataFrame({"with_correction": full.residuals, "without_g_correction": without_g.residuals})
    return Outcome(report, assertions, [_write_csv(out_dir, "ito_residuals.csv", frame)])


def _solve_bdsde(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    terminal = config.terminal.build()
    scheme = config.scheme.build()
    grid = config.grid.time_grid()
    probes = config.probe_points
    e = config.experiment
    n_se = _tolerance(config, "n_se")
    oracle = _oracle_kind(driver, coefficients)

    def one(seed):
        bundle = simulate(coefficients, _starts(config, seed, True), grid, config.grid.n_paths, seed,
                          with_flow=e.variational)
        declarations = PointDeclarations(grid, coefficients.dim)
        declarations.declare_paths(bundle.states)
        oracle_seeds = [derive_seed(seed, "oracle", i) for i in range(len(probes))]
        if oracle == "linear_fk":
            for x, s in zip(probes, oracle_seeds):
                declarations.declare_paths(brownian_bundle(x, grid, e.oracle_paths, s).states)
        realization = declarations.sample(kernel, seed)
        solution = solve(driver, terminal, bundle, realization, scheme)
        values = solution.value(0, probes)
        stderr = solution.standard_error(0, probes)
        rows = []
        for i, x in enumerate(probes):
            row = {"seed": seed, "realization_id": realization.realization_id, "x": float(x[0]),
                   "u": float(values[i]), "stderr": float(stderr[i])}
            if oracle == "linear_fk":
                estimate = explicit_linear_fk(terminal, kernel, realization, grid[0], x, e.oracle_paths,
                                              oracle_seeds[i])
                row.update(oracle=estimate.mean, oracle_stderr=estimate.stderr)
            elif oracle == "deterministic":
                row.update(oracle=deterministic_fk(terminal, driver.param("a"), coefficients, grid[0], grid[-1], x,
                                                   seed=oracle_seeds[i]), oracle_stderr=0.0)
            if "oracle" in row:
                combined = np.hypot(row["stderr"], row["oracle_stderr"])
                row["agrees"] = bool(abs(row["u"] - row["oracle"]) <= n_se * combined + 1e-9)
            rows.append(row)
        extra = {"terminal_error": float(np.max(np.abs(solution.Y[-1] - terminal.value(bundle.states[-1])))),
                 "moments": moment_report(solution, e.moment_p).to_dict()}
        if e.variational:
            vz = variational_z(solution, bundle, driver, terminal, realization, scheme=scheme)
            extra["variational"] = vz.distances()
            if _is_heat_case(driver, coefficients, terminal):
                _, derivative = _heat_reference(driver, coefficients, terminal, bundle.states[0][:, 0], grid[0],
                                                grid[-1])
                exact = (derivative * coefficients.sigma0[0, 0])[:, None]
                scale = np.sqrt(np.mean(exact ** 2))
                extra["variational_vs_exact"] = {
                    name: float(np.sqrt(np.mean((getattr(vz, name) - exact) ** 2)) / scale)
                    for name in ("regression", "surface", "flow")}
        return rows, extra, solution

    results = _parallel(one, realization_seeds(config), jobs)
    frame = pd.DataFrame([row for rows, _, _ in results for row in rows])
    outputs = [_write_csv(out_dir, "bdsde_values.csv", frame)]
    results[0][2].save(os.path.join(out_dir, "solution_0.bin"))
    outputs.append("solution_0.bin")
    extras = [extra for _, extra, _ in results]
    assertions = {"terminal_exact": all(x["terminal_error"] == 0 for x in extras)}
    report = {"oracle": oracle, "realizations": extras}
    if oracle is not None:
        passes = [all(row["agrees"] for row in rows) for rows, _, _ in results]
        report["pass_fraction"] = float(np.mean(passes))
        assertions["oracle_agreement"] = report["pass_fraction"] >= _tolerance(config, "pass_fraction")
    if e.variational and "variational_vs_exact" in extras[0]:
        worst = max(max(x["variational_vs_exact"].values()) for x in extras)
        assertions["variational_z"] = worst <= _tolerance(config, "variational_relative")
    first = frame[frame["seed"] == frame["seed"].iloc[0]]
    series = {"u": first["u"].tolist()}
    if "oracle" in first:
        series["oracle"] = first["oracle"].tolist()
    plots = [line_plot("u_profile", first["x"], series, "x", "u(t0, x)")]
    return Outcome(report, assertions, outputs, plots)


def _fd_setup(config, declarations):
    coefficients = config.coefficients.build()
    spec = config.fd_grid()
    grid = config.grid.time_grid()
    nodes = spec.nodes(coefficients, grid[-1] - grid[0])
    declarations.declare_everywhere(nodes)
    return spec


def _solve_spde(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    terminal = config.terminal.build()
    grid = config.grid.time_grid()

    def one(seed):
        declarations = PointDeclarations(grid, coefficients.dim)
        spec = _fd_setup(config, declarations)
        realization = declarations.sample(kernel, seed)
        return solve_spde(driver, terminal, coefficients, kernel, realization, spec)

    solutions = _parallel(one, realization_seeds(config), jobs)
    outputs, report = [], {"realizations": []}
    assertions = {"terminal_exact": all(np.array_equal(s.values[-1], terminal.value(s.nodes[:, None]))
                                        for s in solutions)}
    for i, solution in enumerate(solutions):
        csv_path, json_path = solution.dump(out_dir, f"field_solution_{i}")
        outputs += [os.path.basename(csv_path), os.path.basename(json_path)]
        entry = {"realization_id": solution.realization_id}
        if _is_heat_case(driver, coefficients, terminal):
            mask = solution.probe_mask()
            exact, _ = _heat_reference(driver, coefficients, terminal, solution.nodes[mask], grid[0], grid[-1])
            entry["heat_linf"] = float(np.max(np.abs(solution.values[0][mask] - exact)))
        report["realizations"].append(entry)
    if "heat_linf" in report["realizations"][0]:
        assertions["heat_oracle"] = all(r["heat_linf"] <= _tolerance(config, "heat_linf")
                                        for r in report["realizations"])
        spec = config.fd_grid()
        n, g = config.grid.n_steps, spec.n_nodes
        levels = [(max(1, n // 4), max(3, g // 4)), (max(1, n // 2), max(3, g // 2)), (n, g)]
        refinement = heat_refinement(driver, terminal, coefficients, spec, grid[-1] - grid[0], levels)
        report["refinement"] = refinement.to_dict()
    mask = solutions[0].probe_mask()
    plots = [line_plot("u_profile", solutions[0].nodes[mask], {"u(t0)": solutions[0].values[0][mask],
                                                               "phi": solutions[0].values[-1][mask]},
                       "x", "u")]
    return Outcome(report, assertions, outputs, plots)


def _cross_validate(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    terminal = config.terminal.build()
    scheme = config.scheme.build()
    grid = config.grid.time_grid()

    def one(seed):
        bundle = simulate(coefficients, _starts(config, seed, True), grid, config.grid.n_paths, seed)
        declarations = PointDeclarations(grid, coefficients.dim)
        declarations.declare_paths(bundle.states)
        spec = _fd_setup(config, declarations)
        realization = declarations.sample(kernel, seed)
        solution = solve(driver, terminal, bundle, realization, scheme)
        fd = solve_spde(driver, terminal, coefficients, kernel, realization, spec)
        return cross_validate(solution, fd)

    reports = _parallel(one, realization_seeds(config), jobs)
    outputs = []
    for i, report in enumerate(reports):
        outputs.append(_write_csv(out_dir, f"cross_validation_{i}.csv", report.to_frame()))
    limit = _tolerance(config, "cross_relative_l2")
    initial = [report.at(grid[0])["relative_l2"] for report in reports]
    frame = reports[0].to_frame()
    plots = [line_plot("cross_validation_l2", frame["t"], {"l2": frame["l2"], "linf": frame["linf"]},
                       "t", "distance", log=True)]
    return Outcome({"relative_l2_t0": initial, "reports": [r.to_dict() for r in reports]},
                   {"cross_relative_l2": all(v <= limit for v in initial)}, outputs, plots)


def _oracle(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    terminal = config.terminal.build()
    grid = config.grid.time_grid()
    probes = config.probe_points
    e = config.experiment
    assertions = {}
    rows = []
    if e.oracle == "deterministic_fk":
        for i, x in enumerate(probes):
            value = deterministic_fk(terminal, driver.param("a"), coefficients, grid[0], grid[-1], x,
                                     seed=derive_seed(e.seed, "oracle", i))
            rows.append({"x": float(x[0]), "mean": value, "stderr": 0.0, "M": 0, "N": 0})
    elif e.oracle == "explicit_linear_fk":
        def one(seed):
            seeds = [derive_seed(seed, "oracle", i) for i in range(len(probes))]
            declarations = PointDeclarations(grid, coefficients.dim)
            for x, s in zip(probes, seeds):
                declarations.declare_paths(brownian_bundle(x, grid, e.oracle_paths, s).states)
            realization = declarations.sample(kernel, seed)
            return [{"seed": seed, "x": float(x[0]),
                     **explicit_linear_fk(terminal, kernel, realization, grid[0], x, e.oracle_paths, s).to_dict()}
                    for x, s in zip(probes, seeds)]

        rows = [row for chunk in _parallel(one, realization_seeds(config), jobs) for row in chunk]
    else:
        linear = LinearDriver(h=driver.param("h0"), alpha=driver.param("a"), beta=driver.param("beta"))

        def one(seed):
            bundle = simulate(coefficients, _starts(config, seed, False), grid, config.grid.n_paths, seed)
            realization = sample_for_bundle(kernel, bundle, seed)
            gamma = gamma_functional(linear, bundle, realization).between(0, bundle.n_steps)
            return {"seed": seed, "mean": float(np.mean(gamma)),
                    "stderr": float(np.std(gamma, ddof=1) / np.sqrt(len(gamma))) if len(gamma) > 1 else 0.0,
                    "M": bundle.n_paths, "N": bundle.n_steps}

        rows = _parallel(one, realization_seeds(config), jobs)
        if linear.alpha == 0 and linear.h == 0:
            means = np.array([r["mean"] for r in rows])
            pooled_se = float(np.std(means, ddof=1) / np.sqrt(len(means))) if len(means) > 1 else rows[0]["stderr"]
            assertions["gamma_mean_one"] = abs(means.mean() - 1) <= _tolerance(config, "n_se") * pooled_se + 1e-12
    frame = pd.DataFrame(rows)
    assertions["finite"] = bool(np.all(np.isfinite(frame["mean"])))
    return Outcome({"oracle": e.oracle, "estimates": rows}, assertions, [_write_csv(out_dir, "oracle.csv", frame)])


def _picard(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    terminal = config.terminal.build()
    scheme = config.scheme.build()
    grid = config.grid.time_grid()

    def one(seed):
        bundle = simulate(coefficients, _starts(config, seed, True), grid, config.grid.n_paths, seed)
        realization = sample_for_bundle(kernel, bundle, seed)
        return picard_monitor(driver, terminal, bundle, realization, config.experiment.picard_iterations,
                              scheme=scheme)

    reports = _parallel(one, realization_seeds(config), jobs)
    limit = _tolerance(config, "picard_median")
    assertions = {"contraction": all(all(r < 1 for r in rep.ratios[:4]) for rep in reports),
                  "median_ratio": all(float(np.median(rep.ratios[:4])) <= limit for rep in reports if rep.ratios)}
    frame = pd.DataFrame([{"realization": i, "iteration": n + 1, "distance": d}
                          for i, rep in enumerate(reports) for n, d in enumerate(rep.distances)])
    plot = line_plot("picard_distances", range(1, len(reports[0].distances) + 1),
                     {"distance": reports[0].distances}, "iteration", "weighted distance", log=True)
    return Outcome({"reports": [r.to_dict() for r in reports]}, assertions,
                   [_write_csv(out_dir, "picard.csv", frame)], [plot])


def _horizon_cauchy(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    params = config.horizon.build()
    report = solve_horizon(driver, coefficients, kernel, params, config.probe_points, config.experiment.seed,
                           config.scheme.build(), jobs)
    assertions = {"cauchy_decay": report.monotone}
    data = report.to_dict()
    if driver.family == "affine" and _only(driver, "a", "h0") and driver.monotonicity_mu is not None:
        c = driver.param("h0") / driver.monotonicity_mu
        data["limit"] = c
        data["limit_error"] = float(np.max(np.abs(np.asarray(report.values[-1]) - c)))
        assertions["limit"] = data["limit_error"] <= _tolerance(config, "horizon_abs")
    frame = pd.DataFrame({"horizon": report.horizons[1:], "difference": report.differences})
    plot = line_plot("horizon_differences", report.horizons[1:], {"discounted difference": report.differences},
                     "horizon", "sup_t e^{-K't} E|ΔY|²", log=True)
    return Outcome(data, assertions, [_write_csv(out_dir, "horizon.csv", frame)], [plot])


def _periodic(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    report = verify_periodicity(driver, coefficients, kernel, config.horizon.build(), config.probe_points,
                                config.experiment.seed, config.scheme.build())
    n_se = _tolerance(config, "n_se")
    limit = max(_tolerance(config, "periodic_abs"), n_se * report.combined_stderr)
    assertions = {"periodicity": report.discrepancy <= limit}
    if report.oracle_error is not None:
        assertions["periodic_oracle"] = report.oracle_error <= _tolerance(config, "periodic_oracle")
    frame = pd.DataFrame(report.rows)
    plot = line_plot("periodicity_discrepancy", frame["t"], {"discrepancy": frame["discrepancy"],
                                                            "stderr": frame["stderr"]}, "t", "|u'(t) - u(t+τ)|")
    return Outcome(report.to_dict(), assertions, [_write_csv(out_dir, "periodicity.csv", frame)], [plot])


def _stationary(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    report = stationary_solution(driver, coefficients, kernel, config.horizon.build(), config.probe_points,
                                 config.experiment.seed, config.scheme.build())
    n_se = _tolerance(config, "n_se")
    assertions = {
        "shift_identity": all(report.shift_discrepancies[r]
                              <= report.shift_truncation + n_se * report.shift_stderrs[r] + 1e-12
                              for r in report.shift_discrepancies),
        "horizon_independence": (report.horizon_difference
                                 <= report.expected_horizon_scale + n_se * report.horizon_stderr + 1e-12),
        "past_measurable": report.past_measurability_error <= 1e-12,
    }
    shifts = sorted(report.shift_discrepancies, key=float)
    frame = pd.DataFrame({"r": [float(r) for r in shifts],
                          "discrepancy": [report.shift_discrepancies[r] for r in shifts],
                          "stderr": [report.shift_stderrs[r] for r in shifts]})
    plot = line_plot("stationary_shifts", frame["r"], {"discrepancy": frame["discrepancy"]}, "r",
                     "|θ̃_r v(t) - v(t+r)|")
    return Outcome(report.to_dict(), assertions, [_write_csv(out_dir, "stationary.csv", frame)], [plot])


def _validate(config, out_dir, jobs):
    kernel = config.kernel.build()
    coefficients = config.coefficients.build()
    driver = config.driver.build(coefficients.dim)
    probe = config.probes.spec(coefficients.dim, config.experiment.seed)
    kernel_report = validate_kernel(kernel, probe)
    driver_report = validate_driver(driver, probe, kernel, config.horizon.discount)
    coefficient_report = check_coefficients(coefficients, probe)
    report = {"kernel": kernel_report.to_dict(), "driver": driver_report.to_dict(),
              "coefficients": {**coefficient_report.__dict__, "passed": coefficient_report.passed(coefficients)}}
    if driver.monotonicity_mu is not None:
        report["margin"] = margin_report(driver, kernel, config.horizon.build()).to_dict()
    assertions = {"kernel_valid": kernel_report.passed, "driver_valid": driver_report.passed,
                  "coefficients_valid": coefficient_report.passed(coefficients)}
    return Outcome(report, assertions)


EXPERIMENTS = {
    "qv-check": _qv_check,
    "ito-residual": _ito_residual,
    "solve-bdsde": _solve_bdsde,
    "solve-spde": _solve_spde,
    "cross-validate": _cross_validate,
    "oracle": _oracle,
    "picard": _picard,
    "horizon-cauchy": _horizon_cauchy,
    "periodic": _periodic,
    "stationary": _stationary,
    "validate": _validate,
}


def versions():
    return {"bdsde_fk": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "python": platform.python_version()}


def run(config, out_dir=DEFAULT_OUT_DIR, jobs=1):
    """
    Run the experiment named by config.experiment.kind.

    Writes config.ini, the experiment data, report.json and manifest.json
    into out_dir and returns the RunManifest. Tolerance failures are recorded
    in the manifest, not raised.
    """
    kind = config.experiment.kind
    if kind not in EXPERIMENTS:
        raise InvalidArgumentError(f"Got unexpected experiment kind {kind}")
    os.makedirs(out_dir, exist_ok=True)
    started = time.perf_counter()
    logger.info(f"Running {kind} (seed {config.experiment.seed}) into {out_dir}")
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as f:
        f.write(config_to_text(config))
    outcome = EXPERIMENTS[kind](config, out_dir, jobs)
    report = dict(outcome.report)
    report["assertions"] = outcome.assertions
    report["plots"] = outcome.plots
    _write_json(os.path.join(out_dir, "report.json"), report)
    manifest = RunManifest(
        kind=kind, config_hash=config_hash(config), seed=config.experiment.seed, seeds=realization_seeds(config),
        versions=versions(), wall_clock=round(time.perf_counter() - started, 3), out_dir=out_dir,
        outputs=sorted(["config.ini", "report.json"] + outcome.outputs),
        assertions={name: bool(ok) for name, ok in outcome.assertions.items()},
    )
    manifest.write(os.path.join(out_dir, "manifest.json"))
    for name in manifest.failed:
        logger.warning(f"Tolerance check failed: {name}")
    logger.info(f"{kind}: {'PASS' if manifest.passed else 'FAIL'} in {manifest.wall_clock:.1f}s")
    return manifest


def cli(argv=None):

    import argparse

    parser = argparse.ArgumentParser(
        description="Backward doubly stochastic equations: regression Monte Carlo, finite-difference duals and "
                    "infinite-horizon checks on fixed noise realizations",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument('-v', '--version', help="show version and exit", action='version', version=f'{__version__}')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file", default=None, type=str)
    common.add_argument("--seed", help="master seed (overrides [experiment] seed)", default=None, type=int)
    common.add_argument("--out-dir", "-o", help=f"directory to save the outputs (default: {DEFAULT_OUT_DIR})",
                        default=None, type=str)
    common.add_argument("--jobs", "-j", help="number of realizations solved concurrently", default=1, type=int)
    common.add_argument("--set", help="override a configuration value, as section.key=value (repeatable)",
                        action="append", default=[], dest="overrides")
    common.add_argument("--debug", help="print debug information", default=False, action="store_true")
    common.add_argument("--quiet", help="only print warnings and errors", default=False, action="store_true")

    subparsers = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENTS:
        subparsers.add_parser(kind, parents=[common], help=f"run the {kind} experiment",
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    plot_parser = subparsers.add_parser("plot", parents=[common], help="draw the SVG plots of a finished run")
    plot_parser.add_argument("manifest", help="manifest.json written by a run")

    args = parser.parse_args(argv)

    logging.basicConfig()
    if args.debug:
        logger.setLevel(logging.DEBUG)
    elif args.quiet:
        logger.setLevel(logging.WARNING)
    else:
        logger.setLevel(logging.INFO)

    try:
        if args.command == "plot":
            with open(args.manifest, encoding="utf-8") as f:
                manifest = json.load(f)
            for path in emit_plots(manifest, args.out_dir):
                logger.info(f"Wrote {path}")
            return 0
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"experiment.seed={args.seed}")
        overrides.append(f"experiment.kind={args.command}")
        config = load_config(args.config, overrides)
        manifest = run(config, args.out_dir or DEFAULT_OUT_DIR, jobs=args.jobs)
        if not manifest.passed:
            raise ToleranceError(manifest.failed)
    except BdsdeError as err:
        logger.error(str(err))
        sys.exit(err.exit_code)
    except OSError as err:
        logger.error(str(err))
        sys.exit(3)
    return 0


if __name__ == "__main__":
    cli()
