"""
Experiment configuration: INI files with one section per concern, parsed
into frozen typed sections. Functions are chosen by registry name plus
parameters only.
"""

import configparser
import hashlib
import io
from typing import Optional

import attrs
import numpy as np

from .bdsde_solver import SchemeConfig
from .drivers import (DRIVER_FAMILIES, DRIVER_PARAMETERS, TERMINAL_FAMILIES, TERMINAL_PARAMETERS, make_driver,
                      make_terminal)
from .errors import BdsdeError, ConfigError
from .forward_sde import COEFFICIENT_FAMILIES, make_coefficients
from .horizon import HorizonParams
from .noise_field import KERNEL_FACTORIES, ProbeSpec, make_kernel
from .regression import BASIS_KINDS, BasisConfig
from .spde_fd import SCHEMES, GridSpec

EXPERIMENT_KINDS = ("qv-check", "ito-residual", "solve-bdsde", "solve-spde", "cross-validate", "oracle", "picard",
                    "horizon-cauchy", "periodic", "stationary", "validate")


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _in(choices):
    return lambda v: v in choices


def _increasing(v):
    return len(v) > 0 and v[0] > 0 and all(b > a for a, b in zip(v, v[1:]))


def _floats(v):
    return tuple(float(x) for x in v)


def _option(default, check=None, kind=None):
    return attrs.field(default=default, metadata={"check": check, "kind": kind})


@attrs.frozen
class ExperimentSection:
    kind: str = _option("solve-bdsde", _in(EXPERIMENT_KINDS))
    seed: int = _option(0, _non_negative)
    realizations: int = _option(1, _positive)
    test_function: str = _option("square", _in(("square", "quartic", "exp_clamped")))
    oracle: str = _option("explicit_linear_fk", _in(("explicit_linear_fk", "deterministic_fk", "gamma")))
    oracle_paths: int = _option(100000, _positive)
    picard_iterations: int = _option(6, _positive)
    moment_p: float = _option(2.0, lambda v: v > 1)
    variational: bool = _option(False)
    # constant f, g, h of the test process S in ito-residual
    process_f: float = _option(0.0)
    process_g: float = _option(1.0)
    process_h: float = _option(0.0)


@attrs.frozen
class KernelSection:
    family: str = _option("constant", _in(tuple(KERNEL_FACTORIES)))
    amplitude: float = _option(1.0, _non_negative)
    scale: float = _option(1.0, _positive)
    modulation: float = _option(0.0, lambda v: 0 <= v < 1)
    period: float = _option(1.0, _positive)

    def build(self):
        if self.family == "constant":
            return make_kernel("constant", self.modulation, self.period, q0=self.amplitude)
        return make_kernel(self.family, self.modulation, self.period, scale=self.scale, amplitude=self.amplitude)


@attrs.frozen
class CoefficientSection:
    family: str = _option("constant", _in(COEFFICIENT_FAMILIES + ("ornstein_uhlenbeck",)))
    dim: int = _option(1, _positive)
    drift: float = _option(0.0)
    diffusion: float = _option(1.0)
    drift_matrix: float = _option(0.0)
    drift_slope: float = _option(0.0)
    diffusion_slope: float = _option(0.0)
    theta: float = _option(1.0)
    mean: float = _option(0.0)

    def build(self):
        if self.family == "ornstein_uhlenbeck":
            return make_coefficients(self.family, dim=self.dim, theta=self.theta, mean=self.mean,
                                     diffusion=self.diffusion)
        return make_coefficients(self.family, dim=self.dim, drift=self.drift, diffusion=self.diffusion,
                                 drift_matrix=self.drift_matrix, drift_slope=self.drift_slope,
                                 diffusion_slope=self.diffusion_slope)


@attrs.frozen
class DriverSection:
    """Registry family, α and the family parameters (validated against the family)."""
    family: str = _option("affine", _in(DRIVER_FAMILIES))
    alpha: float = _option(0.5, lambda v: 0 < v < 1)
    params: tuple = attrs.field(default=(), metadata={"kind": "free"})

    def build(self, dim=1):
        return make_driver(self.family, alpha=self.alpha, dim=dim, **dict(self.params))


@attrs.frozen
class TerminalSection:
    family: str = _option("linear", _in(tuple(f for f in TERMINAL_FAMILIES if f != "sum")))
    params: tuple = attrs.field(default=(), metadata={"kind": "free"})

    def build(self):
        return make_terminal(self.family, **dict(self.params))


@attrs.frozen
class GridSection:
    T: float = _option(1.0, _positive)
    t0: float = _option(0.0, _non_negative)
    n_steps: int = _option(64, _positive)
    n_paths: int = _option(10000, _positive)
    n_nodes: int = _option(400, lambda v: v >= 3)
    x0: float = _option(0.0)
    start_low: Optional[float] = _option(None)
    start_high: Optional[float] = _option(None)
    fd_scheme: str = _option("imex", _in(SCHEMES))
    margin_sd: float = _option(6.0, _positive)

    def time_grid(self):
        return np.linspace(self.t0, self.T, self.n_steps + 1)


@attrs.frozen
class SchemeSection:
    basis: str = _option("polynomial", _in(BASIS_KINDS))
    degree: int = _option(4, _positive)
    n_bins: int = _option(32, _positive)
    n_inner: int = _option(0, _non_negative)
    control_variate: bool = _option(True)

    def build(self):
        return SchemeConfig(BasisConfig(self.basis, self.degree, self.n_bins), self.n_inner, self.control_variate)


@attrs.frozen
class HorizonSection:
    discount: Optional[float] = _option(None, _positive)
    tau: float = _option(0.0, _non_negative)
    ladder: tuple = _option((2.0, 4.0, 6.0, 8.0), _increasing)
    dt: float = _option(1.0 / 32, _positive)
    n_paths: int = _option(4096, _positive)
    check_times: tuple = _option((0.0,))
    shifts: tuple = _option((0.5, 1.0, 2.0), lambda v: all(r >= 0 for r in v))

    def build(self):
        return HorizonParams(self.discount, self.tau, self.ladder, self.dt, self.n_paths, self.check_times,
                             self.shifts)


@attrs.frozen
class ProbeSection:
    points: tuple = _option((-1.0, -0.5, 0.0, 0.5, 1.0))
    low: float = _option(-5.0)
    high: float = _option(5.0)
    n_samples: int = _option(2000, _positive)
    value_bound: float = _option(5.0, _positive)

    def spec(self, dim=1, seed=0):
        return ProbeSpec(low=self.low, high=self.high, dim=dim, n_samples=self.n_samples, value_bound=self.value_bound,
                         seed=seed)


@attrs.frozen
class ToleranceSection:
    """Named tolerances used by the acceptance checks of a run; free keys."""
    params: tuple = attrs.field(default=(), metadata={"kind": "free"})

    def get(self, name, default):
        return dict(self.params).get(name, default)


SECTIONS = {
    "experiment": ExperimentSection,
    "kernel": KernelSection,
    "coefficients": CoefficientSection,
    "driver": DriverSection,
    "terminal": TerminalSection,
    "grid": GridSection,
    "scheme": SchemeSection,
    "horizon": HorizonSection,
    "probes": ProbeSection,
    "tolerances": ToleranceSection,
}


@attrs.frozen
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    kernel: KernelSection = KernelSection()
    coefficients: CoefficientSection = CoefficientSection()
    driver: DriverSection = DriverSection()
    terminal: TerminalSection = TerminalSection()
    grid: GridSection = GridSection()
    scheme: SchemeSection = SchemeSection()
    horizon: HorizonSection = HorizonSection()
    probes: ProbeSection = ProbeSection()
    tolerances: ToleranceSection = ToleranceSection()

    @property
    def probe_points(self):
        return np.asarray(self.probes.points, dtype=float).reshape(-1, self.coefficients.dim)

    def fd_grid(self):
        points = self.probe_points
        return GridSpec(float(points.min()), float(points.max()), self.grid.n_nodes, self.grid.margin_sd,
                        self.grid.fd_scheme)


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


def _parse_free(text):
    """A float, a comma-separated list of floats, or a bare word."""
    if "," in text:
        return _floats(x for x in text.split(",") if x.strip())
    try:
        return float(text)
    except ValueError:
        return text.strip()


def _parse_value(field, text):
    if field.type in (float, Optional[float]):
        return float(text)
    if field.type is int:
        value = float(text)
        if value != int(value):
            raise ValueError(f"not an integer: {text}")
        return int(value)
    if field.type is bool:
        return _parse_bool(text)
    if field.type is tuple:
        return _floats(x for x in text.split(",") if x.strip())
    return text.strip()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        text = ", ".join(repr(float(x)) for x in value)
        return text + "," if len(value) == 1 else text
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_parser(text=None, paths=(), overrides=()):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        for path in paths:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f, source=path)
        if text is not None:
            parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"Malformed configuration: {err}", [getattr(err, "source", None) or "<text>"]) from err
    offending = []
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            offending.append(item)
            continue
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option, value.strip())
    if offending:
        raise ConfigError("Overrides must read section.key=value", offending)
    return parser


def _build_section(name, cls, items, offending):
    fields = {f.name: f for f in attrs.fields(cls)}
    values = {}
    free = []
    for key, text in items:
        if key in fields and fields[key].metadata.get("kind") != "free":
            field = fields[key]
            try:
                value = _parse_value(field, text)
            except ValueError:
                offending.append(f"{name}.{key}")
                continue
            check = field.metadata.get("check")
            if check is not None and not check(value):
                offending.append(f"{name}.{key}")
                continue
            values[key] = value
        elif "params" in fields:
            free.append((key, _parse_free(text)))
        else:
            offending.append(f"{name}.{key}")
    if "params" in fields:
        values["params"] = tuple(sorted(free))
    return cls(**values)


def _check_free_keys(config, offending):
    allowed = set(DRIVER_PARAMETERS.get(config.driver.family, ()))
    offending += [f"driver.{k}" for k, _ in config.driver.params if k not in allowed]
    allowed = set(TERMINAL_PARAMETERS.get(config.terminal.family, ()))
    offending += [f"terminal.{k}" for k, _ in config.terminal.params if k not in allowed]
    offending += [f"tolerances.{k}" for k, v in config.tolerances.params if not isinstance(v, float)]


def _check_registries(config, offending):
    """Build every registry object once so parameter errors surface with their section."""
    for name, build in (("kernel", config.kernel.build), ("coefficients", config.coefficients.build),
                        ("driver", lambda: config.driver.build(config.coefficients.dim)),
                        ("terminal", config.terminal.build), ("horizon", config.horizon.build)):
        try:
            build()
        except (BdsdeError, TypeError, ValueError):
            offending.append(name)


def parse_config(text=None, paths=(), overrides=()):
    """
    Parse INI text and/or files, apply section.key=value overrides, and
    validate. Every offending key is reported in a single ConfigError.
    """
    parser = _read_parser(text, paths, overrides)
    offending = [f"[{s}]" for s in parser.sections() if s not in SECTIONS]
    sections = {}
    for name, cls in SECTIONS.items():
        items = parser.items(name) if parser.has_section(name) else []
        sections[name] = _build_section(name, cls, items, offending)
    config = ExperimentConfig(**sections)
    if not offending:
        _check_free_keys(config, offending)
    if not offending:
        _check_registries(config, offending)
    if offending:
        raise ConfigError("Invalid configuration", offending)
    return config


def load_config(path=None, overrides=()):
    return parse_config(paths=[path] if path else (), overrides=overrides)


def config_to_text(config):
    """Canonical INI text: sections and keys sorted, unset optional keys omitted."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in sorted(SECTIONS):
        section = getattr(config, name)
        parser.add_section(name)
        entries = {}
        for f in attrs.fields(type(section)):
            value = getattr(section, f.name)
            if f.metadata.get("kind") == "free":
                entries.update({k: _format_value(v) for k, v in value})
            elif value is not None:
                entries[f.name] = _format_value(value)
        for key in sorted(entries):
            parser.set(name, key, entries[key])
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_hash(config):
    return hashlib.sha256(config_to_text(config).encode("utf8")).hexdigest()
