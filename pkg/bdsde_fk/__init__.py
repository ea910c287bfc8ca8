from .noise_field import make_kernel, sample_for_bundle, sample_increments, validate_kernel, FieldRealization
from .forward_sde import make_coefficients, simulate, PathBundle
from .kunita_calculus import backward_integral, quadratic_variation, ito_residual
from .drivers import make_driver, make_terminal, validate_driver
from .bdsde_solver import solve, picard_monitor, variational_z, SchemeConfig
from .oracles import explicit_linear_fk, deterministic_fk, gamma_functional
from .spde_fd import solve_spde, cross_validate
from .horizon import solve_horizon, verify_periodicity, stationary_solution
from .config import load_config, parse_config

from .harness import run
from .harness import cli
from .harness import __version__
