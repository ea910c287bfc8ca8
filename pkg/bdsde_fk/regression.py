"""
Least-squares regression on a fixed basis of the state, with analytic
gradients and pointwise standard errors.
"""

import itertools
import logging

import attrs
import numpy as np
import scipy.linalg

from .errors import BasisDegeneracyError, InvalidArgumentError

logger = logging.getLogger("bdsde_fk")

BASIS_KINDS = ("polynomial", "piecewise_linear")
DEGENERATE_SPREAD = 1e-12


@attrs.frozen
class BasisConfig:
    kind: str = attrs.field(default="polynomial", validator=attrs.validators.in_(BASIS_KINDS))
    degree: int = attrs.field(default=4)
    n_bins: int = attrs.field(default=32)

    @degree.validator
    def _check_degree(self, attribute, value):
        if value < 1:
            raise InvalidArgumentError(f"Polynomial degree must be >= 1, got {value}")

    @n_bins.validator
    def _check_bins(self, attribute, value):
        if value < 1:
            raise InvalidArgumentError(f"Need at least one bin, got {value}")


def _exponents(dim, degree):
    combos = [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    return np.array(sorted(combos, key=lambda e: (sum(e), tuple(-v for v in e))), dtype=int)


@attrs.define(frozen=True, slots=False, eq=False)
class RegressionTable:
    """Fitted coefficients of one regression plus what is needed to evaluate it anywhere."""
    kind: str
    center: np.ndarray
    spread: np.ndarray
    active: np.ndarray              # dimensions with nonzero spread
    exponents: np.ndarray           # polynomial multi-indices over active dims
    knots: np.ndarray               # interior knots (piecewise linear, standardized)
    coefficients: np.ndarray        # (n_features, n_targets)
    gram_inverse: np.ndarray
    residual_variance: np.ndarray   # (n_targets,)
    rank: int
    step: int = -1

    @property
    def n_features(self):
        return self.coefficients.shape[0]

    def _standardize(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, len(self.center))
        return (x[:, self.active] - self.center[self.active]) / self.spread[self.active]

    def features(self, x):
        u = self._standardize(x)
        if self.kind == "constant":
            return np.ones((len(u), 1))
        if self.kind == "polynomial":
            return np.prod(u[:, None, :] ** self.exponents[None, :, :], axis=2)
        v = u[:, 0]
        return np.column_stack([np.ones_like(v), v] + [np.maximum(v - k, 0.0) for k in self.knots])

    def feature_gradients(self, x):
        """∂ features / ∂ x, shape (n, n_features, d)."""
        x = np.asarray(x, dtype=float).reshape(-1, len(self.center))
        out = np.zeros((len(x), self.n_features, len(self.center)))
        if self.kind == "constant":
            return out
        u = self._standardize(x)
        for a, dim in enumerate(np.flatnonzero(self.active)):
            if self.kind == "polynomial":
                e = self.exponents[:, a]
                lowered = self.exponents.copy()
                lowered[:, a] = np.maximum(e - 1, 0)
                grad = e[None, :] * np.prod(u[:, None, :] ** lowered[None, :, :], axis=2)
            else:
                v = u[:, 0]
                grad = np.column_stack([np.zeros_like(v), np.ones_like(v)] + [(v > k).astype(float) for k in self.knots])
            out[:, :, dim] = grad / self.spread[dim]
        return out

    def evaluate(self, x):
        """Fitted values, shape (n,) for a single target or (n, n_targets)."""
        values = self.features(x) @ self.coefficients
        return values[:, 0] if values.shape[1] == 1 else values

    def gradient(self, x):
        """∇_x of the fitted surface, shape (n, d) for a single target or (n, d, n_targets)."""
        grad = np.einsum("nfd,ft->ndt", self.feature_gradients(x), self.coefficients)
        return grad[:, :, 0] if grad.shape[2] == 1 else grad

    def standard_error(self, x):
        """Pointwise standard error of the fitted mean, shape (n,) or (n, n_targets)."""
        phi = self.features(x)
        leverage = np.einsum("nf,fg,ng->n", phi, self.gram_inverse, phi)
        se = np.sqrt(np.clip(leverage, 0, None)[:, None] * self.residual_variance[None, :])
        return se[:, 0] if se.shape[1] == 1 else se

    def to_arrays(self, prefix):
        return [(f"{prefix}_coefficients", self.coefficients), (f"{prefix}_center", self.center),
                (f"{prefix}_spread", self.spread)]


def fit(basis, x, targets, step=-1):
    """
    Regress targets (M,) or (M, T) on basis features of x (M, d).

    If every sample sits at the same point the fit is the sample mean. Any
    other rank deficiency of the design raises BasisDegeneracyError.
    """
    x = np.asarray(x, dtype=float)
    x = x.reshape(len(x), -1)
    y = np.asarray(targets, dtype=float)
    y = y.reshape(len(y), -1)
    if len(x) != len(y):
        raise InvalidArgumentError(f"{len(x)} samples but {len(y)} targets")
    center = x.mean(axis=0)
    spread = x.std(axis=0)
    active = spread > DEGENERATE_SPREAD * (1 + np.abs(center))
    spread = np.where(active, spread, 1.0)
    exponents = np.zeros((1, 0), dtype=int)
    knots = np.zeros(0)
    if not np.any(active):
        kind = "constant"
        logger.debug(f"Step {step}: all samples coincide, regression falls back to the sample mean")
    elif basis.kind == "polynomial":
        kind = "polynomial"
        exponents = _exponents(int(active.sum()), basis.degree)
    else:
        if x.shape[1] != 1:
            raise InvalidArgumentError("The piecewise-linear basis is one-dimensional")
        kind = "piecewise_linear"
        u = (x[:, 0] - center[0]) / spread[0]
        edges = np.quantile(u, np.linspace(0, 1, basis.n_bins + 1))
        knots = np.unique(edges[1:-1])
    table = RegressionTable(kind, center, spread, active, exponents, knots, np.zeros((0, y.shape[1])),
                            np.zeros((0, 0)), np.zeros(y.shape[1]), 0, step)
    design = table.features(x)
    coefficients, _, rank, singular = scipy.linalg.lstsq(design, y, lapack_driver="gelsd", cond=1e-12)
    if rank < design.shape[1]:
        raise BasisDegeneracyError(f"Regression design has rank {rank} < {design.shape[1]} features", step=step)
    residual = y - design @ coefficients
    dof = max(len(y) - design.shape[1], 1)
    gram_inverse = scipy.linalg.pinvh(design.T @ design)
    return attrs.evolve(table, coefficients=coefficients, gram_inverse=gram_inverse,
                        residual_variance=(residual ** 2).sum(axis=0) / dof, rank=int(rank))
