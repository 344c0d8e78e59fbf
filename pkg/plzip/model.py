"""PLZIP data model: observations, parameters, likelihoods and prediction.

The model mixes a point mass at zero, with logit-linear probability
pi = logistic(z'gamma), and a Poisson count with log-mean x'beta + m(t).
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, gammaln

from leverage import LeverageWeights

logger = logging.getLogger(__name__)

MAX_LOG_MEAN = 700.0


class DataError(ValueError):
    """Raised when observations violate the data contract."""


def _as_matrix(values, n: int, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=float)
    if matrix.ndim == 1:
        matrix = matrix.reshape(n, -1) if matrix.size else np.zeros((n, 0))
    if matrix.ndim != 2 or matrix.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {matrix.shape}")
    return matrix


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed sample {(y_i, x_i, z_i, t_i)}.

    X holds the Poisson-part covariates without an intercept (the level is
    carried by m); Z holds the logistic-part covariates.
    """
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.size
        if n < 1:
            raise DataError("A dataset needs at least one observation")
        t = np.asarray(self.t, dtype=float).ravel()
        if t.size != n:
            raise DataError(f"t must have {n} entries, got {t.size}")
        X = _as_matrix(self.X, n, "X")
        Z = _as_matrix(self.Z, n, "Z")
        for name, values in (("y", y), ("X", X), ("Z", Z), ("t", t)):
            if not np.all(np.isfinite(values)):
                raise DataError(f"{name} contains non-finite entries")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise DataError("y must hold nonnegative integer counts")
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "t", t)

    @property
    def n(self) -> int:
        """Number of observations."""
        return self.y.size

    @property
    def p(self) -> int:
        """Number of Poisson-part covariates."""
        return self.X.shape[1]

    @property
    def q(self) -> int:
        """Number of logistic-part covariates."""
        return self.Z.shape[1]

    def subset(self, index) -> "Dataset":
        """Returns the observations selected by ``index``."""
        return Dataset(self.y[index], self.X[index], self.Z[index], self.t[index])

    @classmethod
    def from_frame(cls, df: pd.DataFrame, y: str, x: list, z: list, t: str,
                   z_intercept: bool = False) -> "Dataset":
        """Builds a dataset from named DataFrame columns."""
        Z = df[list(z)].to_numpy(dtype=float)
        if z_intercept:
            Z = np.column_stack([np.ones(len(df)), Z])
        return cls(df[y].to_numpy(dtype=float), df[list(x)].to_numpy(dtype=float).reshape(len(df), -1),
                   Z, df[t].to_numpy(dtype=float))


@dataclass(eq=False)
class ThetaEstimate:
    """Fitted (beta, gamma, m); m is held on the sorted distinct training t.

    ``m_linear`` = (slope, intercept) marks a parametric fit where m is
    linear in t.
    """
    beta: np.ndarray
    gamma: np.ndarray
    t_grid: np.ndarray
    m_grid: np.ndarray
    h: float = float("nan")
    loss: str = "ml"
    m_linear: tuple | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        self.t_grid = np.asarray(self.t_grid, dtype=float).ravel()
        self.m_grid = np.asarray(self.m_grid, dtype=float).ravel()
        if self.t_grid.size != self.m_grid.size:
            raise DataError("t_grid and m_grid must align")
        for name in ("beta", "gamma", "m_grid"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite entries")

    def m_at(self, t) -> np.ndarray:
        """Stored m at t: exact on the training grid, linear in between."""
        if self.m_linear is not None:
            slope, intercept = self.m_linear
            return slope * np.asarray(t, dtype=float) + intercept
        return np.interp(t, self.t_grid, self.m_grid)

    @property
    def m_values(self) -> list[tuple[float, float]]:
        """(t, m(t)) pairs on the training grid."""
        return list(zip(self.t_grid.tolist(), self.m_grid.tolist()))


@dataclass(eq=False)
class FitResult:  # pylint: disable=too-many-instance-attributes
    """Outcome of an EM fit.

    ``weights`` are the E-step weights used in the final M-step and
    ``m_tilde`` the step-1 values of m on the grid; both are needed to
    re-solve m at new points.
    """
    theta: ThetaEstimate
    iterations: int
    converged: bool
    score_norm: float
    objective_trace: list = field(default_factory=list)
    weights: np.ndarray | None = None
    m_tilde: np.ndarray | None = None
    leverage_x: LeverageWeights | None = None
    use_leverage: bool = False
    separated: bool = False


def logistic(v):
    """Numerically safe logistic function."""
    return expit(v)


def _log_mean(eta):
    return np.exp(np.minimum(eta, MAX_LOG_MEAN))


def posterior_w(y, z_gamma, eta):
    """E(w | y): 0 for positive counts, 1/(1 + exp(-z'gamma - e^eta)) for zeros."""
    y = np.asarray(y)
    w = expit(np.asarray(z_gamma, dtype=float) + _log_mean(np.asarray(eta, dtype=float)))
    w = np.where(y > 0, 0.0, w)
    return float(w) if w.ndim == 0 else w


def linear_predictors(data: Dataset, theta: ThetaEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Returns (z'gamma, x'beta + m(t)) for every observation."""
    return data.Z @ theta.gamma, data.X @ theta.beta + theta.m_at(data.t)


def loglik(data: Dataset, theta: ThetaEstimate) -> float:
    """Observed-data PLZIP log-likelihood."""
    z_gamma, eta = linear_predictors(data, theta)
    lam = _log_mean(eta)
    log_norm = np.logaddexp(0.0, z_gamma)
    zero = np.logaddexp(z_gamma, -lam) - log_norm
    positive = -log_norm + data.y * eta - lam - gammaln(data.y + 1.0)
    return float(np.sum(np.where(data.y == 0, zero, positive)))


def complete_loglik_parts(data: Dataset, w, theta: ThetaEstimate) -> tuple[float, float]:
    """Returns the (Poisson, logistic) parts of the complete-data log-likelihood."""
    w = np.asarray(w, dtype=float)
    z_gamma, eta = linear_predictors(data, theta)
    poisson_part = np.sum((1.0 - w) * (data.y * eta - _log_mean(eta) - gammaln(data.y + 1.0)))
    logistic_part = np.sum(w * z_gamma - np.logaddexp(0.0, z_gamma))
    return float(poisson_part), float(logistic_part)


def complete_loglik(data: Dataset, w, theta: ThetaEstimate) -> float:
    """Complete-data log-likelihood with the latent indicators replaced by w."""
    poisson_part, logistic_part = complete_loglik_parts(data, w, theta)
    return poisson_part + logistic_part


def observed_zero_fraction(data: Dataset) -> float:
    """Share of zero responses."""
    return float(np.mean(data.y == 0))


def predict_components(x, z, t, fitted: FitResult, data: Dataset,
                       spec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (m, pi, lambda) at new covariate rows.

    m at each new t is re-solved locally on the training ``data`` with the
    final beta and E-step weights of ``fitted``.
    """
    from fit import m_hat_at  # pylint: disable=import-outside-toplevel

    theta = fitted.theta
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if theta.beta.size == 0:
        x = np.zeros((t.size, 0))
    m = np.asarray(m_hat_at(t, fitted, data, spec))
    return m, expit(z @ theta.gamma), _log_mean(x @ theta.beta + m)


def predict_mean(x, z, t, fitted: FitResult, data: Dataset, spec) -> np.ndarray:
    """Predicted ZIP mean (1 - pi) * lambda at new covariate rows."""
    _, pi, lam = predict_components(x, z, t, fitted, data, spec)
    return (1.0 - pi) * lam
