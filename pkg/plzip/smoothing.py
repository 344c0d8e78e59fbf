"""Kernel machinery: Nadaraya-Watson weights and cross-validated bandwidths."""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from loss import LossSpec, rho

logger = logging.getLogger(__name__)

KERNELS = ("gaussian",)
DEFAULT_GRID_SIZE = 20


class DegenerateWindowError(ValueError):
    """Raised when the kernel weights around a point cannot be normalised."""


class BandwidthSelectionError(RuntimeError):
    """Raised when no candidate bandwidth produces a usable fit."""


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family and bandwidth used to localise the objectives in t."""
    h: float
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"Unsupported kernel '{self.kind}', expected one of {KERNELS}")
        if not self.h > 0 or not np.isfinite(self.h):
            raise ValueError(f"Bandwidth must be a positive finite number, got {self.h}")


def _log_kernel(u: np.ndarray) -> np.ndarray:
    return norm.logpdf(u)


def kernel_matrix(taus, t, cfg: KernelConfig) -> np.ndarray:
    """Returns the NW weights for every tau in ``taus`` as rows summing to 1."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        raise DegenerateWindowError("Cannot build kernel weights on an empty sample")
    log_k = _log_kernel((taus[:, None] - t[None, :]) / cfg.h)
    # shifting by the row maximum keeps the Gaussian window from underflowing
    log_k -= log_k.max(axis=1, keepdims=True)
    weights = np.exp(log_k)
    totals = weights.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(totals)) or np.any(totals <= 0):
        bad = taus[~(np.isfinite(totals[:, 0]) & (totals[:, 0] > 0))]
        logger.error("Degenerate kernel window at tau=%s", bad[:5])
        raise DegenerateWindowError(f"Kernel weights cannot be normalised at tau={bad[0]}")
    return weights / totals


def nw_weights(tau: float, t, cfg: KernelConfig) -> np.ndarray:
    """Returns W_i(tau) = K((tau - t_i)/h) / sum_j K((tau - t_j)/h)."""
    return kernel_matrix([tau], t, cfg)[0]


def default_grid(t, size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    """Log-spaced candidate bandwidths between 5% and 50% of the range of t."""
    spread = float(np.ptp(np.asarray(t, dtype=float)))
    if spread <= 0:
        raise BandwidthSelectionError("t has no spread, no bandwidth grid can be built")
    return np.geomspace(0.05 * spread, 0.5 * spread, size)


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffles 0..n-1 with ``seed`` and cuts it into contiguous blocks."""
    if folds < 2 or folds > n:
        raise ValueError(f"Number of folds must be between 2 and n={n}, got {folds}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(block) for block in np.array_split(order, folds)]


def held_out_criterion(train, test, result, spec: LossSpec) -> float:
    """Robust loss of a fitted model on held-out rows.

    Sums (1 - w_i) rho(y_i, x_i'beta + m(t_i)) omega_1(x_i) over the test
    rows, with m re-solved locally at every held-out t_i.
    """
    # pylint: disable=import-outside-toplevel
    from fit import m_hat_at
    from leverage import omega
    from model import posterior_w

    theta = result.theta
    eta = test.X @ theta.beta + m_hat_at(test.t, result, train, spec)
    w = posterior_w(test.y, test.Z @ theta.gamma, eta)
    weights = omega(test.X, result.leverage_x) if result.use_leverage else 1.0
    return float(np.sum((1.0 - w) * np.asarray(rho(test.y, eta, spec)) * weights))


def cv_curve(data, spec: LossSpec, folds: int = 5, grid=None, seed: int = 0,
             cfg=None) -> pd.DataFrame:
    """Evaluates the cross-validation criterion at every candidate bandwidth.

    A bandwidth is marked failed (criterion NaN) when any fold fit fails or
    does not converge.
    """
    # pylint: disable=import-outside-toplevel
    from fit import FitError, LocalFitError, SeparationError, em_fit

    grid = default_grid(data.t) if grid is None else np.sort(np.asarray(grid, dtype=float))
    blocks = fold_indices(data.n, folds, seed)
    rows = []
    for h in grid:
        kernel = KernelConfig(float(h))
        total, failed = 0.0, 0
        for k, test_index in enumerate(blocks):
            train_index = np.setdiff1d(np.arange(data.n), test_index)
            train, test = data.subset(train_index), data.subset(test_index)
            try:
                result = em_fit(train, spec, kernel, cfg)
                if not result.converged:
                    logger.warning("h=%.4g fold %d did not converge", h, k)
                    failed += 1
                    continue
                total += held_out_criterion(train, test, result, spec)
            except (FitError, LocalFitError, SeparationError, DegenerateWindowError) as e:
                logger.warning("h=%.4g fold %d failed: %s", h, k, e)
                failed += 1
        criterion = total if failed == 0 and np.isfinite(total) else np.nan
        logger.info("Bandwidth %.4g: criterion %.6g (%d failed folds)", h, criterion, failed)
        rows.append({"h": float(h), "criterion": criterion, "failed_folds": failed})
    return pd.DataFrame(rows, columns=["h", "criterion", "failed_folds"])


def select_from_curve(curve: pd.DataFrame) -> float:
    """Returns the grid minimiser, ties broken toward the smaller bandwidth."""
    usable = curve.dropna(subset=["criterion"]).sort_values("h", kind="stable")
    if usable.empty:
        logger.error("Every candidate bandwidth failed")
        raise BandwidthSelectionError("No candidate bandwidth produced a converged fit")
    best = usable["criterion"].to_numpy().argmin()
    return float(usable["h"].iloc[best])


def cv_bandwidth(data, spec: LossSpec, folds: int = 5, grid=None, seed: int = 0,
                 cfg=None) -> float:
    """Selects the bandwidth by k-fold cross-validation of the robust loss."""
    if grid is not None and len(grid) == 1:
        return float(grid[0])
    curve = cv_curve(data, spec, folds=folds, grid=grid, seed=seed, cfg=cfg)
    h = select_from_curve(curve)
    logger.info("Selected bandwidth %.4g for %s", h, spec.label)
    return h
