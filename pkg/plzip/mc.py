"""Monte Carlo harness: contamination schemes, metrics and the replication study."""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import median_abs_deviation, trim_mean

from fit import FitConfig, FitError, LocalFitError, SeparationError, em_fit, fit_parametric_zip
from loss import build_loss_spec
from model import Dataset, predict_mean
from smoothing import (BandwidthSelectionError, DegenerateWindowError, KernelConfig,
                       cv_bandwidth, fold_indices)

logger = logging.getLogger(__name__)

SCHEMES = ("c0", "c1", "c2", "c3")
# (response, covariate) contamination in percent of n
CONTAMINATION = {"c0": (0, 0), "c1": (10, 0), "c2": (0, 10), "c3": (5, 5)}
PARAMETRIC_LOSS = "zip-ml"
POLICIES = ("fixed-cv", "per-rep")
CV_PILOT_REPS = 10
TRIM_PROPORTION = 0.2
METRICS = ("beta_error", "gamma_error", "rmse_m", "iterations", "score_norm")
FIT_ERRORS = (FitError, LocalFitError, SeparationError, DegenerateWindowError,
              BandwidthSelectionError)


@dataclass
class SchemeConfig:  # pylint: disable=too-many-instance-attributes
    """One simulated sample: scheme, size and the random stream it is drawn from."""
    scheme: str = "c0"
    n: int = 500
    seed: int = 0
    stream: int = 0
    beta0: tuple = (2.0, 2.0)
    gamma0: tuple = (-1.0, 1.0)
    y0: int = 70
    intercept: bool = False

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"Unknown scheme '{self.scheme}', expected one of {SCHEMES}")
        if self.n < 10:
            raise ValueError(f"Simulated samples need n >= 10, got {self.n}")
        if len(self.beta0) != 2 or len(self.gamma0) != 2:
            raise ValueError("beta0 and gamma0 must each hold two coefficients")

    @property
    def gamma_truth(self) -> np.ndarray:
        """True gamma against the columns of Z (zero on an added intercept)."""
        gamma = np.asarray(self.gamma0, dtype=float)
        return np.concatenate([[0.0], gamma]) if self.intercept else gamma


@dataclass(eq=False)
class SchemeTruth:
    """Latent quantities and contamination sets behind a simulated sample."""
    w: np.ndarray
    m: np.ndarray
    response_index: np.ndarray
    covariate_index: np.ndarray

    @property
    def contaminated(self) -> np.ndarray:
        """Boolean mask of every contaminated row."""
        mask = np.zeros(self.w.size, dtype=bool)
        mask[self.response_index] = True
        mask[self.covariate_index] = True
        return mask


@dataclass
class StudyRow:  # pylint: disable=too-many-instance-attributes
    """Metrics of one fit in the study."""
    scheme: str
    loss: str
    replication: int
    beta_error: float = float("nan")
    gamma_error: float = float("nan")
    rmse_m: float = float("nan")
    converged: bool = False
    iterations: int = 0
    score_norm: float = float("inf")
    bandwidth: float = float("nan")
    bandwidth_policy: str = "fixed-cv"
    wall_time: float = 0.0


@dataclass
class _Replication:  # pylint: disable=too-many-instance-attributes
    scheme: SchemeConfig
    loss: str
    bandwidth: float | None
    policy: str
    fit_cfg: FitConfig = field(default_factory=FitConfig)
    cv_folds: int = 5
    cv_grid: tuple | None = None


def true_m(t) -> np.ndarray:
    """m0(t) = sin(pi t / 2)."""
    return np.sin(np.pi * np.asarray(t, dtype=float) / 2.0)


def scheme_rng(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator; replication r draws from stream r."""
    return np.random.Generator(np.random.Philox(key=seed).jumped(stream))


def gen_scheme(cfg: SchemeConfig) -> tuple[Dataset, SchemeTruth]:
    """Draws a clean ZIP sample and applies the scheme's contamination."""
    rng = scheme_rng(cfg.seed, cfg.stream)
    n = cfg.n
    x1 = (np.arange(n) < n // 2).astype(float)
    x2 = rng.uniform(0.0, 1.0, n)
    t = rng.uniform(-2.0, 2.0, n)
    z1 = rng.uniform(0.0, 1.0, n)
    z2 = rng.normal(0.0, 1.0, n)
    X = np.column_stack([x1, x2])
    Z = np.column_stack([z1, z2])
    m = true_m(t)

    w = (rng.uniform(size=n) < expit(Z @ np.asarray(cfg.gamma0, dtype=float))).astype(int)
    counts = rng.poisson(np.exp(X @ np.asarray(cfg.beta0, dtype=float) + m))
    y = np.where(w == 1, 0, counts)

    response_pct, covariate_pct = CONTAMINATION[cfg.scheme]
    n_response, n_covariate = n * response_pct // 100, n * covariate_pct // 100
    order = rng.permutation(n)
    response_index = np.sort(order[:n_response])
    covariate_index = np.sort(order[n_response:n_response + n_covariate])
    y[response_index] += cfg.y0
    X[covariate_index, 1] = rng.uniform(1.0, 2.0, covariate_index.size)
    y[covariate_index] = 0

    if cfg.intercept:
        Z = np.column_stack([np.ones(n), Z])
    logger.debug("Generated %s sample n=%d stream=%d", cfg.scheme, n, cfg.stream)
    return Dataset(y, X, Z, t), SchemeTruth(w, m, response_index, covariate_index)


def rmse_m(m_hat, m0) -> float:
    """Root mean square difference between fitted and true m values."""
    m_hat, m0 = np.asarray(m_hat, dtype=float), np.asarray(m0, dtype=float)
    if m_hat.shape != m0.shape:
        raise ValueError(f"Length mismatch: {m_hat.shape} vs {m0.shape}")
    return float(np.sqrt(np.mean((m_hat - m0) ** 2)))


def _fit(data: Dataset, loss: str, h: float | None, cfg: FitConfig):
    if loss == PARAMETRIC_LOSS:
        return fit_parametric_zip(data, build_loss_spec("ml"), cfg)
    return em_fit(data, build_loss_spec(loss), KernelConfig(h), cfg)


def _run_replication(task: _Replication) -> StudyRow:
    """Generates, fits and scores one replication; failures become a row."""
    start = time.perf_counter()
    scheme = task.scheme
    row = StudyRow(scheme.scheme, task.loss, scheme.stream, bandwidth_policy=task.policy)
    data, truth = gen_scheme(scheme)
    try:
        h = task.bandwidth
        if h is not None and not np.isfinite(h):
            raise BandwidthSelectionError("No bandwidth was selected for this cell")
        if h is None and task.loss != PARAMETRIC_LOSS:
            h = cv_bandwidth(data, build_loss_spec(task.loss), folds=task.cv_folds,
                             grid=task.cv_grid, seed=scheme.seed, cfg=task.fit_cfg)
        result = _fit(data, task.loss, h, task.fit_cfg)
        theta = result.theta
        row.bandwidth = float("nan") if h is None else float(h)
        row.beta_error = float(np.linalg.norm(theta.beta - np.asarray(scheme.beta0)))
        row.gamma_error = float(np.linalg.norm(theta.gamma - scheme.gamma_truth))
        row.rmse_m = rmse_m(theta.m_at(data.t), truth.m)
        row.converged = bool(result.converged)
        row.iterations = int(result.iterations)
        row.score_norm = float(result.score_norm)
    except FIT_ERRORS as e:
        logger.warning("Replication %d of %s/%s failed: %s",
                       scheme.stream, scheme.scheme, task.loss, e)
    row.wall_time = time.perf_counter() - start
    return row


def select_study_bandwidth(scheme: str, loss: str, n: int, seed: int, policy="fixed-cv",
                           reps: int = CV_PILOT_REPS, folds: int = 5, grid=None,
                           cfg: FitConfig | None = None, intercept: bool = False) -> float | None:
    """Resolves the bandwidth policy for one (scheme, loss) cell.

    A number is used as is; ``fixed-cv`` averages the CV choice over the first
    ten replications; ``per-rep`` returns None so each replication runs CV.
    """
    if loss == PARAMETRIC_LOSS or policy == "per-rep":
        return None
    if policy != "fixed-cv":
        h = float(policy)
        KernelConfig(h)
        return h
    spec = build_loss_spec(loss)
    chosen = []
    for r in range(min(CV_PILOT_REPS, reps)):
        data, _ = gen_scheme(SchemeConfig(scheme, n, seed, r, intercept=intercept))
        try:
            chosen.append(cv_bandwidth(data, spec, folds=folds, grid=grid, seed=seed, cfg=cfg))
        except BandwidthSelectionError as e:
            logger.warning("Pilot replication %d of %s/%s has no bandwidth: %s",
                           r, scheme, loss, e)
    if not chosen:
        logger.error("No pilot replication selected a bandwidth for %s/%s", scheme, loss)
        raise BandwidthSelectionError(f"No pilot bandwidth for {scheme}/{loss}")
    h = float(np.mean(chosen))
    logger.info("Frozen bandwidth %.4g for %s/%s from %d pilots", h, scheme, loss, len(chosen))
    return h


def run_study(schemes, losses, reps: int, n: int = 500, seed: int = 0, bandwidth="fixed-cv",
              threads: int | None = None, cfg: FitConfig | None = None, cv_folds: int = 5,
              cv_grid=None, intercept: bool = False) -> pd.DataFrame:
    """Runs every (scheme, loss, replication) and returns one row per fit.

    Rows come back in (scheme, loss, replication) order whatever the
    completion order of the workers.
    """
    if reps < 1:
        raise ValueError(f"reps must be at least 1, got {reps}")
    cfg = cfg or FitConfig(seed=seed)
    policy = str(bandwidth)
    grid = None if cv_grid is None else tuple(float(h) for h in cv_grid)
    tasks = []
    for scheme in schemes:
        for loss in losses:
            try:
                h = select_study_bandwidth(scheme, loss, n, seed, policy, reps, cv_folds, grid,
                                           cfg, intercept)
            except BandwidthSelectionError:
                logger.warning("Skipping bandwidth for %s/%s, its replications will fail",
                               scheme, loss)
                h = float("nan")
            for r in range(reps):
                tasks.append(_Replication(SchemeConfig(scheme, n, seed, r, intercept=intercept),
                                          loss, h, policy, cfg, cv_folds, grid))
    logger.info("Running %d fits on %s worker(s)", len(tasks), threads or 1)
    if threads is None or threads <= 1:
        rows = [_run_replication(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(_run_replication, tasks))
    return pd.DataFrame([asdict(row) for row in rows], columns=list(StudyRow.__annotations__))


def mad(values) -> float:
    """Median absolute deviation, ignoring NaN."""
    return float(median_abs_deviation(values, nan_policy="omit"))


def summarize_study(rows: pd.DataFrame) -> pd.DataFrame:
    """Median and MAD of every metric per (scheme, loss) cell."""
    grouped = rows.groupby(["scheme", "loss"], sort=False)
    summary = grouped[list(METRICS)].agg(["median", mad])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary["converged"] = grouped["converged"].sum().astype(int)
    summary["replications"] = grouped.size()
    return summary.reset_index()


def prediction_error_study(data: Dataset, losses, folds: int = 5, seed: int = 0,
                           h: float | None = None, cfg: FitConfig | None = None,
                           cv_folds: int = 5) -> pd.DataFrame:
    """Trimmed squared prediction error of the ZIP mean by k-fold CV.

    Each fold reports the 20% symmetric trimmed mean of (y - yhat)^2 over
    its held-out rows. Without ``h`` the bandwidth is chosen by CV on the
    training part of the fold.
    """
    cfg = cfg or FitConfig(seed=seed)
    rows = []
    for loss in losses:
        spec = build_loss_spec("ml" if loss == PARAMETRIC_LOSS else loss)
        for k, test_index in enumerate(fold_indices(data.n, folds, seed)):
            train = data.subset(np.setdiff1d(np.arange(data.n), test_index))
            test = data.subset(test_index)
            row = {"loss": loss, "fold": k, "trimmed_mse": float("nan"),
                   "converged": False, "bandwidth": float("nan")}
            try:
                bandwidth = h
                if bandwidth is None and loss != PARAMETRIC_LOSS:
                    bandwidth = cv_bandwidth(train, spec, folds=cv_folds, seed=seed, cfg=cfg)
                result = _fit(train, loss, bandwidth, cfg)
                predicted = predict_mean(test.X, test.Z, test.t, result, train, spec)
                row["trimmed_mse"] = float(trim_mean((test.y - predicted) ** 2, TRIM_PROPORTION))
                row["converged"] = bool(result.converged)
                row["bandwidth"] = float("nan") if bandwidth is None else float(bandwidth)
            except FIT_ERRORS as e:
                logger.warning("Fold %d for %s failed: %s", k, loss, e)
            logger.info("%s fold %d: trimmed MSE %.6g", loss, k, row["trimmed_mse"])
            rows.append(row)
    return pd.DataFrame(rows, columns=["loss", "fold", "trimmed_mse", "converged", "bandwidth"])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    study = run_study(["c0", "c1"], ["ml", "mt"], reps=2, n=200, bandwidth=0.3)
    print(summarize_study(study).to_string(index=False))
