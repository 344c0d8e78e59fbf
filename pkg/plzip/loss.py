"""Robust loss family for the Poisson component of the PLZIP model.

Three families share one interface:

- ``ml``: the Poisson deviance, giving the classical likelihood estimator.
- ``ch``: a bounded transform of the deviance plus the correction G that
  restores Fisher consistency.
- ``mt``: a redescending loss on sqrt(y), centred by f(lambda).

Every public function accepts scalars or numpy arrays and broadcasts.
"""
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import ceil, sqrt

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar
from scipy.special import gammaln, xlogy
from scipy.stats import poisson

logger = logging.getLogger(__name__)

FAMILIES = ("ml", "ch", "mt")
DEFAULT_C = {"ch": 0.5, "mt": 2.9}

TABLE_MIN = 1e-4
TABLE_MAX = 1e4
TABLE_KNOTS = 400
G_KNOTS = 10001
SERIES_BLOCK = 2_000_000
CENTER_SCAN_STEP = 0.05
G_REFERENCE = 1e-3
MAX_LOG_MEAN = 700.0
LAMBDA_CLAMP = 1e10


class LossDomainError(ValueError):
    """Raised when a loss component is evaluated outside its domain."""


@dataclass(frozen=True, eq=False)
class LossSpec:
    """A loss family, its tuning constant and its precomputed tables.

    ``g_table`` holds (s, G(s), G'(s)) on the log-spaced grid and is only
    present for CH; ``f_table`` holds (lambda, f(lambda)) and is only present
    for MT. Build instances with ``build_loss_spec``.
    """
    family: str
    c: float = 0.0
    g_table: tuple | None = None
    f_table: tuple | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LossDomainError(
                f"Unknown loss family '{self.family}', expected one of {FAMILIES}")
        if self.family != "ml" and not self.c > 0:
            raise LossDomainError(
                f"Tuning constant must be positive for {self.family}, got {self.c}")
        if (self.g_table is not None) != (self.family == "ch"):
            raise LossDomainError("g_table must be present exactly for the ch family")
        if (self.f_table is not None) != (self.family == "mt"):
            raise LossDomainError("f_table must be present exactly for the mt family")
        if self.f_table is not None and np.any(np.diff(self.f_table[1]) < 0):
            raise LossDomainError("f_table values must be nondecreasing")

    @property
    def label(self) -> str:
        """Short identifier used in documents and study tables."""
        return self.family if self.family == "ml" else f"{self.family}(c={self.c:g})"

    @cached_property
    def _big_g(self):
        return PchipInterpolator(np.log(self.g_table[0]), self.g_table[1])

    @cached_property
    def tail_slope(self) -> float:
        """s G'(s) at the top of the table; G grows like this times log(s) above it."""
        return float(self.g_table[0][-1] * self.g_table[2][-1])

    @cached_property
    def _center(self):
        return PchipInterpolator(np.log(self.f_table[0]), self.f_table[1])


def _output(values: np.ndarray):
    """Returns a float for 0-d results, the array otherwise."""
    return float(values) if np.ndim(values) == 0 else values


def _tabulated(points, table, fallback) -> np.ndarray:
    """Evaluates ``table`` on log(points) inside the grid, ``fallback`` outside."""
    points = np.asarray(points, dtype=float)
    flat = points.ravel()
    values = np.empty(flat.shape)
    inside = (flat >= TABLE_MIN) & (flat <= TABLE_MAX)
    values[inside] = table(np.log(flat[inside]))
    for idx in np.flatnonzero(~inside):
        values[idx] = fallback(float(flat[idx]))
    return values.reshape(points.shape)


def _log_grid() -> np.ndarray:
    return np.logspace(np.log10(TABLE_MIN), np.log10(TABLE_MAX), TABLE_KNOTS)


def _exp_mean(u):
    return np.exp(np.minimum(u, MAX_LOG_MEAN))


def _poisson_support(lam: float, spread: float = 20.0) -> np.ndarray:
    """Counts carrying all but a negligible tail of Poisson(lam)."""
    width = 10.0 * sqrt(lam) + spread
    low = max(0, int(np.floor(lam - width)))
    return np.arange(low, int(ceil(lam + width)) + 1)


def dev_arg(y, u):
    """Returns s = e^u - y(u + 1 - ln y), with y ln y taken as 0 at y = 0."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    s = _exp_mean(u) - y * (u + 1.0) + xlogy(y, y)
    return _output(np.maximum(s, 0.0))


def _phi_ch(s, c):
    root_c = sqrt(c)
    root_s = np.sqrt(np.maximum(s, c))
    outer = np.exp(-root_c) * (2.0 * (1.0 + root_c) + c) - 2.0 * np.exp(-root_s) * (1.0 + root_s)
    return np.where(s <= c, s * np.exp(-root_c), outer)


def _dphi_ch(s, c):
    return np.exp(-np.sqrt(np.maximum(s, c)))


def _phi_mt(s, c):
    r = np.minimum((np.asarray(s) / c) ** 2, 1.0)
    return 1.0 - (1.0 - r) ** 4


def _dphi_mt(s, c):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) <= c
    r = np.where(inside, (s / c) ** 2, 1.0)
    return np.where(inside, 8.0 * s / c ** 2 * (1.0 - r) ** 3, 0.0)


def _check_ch_domain(s):
    if np.any(np.asarray(s) < 0):
        logger.error("phi_ch evaluated at a negative argument")
        raise LossDomainError("The ch loss is only defined for s >= 0")


def phi(s, spec: LossSpec):
    """Evaluates the outer function of the loss at s."""
    s = np.asarray(s, dtype=float)
    if spec.family == "ml":
        return _output(s)
    if spec.family == "ch":
        _check_ch_domain(s)
        return _output(_phi_ch(s, spec.c))
    return _output(_phi_mt(s, spec.c))


def dphi(s, spec: LossSpec):
    """Evaluates the derivative of ``phi``."""
    s = np.asarray(s, dtype=float)
    if spec.family == "ml":
        return _output(np.ones_like(s))
    if spec.family == "ch":
        _check_ch_domain(s)
        return _output(_dphi_ch(s, spec.c))
    return _output(_dphi_mt(s, spec.c))


# --- CH correction ---------------------------------------------------------

def _g_integrand(s: float, c: float, terms: int | None = None) -> float:
    """G'(s) for the ch family, series truncated after ``terms`` counts."""
    n_terms = terms if terms is not None else int(ceil(s + 10.0 * sqrt(s) + 20.0))
    # lower Poisson tail beyond mean - 10 sd carries less than 1e-20
    first = max(1, int(np.floor(s - 10.0 * sqrt(s) - 20.0)))
    j = np.arange(first, n_terms + 1, dtype=float)
    arg = np.maximum(s - j * (np.log(s) + 1.0 - np.log(j)), 0.0)
    series = np.sum(_dphi_ch(arg, c) * poisson.pmf(j, s) * (j - s) / s)
    return float(-_dphi_ch(s, c) * np.exp(-s) + series)


def _series_bounds(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    spread = 10.0 * np.sqrt(s) + 20.0
    return np.maximum(1.0, np.floor(s - spread)), np.ceil(s + spread)


def _g_series(s, c: float) -> np.ndarray:
    """Vectorised G'(s) with the same truncation as ``_g_integrand``.

    Rows are sorted by mean and summed in blocks of at most SERIES_BLOCK terms.
    """
    s = np.asarray(s, dtype=float)
    flat = s.ravel()
    values = np.empty(flat.shape)
    order = np.argsort(flat)
    first, last = _series_bounds(flat[order])
    widths = (last - first + 1).astype(int)
    start = 0
    while start < order.size:
        rows = np.arange(1, order.size - start + 1)
        too_big = rows * np.maximum.accumulate(widths[start:]) > SERIES_BLOCK
        stop = start + (int(np.argmax(too_big)) if too_big.any() else rows.size)
        stop = max(stop, start + 1)
        block = order[start:stop]
        v = flat[block][:, None]
        j = first[start:stop, None] + np.arange(widths[start:stop].max())[None, :]
        log_v = np.log(v)
        arg = np.maximum(v - j * (log_v + 1.0 - np.log(j)), 0.0)
        pmf = np.exp(j * log_v - v - gammaln(j + 1.0))
        terms = np.where(j <= last[start:stop, None], _dphi_ch(arg, c) * pmf * (j - v) / v, 0.0)
        values[block] = -_dphi_ch(v[:, 0], c) * np.exp(-v[:, 0]) + terms.sum(axis=1)
        start = stop
    return values.reshape(s.shape)


def _check_positive(s):
    if np.any(np.asarray(s) <= 0):
        logger.error("Correction term evaluated at a non-positive mean")
        raise LossDomainError("The correction term is only defined for s > 0")


def correction_g(s, spec: LossSpec, terms: int | None = None):
    """Returns the integrand G'(s) of the Fisher-consistency correction.

    Computed directly from the truncated series; ``terms`` overrides the
    default truncation point ceil(s + 10 sqrt(s) + 20).
    """
    if spec.family != "ch":
        raise LossDomainError("The correction term only exists for the ch family")
    s = np.asarray(s, dtype=float)
    _check_positive(s)
    if terms is None:
        return _output(_g_series(s, spec.c))
    values = np.vectorize(lambda v: _g_integrand(v, spec.c, terms), otypes=[float])(s)
    return _output(values)


def _integrate_g(low: float, high: float, c: float, tol: float) -> float:
    value, _ = quad(_g_integrand, low, high, args=(c,), epsabs=tol, epsrel=tol, limit=400)
    return value


def correction_G(s, spec: LossSpec, tol: float | None = None):  # pylint: disable=invalid-name
    """Returns G(s) = integral of G' from G_REFERENCE to s.

    Inside the table range the cached interpolant is used. Above it G grows
    like its tail slope times log(s); below it, or with ``tol`` set, G is
    re-integrated on demand.
    """
    if spec.family != "ch":
        raise LossDomainError("The correction term only exists for the ch family")
    s = np.asarray(s, dtype=float)
    _check_positive(s)
    if tol is not None:
        values = np.vectorize(
            lambda v: _integrate_g(G_REFERENCE, v, spec.c, tol), otypes=[float])(s)
        return _output(values)
    top = spec.g_table[1][-1]
    values = _tabulated(
        s, spec._big_g,  # pylint: disable=protected-access
        lambda v: _integrate_g(G_REFERENCE, v, spec.c, 1e-10) if v < TABLE_MIN
        else top + spec.tail_slope * np.log(v / TABLE_MAX))
    return _output(values)


def _correction_g_exact(lam: np.ndarray, spec: LossSpec) -> np.ndarray:
    """G' for Psi: the series up to TABLE_MAX, the tail slope over lambda above it."""
    unique, inverse = np.unique(lam, return_inverse=True)
    values = spec.tail_slope / unique
    inside = unique <= TABLE_MAX
    values[inside] = _g_series(unique[inside], spec.c)
    return values[inverse].reshape(lam.shape)


@lru_cache(maxsize=8)
def _g_table(c: float) -> tuple:
    logger.info("Building correction table for ch(c=%g)", c)
    knots = np.logspace(np.log10(TABLE_MIN), np.log10(TABLE_MAX), G_KNOTS)
    derivative = _g_series(knots, c)
    log_knots = np.log(knots)
    # dG = G'(s) s d(log s); the integrand has kinks, so the grid stays dense
    cumulative = cumulative_trapezoid(derivative * knots, log_knots, initial=0.0)
    offset = float(PchipInterpolator(log_knots, cumulative)(np.log(G_REFERENCE)))
    logger.debug("Correction table built with %d knots", G_KNOTS)
    return knots, cumulative - offset, derivative


# --- MT centring -----------------------------------------------------------

def _mt_center_direct(lam: float, c: float) -> float:
    """argmin_u E_lam phi_mt(sqrt(y) - u) by grid scan and bounded Brent."""
    if lam <= 0:
        return 0.0
    counts = _poisson_support(lam)
    weights = poisson.pmf(counts, lam)
    roots = np.sqrt(counts)

    def expected(u):
        return float(np.sum(weights * _phi_mt(roots - u, c)))

    if lam > TABLE_MAX:
        # far above the table the expected loss is unimodal around sqrt(lam)
        result = minimize_scalar(expected, bounds=(sqrt(lam) - 1.0, sqrt(lam) + 1.0),
                                 method="bounded", options={"xatol": 1e-12})
        return float(result.x)
    grid = np.arange(max(0.0, sqrt(lam) - 3.0), sqrt(lam) + 3.0, CENTER_SCAN_STEP)
    values = (weights[:, None] * _phi_mt(roots[:, None] - grid[None, :], c)).sum(axis=0)
    best = int(np.argmin(values))
    low, high = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    result = minimize_scalar(expected, bounds=(low, high), method="bounded",
                             options={"xatol": 1e-12})
    return float(result.x)


@lru_cache(maxsize=4096)
def _mt_center_cached(lam: float, c: float) -> float:
    return _mt_center_direct(lam, c)


@lru_cache(maxsize=8)
def _f_table(c: float) -> tuple:
    logger.info("Building centring table for mt(c=%g)", c)
    knots = _log_grid()
    values = np.array([_mt_center_direct(v, c) for v in knots])
    monotone = np.maximum.accumulate(values)
    if np.any(monotone > values):
        logger.warning("Centring table adjusted at %d knots to stay nondecreasing",
                       int(np.sum(monotone > values)))
    return knots, monotone


def mt_center(lam, spec: LossSpec):
    """Returns f(lambda), the Poisson(lambda) centre of the mt loss."""
    if spec.family != "mt":
        raise LossDomainError("The centring function only exists for the mt family")
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise LossDomainError("The centring function needs lambda >= 0")
    values = _tabulated(
        lam, spec._center,  # pylint: disable=protected-access
        lambda v: _mt_center_cached(v, spec.c))
    return _output(values)


def mt_center_derivative(lam, spec: LossSpec):
    """f'(lambda) by a centred difference spanning one table cell each way."""
    lam = np.asarray(lam, dtype=float)
    step = np.log(TABLE_MAX / TABLE_MIN) / (TABLE_KNOTS - 1)
    upper, lower = lam * np.exp(step), lam * np.exp(-step)
    slope = (np.asarray(mt_center(upper, spec)) - np.asarray(mt_center(lower, spec))) \
        / np.where(upper > lower, upper - lower, 1.0)
    return _output(np.where(lam > 0, slope, 0.0))


# --- construction ----------------------------------------------------------

def build_loss_spec(family: str, c: float | None = None) -> LossSpec:
    """Builds a LossSpec with its tables; tables are cached per (family, c)."""
    family = family.lower()
    if family not in FAMILIES:
        raise LossDomainError(
            f"Unknown loss family '{family}', expected one of {FAMILIES}")
    if family == "ml":
        return LossSpec("ml")
    c = float(DEFAULT_C[family] if c is None else c)
    if not c > 0:
        raise LossDomainError(f"Tuning constant must be positive, got {c}")
    if family == "ch":
        return LossSpec("ch", c, g_table=_g_table(c))
    return LossSpec("mt", c, f_table=_f_table(c))


# --- rho and psi -----------------------------------------------------------

def _robust_mean(u) -> np.ndarray:
    """e^u clamped to LAMBDA_CLAMP for the tabulated pieces of ch and mt."""
    return np.minimum(_exp_mean(u), LAMBDA_CLAMP)


def rho(y, u, spec: LossSpec):
    """Returns the loss rho(y, u) of count y at log-mean u."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if spec.family == "ml":
        return dev_arg(y, u)
    lam = _robust_mean(u)
    if spec.family == "ch":
        s = np.asarray(dev_arg(y, u))
        return _output(_phi_ch(s, spec.c) + np.asarray(correction_G(lam, spec)))
    return _output(_phi_mt(np.sqrt(y) - np.asarray(mt_center(lam, spec)), spec.c))


def psi(y, u, spec: LossSpec):
    """Returns Psi(y, u), the derivative of rho with respect to u."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if spec.family == "ml":
        return _output(_exp_mean(u) - y)
    if spec.family == "ch":
        s = np.asarray(dev_arg(y, u))
        lam = np.broadcast_to(_exp_mean(u), s.shape)
        clamped = np.minimum(lam, LAMBDA_CLAMP)
        return _output(_dphi_ch(s, spec.c) * (lam - y)
                       + _correction_g_exact(clamped, spec) * clamped)
    lam = _robust_mean(u)
    center = np.asarray(mt_center(lam, spec))
    slope = np.asarray(mt_center_derivative(lam, spec))
    return _output(-_dphi_mt(np.sqrt(y) - center, spec.c) * slope * lam)


def _poisson_expectation(values_of, u: float, spread: float = 30.0) -> float:
    lam = float(_exp_mean(u))
    counts = np.arange(0, int(ceil(lam + 10.0 * sqrt(lam) + spread)) + 1)
    return float(np.sum(values_of(counts) * poisson.pmf(counts, lam)))


def fisher_consistency_check(u: float, spec: LossSpec) -> float:
    """Returns E Psi(y, u) under y ~ Poisson(e^u); zero for a consistent loss."""
    return _poisson_expectation(lambda counts: psi(counts, u, spec), u)


def expected_loss(u: float, spec: LossSpec) -> float:
    """Returns E rho(y, u) under y ~ Poisson(e^u)."""
    return _poisson_expectation(lambda counts: rho(counts, u, spec), u)
