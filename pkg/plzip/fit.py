"""EM-like estimation engine for the robust PLZIP model.

Each EM cycle replaces the latent structural-zero indicators by their
conditional expectation (E step) and then runs the three-step M step:

1. for every tau on the grid of distinct training t, minimise the
   kernel-localised loss jointly over (beta, eta);
2. minimise the global loss over beta with m fixed at the step-1 values,
   and the weighted logistic objective over gamma;
3. for every tau, re-minimise the localised loss over eta with beta fixed.

The ml family is convex and solved by Newton steps. The ch and mt families
are not, so they go through a multistart Nelder-Mead search followed by a
quasi-Newton root polish of the Psi estimating equations.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize, minimize_scalar, root, root_scalar
from scipy.special import expit, logit, logsumexp

from leverage import LeverageWeights, build_leverage, omega
from loss import LossSpec, psi, rho
from model import (Dataset, FitResult, ThetaEstimate, linear_predictors,
                   observed_zero_fraction, posterior_w)
from smoothing import KernelConfig, kernel_matrix, nw_weights

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12
SCAN_HALF_WIDTH = 3.0
SCAN_STEP = 0.05
SCAN_SHIFTS = 20
NEWTON_MAX_ITERS = 200
NEWTON_TOL = 1e-12
GAMMA_GRADIENT_TOL = 1e-10
SEPARATION_TOL = 1e-6
PERTURBATION_SCALE = 0.5
POLISHED_STARTS = 2
PI_FLOOR, PI_CEILING = 0.05, 0.95


class LocalFitError(RuntimeError):
    """Raised when a kernel-localised problem has too little data."""

    def __init__(self, message: str, tau: float | None = None):
        super().__init__(message)
        self.tau = tau


class SeparationError(RuntimeError):
    """Raised when the logistic objective is unbounded below."""

    def __init__(self, message: str, direction: np.ndarray | None = None):
        super().__init__(message)
        self.direction = direction


class FitError(RuntimeError):
    """Raised when a global step cannot produce a finite estimate."""


@dataclass
class FitConfig:  # pylint: disable=too-many-instance-attributes
    """Controls for the EM iteration.

    ``guard_false_zeros`` and ``use_leverage`` default to on for the robust
    families and off for ml, so ml reproduces the classical estimator.
    """
    max_em_iters: int = 100
    tol_param: float = 1e-4
    tol_score: float = 1e-3
    restarts: int = 5
    guard_false_zeros: bool | None = None
    use_leverage: bool | None = None
    hard_rejection: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_em_iters < 1:
            raise ValueError(f"max_em_iters must be at least 1, got {self.max_em_iters}")
        if not (self.tol_param > 0 and self.tol_score > 0):
            raise ValueError("Tolerances must be positive")
        if self.restarts < 0:
            raise ValueError(f"restarts must be nonnegative, got {self.restarts}")

    def guards(self, spec: LossSpec) -> bool:
        """Whether the gamma step also down-weights high-leverage x."""
        return spec.family != "ml" if self.guard_false_zeros is None else self.guard_false_zeros

    def leverages(self, spec: LossSpec) -> bool:
        """Whether omega weights enter the objectives at all."""
        return spec.family != "ml" if self.use_leverage is None else self.use_leverage


# --- shared solvers --------------------------------------------------------

def _effective(a: np.ndarray, needed: int, tau: float | None = None) -> np.ndarray:
    """Mask of observations whose weight is resolvable next to the largest."""
    top = float(a.max()) if a.size else 0.0
    if not top > 0:
        logger.error("No observation carries weight at tau=%s", tau)
        raise LocalFitError(f"No observation carries weight at tau={tau}", tau)
    keep = a > WEIGHT_FLOOR * top
    if np.count_nonzero(keep) < needed:
        logger.error("Only %d weighted observations at tau=%s", np.count_nonzero(keep), tau)
        raise LocalFitError(
            f"Only {np.count_nonzero(keep)} weighted observations at tau={tau}, "
            f"need {needed}", tau)
    return keep


def _constant_column(D: np.ndarray) -> int | None:
    for j in range(D.shape[1]):
        if np.all(D[:, j] == 1.0):
            return j
    return None


def _poisson_newton(y, D, offset, a, start=None, tau=None) -> np.ndarray:
    """Minimises sum a_i (e^u_i - y_i u_i), u = D b + offset, by damped Newton."""
    k = D.shape[1]
    if k == 0:
        return np.zeros(0)
    if np.sum(a * y) <= 0:
        raise LocalFitError("No positive count carries weight, the Poisson fit diverges", tau)
    if start is not None:
        b = np.array(start, dtype=float)
    else:
        b = np.zeros(k)
        level = _constant_column(D)
        if level is not None:
            b[level] = np.log(np.sum(a * y)) - logsumexp(offset, b=a)

    def objective(coef):
        u = D @ coef + offset
        return float(np.sum(a * (np.exp(np.minimum(u, 700.0)) - y * u)))

    value = objective(b)
    for _ in range(NEWTON_MAX_ITERS):
        mu = np.exp(np.minimum(D @ b + offset, 700.0))
        grad = D.T @ (a * (mu - y))
        hess = (D * (a * mu)[:, None]).T @ D
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        candidate, candidate_value = b - step, objective(b - step)
        while not candidate_value <= value + 1e-14 * abs(value) and scale > 1e-10:
            scale /= 2.0
            candidate = b - scale * step
            candidate_value = objective(candidate)
        if not candidate_value <= value + 1e-14 * abs(value):
            break
        b, value = candidate, candidate_value
        if np.max(np.abs(scale * step)) < NEWTON_TOL * (1.0 + np.max(np.abs(b))):
            break
    if not np.all(np.isfinite(b)):
        raise LocalFitError("Poisson Newton iterations diverged", tau)
    return b


def _objective_and_score(y, D, offset, a, spec: LossSpec):
    def objective(coef):
        return float(np.sum(a * rho(y, D @ coef + offset, spec)))

    def score(coef):
        return D.T @ (a * psi(y, D @ coef + offset, spec))

    return objective, score


def _polish(x, objective, score, value=None):
    """Solves the Psi equations from x; keeps x unless the root is no worse."""
    value = objective(x) if value is None else value
    solution = root(score, x, method="hybr", options={"xtol": 1e-12})
    if solution.success and np.all(np.isfinite(solution.x)) \
            and np.max(np.abs(solution.x - x)) < 1.0:
        polished = objective(solution.x)
        if polished <= value + 1e-10 * (1.0 + abs(value)):
            return solution.x, polished, True
    return np.asarray(x, dtype=float), value, False


def _m_estimate(y, D, offset, a, spec: LossSpec, starts, rng, restarts: int,
                thorough: bool, tau=None) -> np.ndarray:
    """Minimises sum a_i rho(y_i, D_i b + offset_i) over b."""
    starts = [np.asarray(s, dtype=float) for s in starts if s is not None]
    if spec.family == "ml":
        return _poisson_newton(y, D, offset, a, starts[0] if starts else None, tau)
    objective, score = _objective_and_score(y, D, offset, a, spec)
    if not thorough and starts:
        x, _, polished = _polish(starts[0], objective, score)
        if polished:
            return x
        logger.debug("Warm start at tau=%s did not polish, running the multistart", tau)
    try:
        starts.append(_poisson_newton(y, D, offset, a, tau=tau))
    except LocalFitError:
        if not starts:
            raise
    candidates = starts + [starts[0] + rng.normal(scale=PERTURBATION_SCALE, size=starts[0].size)
                           for _ in range(restarts)]
    values = np.array([objective(c) for c in candidates])
    best_x, best_value = None, np.inf
    for idx in np.argsort(values, kind="stable")[:POLISHED_STARTS]:
        simplex = minimize(objective, candidates[idx], method="Nelder-Mead",
                           options={"xatol": 1e-8, "fatol": 1e-14,
                                    "maxiter": 400 * candidates[idx].size})
        x, value, _ = _polish(simplex.x, objective, score, simplex.fun)
        if value < best_value:
            best_x, best_value = x, value
    if best_x is None or not np.all(np.isfinite(best_x)):
        logger.error("Multistart search failed at tau=%s", tau)
        raise FitError(f"Multistart search failed at tau={tau}")
    return best_x


def _ones_if_none(values, n: int) -> np.ndarray:
    return np.ones(n) if values is None else np.asarray(values, dtype=float)


# --- E step and the three M steps ------------------------------------------

def e_step(data: Dataset, theta: ThetaEstimate) -> np.ndarray:
    """Posterior probability that each observation is a structural zero."""
    z_gamma, eta = linear_predictors(data, theta)
    return np.asarray(posterior_w(data.y, z_gamma, eta))


def _step1_from_weights(kernel_weights, tau, data: Dataset, w, spec, omega1, start,
                        rng, restarts, thorough):
    a = kernel_weights * (1.0 - w) * omega1
    keep = _effective(a, data.p + 1, tau)
    design = np.column_stack([data.X[keep], np.ones(np.count_nonzero(keep))])
    params = _m_estimate(data.y[keep], design, np.zeros(design.shape[0]), a[keep], spec,
                         [start], rng, restarts, thorough, tau)
    return params[:-1], float(params[-1])


def step1_local(tau: float, data: Dataset, w, spec: LossSpec, kernel: KernelConfig, *,
                omega1=None, start=None, seed: int = 0, restarts: int = 5,
                thorough: bool = True) -> tuple[np.ndarray, float]:
    """Joint minimiser (beta~(tau), eta~(tau)) of the localised loss at tau."""
    weights = nw_weights(tau, data.t, kernel)
    return _step1_from_weights(weights, tau, data, np.asarray(w, dtype=float), spec,
                               _ones_if_none(omega1, data.n), start,
                               np.random.default_rng(seed), restarts, thorough)


def step2_beta(data: Dataset, m_tilde, w, spec: LossSpec, *, omega1=None, starts=(),
               seed: int = 0, restarts: int = 5, thorough: bool = True) -> np.ndarray:
    """Global minimiser of the loss over beta with m held at ``m_tilde``.

    ``m_tilde`` holds one value per observation.
    """
    if data.p == 0:
        return np.zeros(0)
    a = (1.0 - np.asarray(w, dtype=float)) * _ones_if_none(omega1, data.n) / data.n
    beta = _m_estimate(data.y, data.X, np.asarray(m_tilde, dtype=float), a, spec, list(starts),
                       np.random.default_rng(seed), restarts, thorough)
    if not np.all(np.isfinite(beta)):
        raise FitError("The beta step produced non-finite estimates")
    return beta


def step2_gamma(data: Dataset, w, weights=None, start=None) -> np.ndarray:
    """Weighted logistic fit of the fractional responses w on Z.

    Newton iterations with step halving on
    (1/n) sum v_i (log(1 + e^{z_i'gamma}) - w_i z_i'gamma).
    """
    Z, n = data.Z, data.n
    w = np.asarray(w, dtype=float)
    v = _ones_if_none(weights, n)
    if data.q == 0:
        return np.zeros(0)
    if np.sum(v * w) <= 0 or np.sum(v * (1.0 - w)) <= 0:
        side = "structural" if np.sum(v * (1.0 - w)) <= 0 else "Poisson"
        logger.warning("Every observation is %s, the logistic fit is separated", side)
        raise SeparationError(f"Every observation is {side}, gamma is unbounded")

    def objective(g):
        eta = Z @ g
        return float(np.sum(v * (np.logaddexp(0.0, eta) - w * eta)) / n)

    gamma = np.zeros(data.q) if start is None else np.array(start, dtype=float)
    value = objective(gamma)
    for _ in range(NEWTON_MAX_ITERS):
        prob = expit(Z @ gamma)
        _check_separation(gamma, prob, w, v)
        grad = Z.T @ (v * (prob - w)) / n
        if np.linalg.norm(grad) <= GAMMA_GRADIENT_TOL:
            return gamma
        hess = (Z * (v * prob * (1.0 - prob))[:, None]).T @ Z / n
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        candidate = gamma - step
        while objective(candidate) > value and scale > 1e-10:
            scale /= 2.0
            candidate = gamma - scale * step
        if objective(candidate) > value:
            logger.warning("Logistic step halving stalled with gradient norm %.3g",
                           np.linalg.norm(grad))
            return gamma
        gamma, value = candidate, objective(candidate)
    _check_separation(gamma, expit(Z @ gamma), w, v)
    logger.warning("Logistic fit stopped after %d iterations with gradient norm %.3g",
                   NEWTON_MAX_ITERS, np.linalg.norm(Z.T @ (v * (expit(Z @ gamma) - w)) / n))
    return gamma


def _check_separation(gamma, prob, w, v) -> None:
    """Raise when every weighted row is fitted exactly at 0 or 1."""
    active = v > 0
    if not np.any(gamma):
        return
    gap = np.maximum(np.minimum(prob, 1.0 - prob), np.abs(prob - w))[active]
    if np.max(gap) < SEPARATION_TOL:
        direction = gamma / np.linalg.norm(gamma)
        logger.warning("Logistic fit drifts along %s", np.round(direction, 4))
        raise SeparationError(
            f"Logistic objective is unbounded along direction {np.round(direction, 4)}",
            direction)


def _scan_eta(y, offset, a, spec: LossSpec, center: float) -> float:
    """Grid scan around ``center``, moved along until the best point is interior."""
    steps = np.arange(-SCAN_HALF_WIDTH, SCAN_HALF_WIDTH + SCAN_STEP / 2, SCAN_STEP)
    for _ in range(SCAN_SHIFTS + 1):
        grid = center + steps
        values = (a[:, None] * np.asarray(rho(y[:, None], offset[:, None] + grid[None, :], spec))
                  ).sum(axis=0)
        best = int(np.argmin(values))
        if 0 < best < grid.size - 1:
            break
        center = float(grid[best])
    else:
        logger.warning("Step 3 minimiser still on the edge of the scan at eta=%.4g", center)
    low, high = grid[max(best - 1, 0)], grid[min(best + 1, grid.size - 1)]

    def objective(eta):
        return float(np.sum(a * rho(y, offset + eta, spec)))

    def score(eta):
        return float(np.sum(a * psi(y, offset + eta, spec)))

    result = minimize_scalar(objective, bounds=(low, high), method="bounded",
                             options={"xatol": 1e-12})
    eta, value = float(result.x), float(result.fun)
    if score(low) < 0 < score(high):
        polished = root_scalar(score, bracket=(low, high), method="brentq", xtol=1e-15)
        if polished.converged and objective(polished.root) <= value + 1e-10 * (1.0 + abs(value)):
            eta = float(polished.root)
    return eta


def _step3_from_weights(kernel_weights, tau, beta, data: Dataset, w, spec, omega1,
                        center=None) -> float:
    a = kernel_weights * (1.0 - w) * omega1
    keep = _effective(a, 1, tau)
    y, offset, a = data.y[keep], data.X[keep] @ beta, a[keep]
    total = np.sum(a * y)
    closed_form = np.log(total) - logsumexp(offset, b=a) if total > 0 else None
    if spec.family == "ml":
        if closed_form is None:
            raise LocalFitError(f"No positive count carries weight at tau={tau}", tau)
        return float(closed_form)
    if center is None:
        center = closed_form if closed_form is not None else 0.0
    return _scan_eta(y, offset, a, spec, float(center))


def step3_m(tau: float, beta, data: Dataset, w, spec: LossSpec, kernel: KernelConfig, *,
            omega1=None, center=None) -> float:
    """Minimiser over eta of the localised loss at tau with beta fixed.

    The scan starts from the weighted-Poisson solution with offset x'beta, or
    from ``center`` when given, and follows the minimum past the window edges.
    """
    weights = nw_weights(tau, data.t, kernel)
    return _step3_from_weights(weights, tau, np.asarray(beta, dtype=float), data,
                               np.asarray(w, dtype=float), spec,
                               _ones_if_none(omega1, data.n), center)


# --- the EM driver ---------------------------------------------------------

@dataclass
class _LocalState:
    beta_tilde: np.ndarray
    m_tilde: np.ndarray
    m_hat: np.ndarray


@dataclass
class _FitContext:  # pylint: disable=too-many-instance-attributes
    data: Dataset
    spec: LossSpec
    kernel: KernelConfig
    cfg: FitConfig
    tau_grid: np.ndarray
    rows: np.ndarray
    weights: np.ndarray
    leverage_x: LeverageWeights
    omega1: np.ndarray
    gamma_weights: np.ndarray

    @classmethod
    def build(cls, data: Dataset, spec: LossSpec, kernel: KernelConfig, cfg: FitConfig):
        """Precomputes everything that stays fixed across EM iterations."""
        tau_grid = np.unique(data.t)
        leverage_x = build_leverage(data.X, hard=cfg.hard_rejection)
        if cfg.leverages(spec):
            omega1 = np.asarray(omega(data.X, leverage_x))
            omega2 = np.asarray(omega(data.Z, build_leverage(data.Z, hard=cfg.hard_rejection)))
        else:
            omega1, omega2 = np.ones(data.n), np.ones(data.n)
        gamma_weights = omega2 * omega1 if cfg.guards(spec) else omega2
        return cls(data, spec, kernel, cfg, tau_grid, np.searchsorted(tau_grid, data.t),
                   kernel_matrix(tau_grid, data.t, kernel), leverage_x, omega1, gamma_weights)

    def rng(self, *stream) -> np.random.Generator:
        """Generator for one local solve, keyed by seed and position."""
        return np.random.default_rng([self.cfg.seed, *stream])


def _initial_gamma(data: Dataset) -> tuple[np.ndarray, float]:
    zero_fraction = observed_zero_fraction(data)
    if zero_fraction == 1.0:
        structural = PI_CEILING
    else:
        structural = float(np.clip(zero_fraction - np.exp(-np.mean(data.y)), PI_FLOOR, PI_CEILING))
    gamma = np.zeros(data.q)
    level = _constant_column(data.Z)
    if level is not None:
        gamma[level] = logit(structural)
    return gamma, structural


def _initial_weights(data: Dataset, structural: float) -> np.ndarray:
    zero_fraction = observed_zero_fraction(data)
    if zero_fraction == 0:
        return np.zeros(data.n)
    return np.where(data.y == 0, min(1.0, structural / zero_fraction), 0.0)


def _m_step(ctx: _FitContext, w, previous: _LocalState | None, theta: ThetaEstimate | None,
            iteration: int, gamma: np.ndarray, fit_gamma: bool = True):
    data, spec, cfg = ctx.data, ctx.spec, ctx.cfg
    thorough = previous is None
    beta_tilde = np.empty((ctx.tau_grid.size, data.p))
    m_tilde = np.empty(ctx.tau_grid.size)
    last = None
    for k, tau in enumerate(ctx.tau_grid):
        start = last if previous is None else np.append(previous.beta_tilde[k], previous.m_tilde[k])
        beta_tilde[k], m_tilde[k] = _step1_from_weights(
            ctx.weights[k], tau, data, w, spec, ctx.omega1, start, ctx.rng(iteration, 1, k),
            cfg.restarts, thorough)
        last = np.append(beta_tilde[k], m_tilde[k])
    logger.debug("Step 1 solved at %d points", ctx.tau_grid.size)

    median = np.median(beta_tilde, axis=0)
    starts = [median] if theta is None else [theta.beta, median]
    beta = step2_beta(data, m_tilde[ctx.rows], w, spec, omega1=ctx.omega1, starts=starts,
                      seed=cfg.seed + iteration, restarts=cfg.restarts, thorough=thorough)

    separated = False
    if fit_gamma:
        try:
            gamma = step2_gamma(data, w, ctx.gamma_weights, start=gamma)
        except SeparationError as e:
            logger.warning("Gamma step skipped: %s", e)
            separated = True

    m_hat = np.array([
        _step3_from_weights(ctx.weights[k], tau, beta, data, w, spec, ctx.omega1)
        for k, tau in enumerate(ctx.tau_grid)])
    logger.debug("Step 3 solved at %d points", ctx.tau_grid.size)
    new_theta = ThetaEstimate(beta, gamma, ctx.tau_grid, m_hat, ctx.kernel.h, spec.label)
    return new_theta, _LocalState(beta_tilde, m_tilde, m_hat), separated


def initialize(data: Dataset, spec: LossSpec, kernel: KernelConfig,
               cfg: FitConfig | None = None) -> ThetaEstimate:
    """Starting value: gamma from the excess of zeros, (beta, m) from one M step."""
    ctx = _FitContext.build(data, spec, kernel, cfg or FitConfig())
    return _initial_state(ctx)[0]


def _initial_state(ctx: _FitContext):
    data = ctx.data
    gamma, structural = _initial_gamma(data)
    if np.all(data.y == 0):
        theta = ThetaEstimate(np.zeros(data.p), gamma, ctx.tau_grid, np.zeros(ctx.tau_grid.size),
                              ctx.kernel.h, ctx.spec.label)
        return theta, None
    w = _initial_weights(data, structural)
    theta, state, _ = _m_step(ctx, w, None, None, 0, gamma, fit_gamma=False)
    logger.info("Initialised with structural-zero share %.3f", structural)
    return theta, state


def _max_change(old: ThetaEstimate, new: ThetaEstimate) -> float:
    changes = [np.abs(new.beta - old.beta), np.abs(new.gamma - old.gamma),
               np.abs(new.m_grid - old.m_grid)]
    return float(max((c.max() for c in changes if c.size), default=0.0))


def score_residuals(data: Dataset, theta: ThetaEstimate, w, spec: LossSpec,
                    kernel: KernelConfig | None = None, *, m_tilde=None, omega1=None,
                    gamma_weights=None) -> dict:
    """Evaluates the three blocks of the estimating equations at theta.

    ``s1`` is the largest absolute eta-score over the grid of theta (zero
    when no kernel is given), ``s2`` the beta block with m at ``m_tilde``
    (per observation, default m(t) of theta), ``s3`` the gamma block.
    """
    w = np.asarray(w, dtype=float)
    omega1 = _ones_if_none(omega1, data.n)
    v = _ones_if_none(gamma_weights, data.n)
    offset = theta.m_at(data.t) if m_tilde is None else np.asarray(m_tilde, dtype=float)
    x_beta = data.X @ theta.beta
    s2 = data.X.T @ ((1.0 - w) * omega1 * np.asarray(psi(data.y, x_beta + offset, spec))) / data.n
    s3 = data.Z.T @ (v * (expit(data.Z @ theta.gamma) - w)) / data.n
    s1 = 0.0
    if kernel is not None and theta.m_linear is None:
        weights = kernel_matrix(theta.t_grid, data.t, kernel)
        local = np.asarray(psi(data.y[None, :], x_beta[None, :] + theta.m_grid[:, None], spec))
        s1 = float(np.max(np.abs((weights * local * ((1.0 - w) * omega1)[None, :]).sum(axis=1))))
    return {"s1": s1, "s2": s2, "s3": s3}


def _objective(ctx: _FitContext, w, theta: ThetaEstimate, m_tilde_rows) -> float:
    data = ctx.data
    u = data.X @ theta.beta + m_tilde_rows
    q2 = np.mean((1.0 - w) * np.asarray(rho(data.y, u, ctx.spec)) * ctx.omega1)
    z_gamma = data.Z @ theta.gamma
    q3 = np.mean(ctx.gamma_weights * (np.logaddexp(0.0, z_gamma) - w * z_gamma))
    return float(q2 + q3)


def _canonical_order(data: Dataset) -> np.ndarray:
    """Row order fixed by the observations themselves, t first."""
    keys = [data.t, data.y, *data.X.T, *data.Z.T]
    return np.lexsort(keys[::-1])


def _in_caller_order(fitted: FitResult, order: np.ndarray) -> FitResult:
    weights = np.empty_like(fitted.weights)
    weights[order] = fitted.weights
    return replace(fitted, weights=weights)


def em_fit(data: Dataset, spec: LossSpec, kernel: KernelConfig,
           cfg: FitConfig | None = None) -> FitResult:
    """Fits the PLZIP model by the EM-like algorithm.

    Observations are processed in a canonical order, so listing them
    differently gives the same estimates; ``weights`` come back in the
    order of ``data``. Non-convergence is reported through ``converged``
    rather than raised.
    """
    order = _canonical_order(data)
    return _in_caller_order(_em_fit_sorted(data.subset(order), spec, kernel, cfg or FitConfig()),
                            order)


def _em_fit_sorted(data: Dataset, spec: LossSpec, kernel: KernelConfig,
                   cfg: FitConfig) -> FitResult:
    ctx = _FitContext.build(data, spec, kernel, cfg)
    logger.info("Fitting %s on n=%d with h=%.4g", spec.label, data.n, kernel.h)
    theta, state = _initial_state(ctx)
    if state is None:
        logger.warning("Every response is zero, only the zero-inflation level is set")
        return FitResult(theta, 0, False, float("inf"), [], np.ones(data.n),
                         np.zeros(ctx.tau_grid.size), ctx.leverage_x, cfg.leverages(spec))

    trace, settled, separated, w = [], False, False, None
    iteration = 0
    for iteration in range(1, cfg.max_em_iters + 1):
        w = e_step(data, theta)
        new_theta, state, separated = _m_step(ctx, w, state, theta, iteration, theta.gamma)
        change = _max_change(theta, new_theta)
        theta = new_theta
        trace.append(_objective(ctx, w, theta, state.m_tilde[ctx.rows]))
        logger.info("EM iteration %d: objective %.8g, max change %.3e",
                    iteration, trace[-1], change)
        if change < cfg.tol_param:
            settled = True
            break

    scores = score_residuals(data, theta, e_step(data, theta), spec, kernel,
                             m_tilde=state.m_tilde[ctx.rows], omega1=ctx.omega1,
                             gamma_weights=ctx.gamma_weights)
    blocks = scores["s2"] if separated else np.concatenate([scores["s2"], scores["s3"]])
    score_norm = float(np.linalg.norm(blocks) + scores["s1"])
    converged = settled and score_norm <= cfg.tol_score
    if converged:
        logger.info("Converged after %d iterations, score residual %.3e", iteration, score_norm)
    else:
        logger.warning("No convergence after %d iterations (settled=%s, score residual %.3e)",
                       iteration, settled, score_norm)
    return FitResult(theta, iteration, converged, score_norm, trace, w, state.m_tilde,
                     ctx.leverage_x, cfg.leverages(spec), separated)


def fit_parametric_zip(data: Dataset, spec: LossSpec, cfg: FitConfig | None = None) -> FitResult:
    """Linear ZIP fit: t and an intercept join X and m is frozen at 0.

    The fitted slope and intercept are reported as a linear m(t).
    """
    order = _canonical_order(data)
    return _in_caller_order(_parametric_zip_sorted(data.subset(order), spec, cfg or FitConfig()),
                            order)


def _parametric_zip_sorted(data: Dataset, spec: LossSpec, cfg: FitConfig) -> FitResult:
    n, p = data.n, data.p
    augmented = Dataset(data.y, np.column_stack([data.X, data.t, np.ones(n)]), data.Z, data.t)
    leverage_x = build_leverage(augmented.X, hard=cfg.hard_rejection)
    if cfg.leverages(spec):
        omega1 = np.asarray(omega(augmented.X, leverage_x))
        omega2 = np.asarray(omega(data.Z, build_leverage(data.Z, hard=cfg.hard_rejection)))
    else:
        omega1, omega2 = np.ones(n), np.ones(n)
    gamma_weights = omega2 * omega1 if cfg.guards(spec) else omega2
    tau_grid = np.unique(data.t)
    label = f"zip-{spec.label}"

    def as_theta(coef, gamma):
        slope, intercept = coef[p], coef[p + 1]
        return ThetaEstimate(coef[:p], gamma, tau_grid, slope * tau_grid + intercept,
                             float("nan"), label, (float(slope), float(intercept)))

    gamma, structural = _initial_gamma(data)
    w = _initial_weights(data, structural)
    coef = step2_beta(augmented, np.zeros(n), w, spec, omega1=omega1, seed=cfg.seed,
                      restarts=cfg.restarts)
    theta = as_theta(coef, gamma)
    trace, settled, separated, iteration = [], False, False, 0
    for iteration in range(1, cfg.max_em_iters + 1):
        w = e_step(data, theta)
        coef = step2_beta(augmented, np.zeros(n), w, spec, omega1=omega1, starts=[coef],
                          seed=cfg.seed + iteration, restarts=cfg.restarts, thorough=False)
        try:
            gamma = step2_gamma(data, w, gamma_weights, start=theta.gamma)
        except SeparationError as e:
            logger.warning("Gamma step skipped: %s", e)
            separated = True
        new_theta = as_theta(coef, gamma)
        change = _max_change(theta, new_theta)
        theta = new_theta
        z_gamma = data.Z @ gamma
        trace.append(float(np.mean((1.0 - w) * np.asarray(rho(data.y, augmented.X @ coef, spec))
                                   * omega1)
                           + np.mean(gamma_weights * (np.logaddexp(0.0, z_gamma) - w * z_gamma))))
        if change < cfg.tol_param:
            settled = True
            break

    fresh = e_step(data, theta)
    s2 = augmented.X.T @ ((1.0 - fresh) * omega1
                          * np.asarray(psi(data.y, augmented.X @ coef, spec))) / n
    s3 = data.Z.T @ (gamma_weights * (expit(data.Z @ theta.gamma) - fresh)) / n
    score_norm = float(np.linalg.norm(s2 if separated else np.concatenate([s2, s3])))
    converged = settled and score_norm <= cfg.tol_score
    logger.info("Parametric ZIP fit: %d iterations, converged=%s", iteration, converged)
    return FitResult(theta, iteration, converged, score_norm, trace, w, theta.m_grid,
                     leverage_x, cfg.leverages(spec), separated)


def m_hat_at(taus, fitted: FitResult, data: Dataset, spec: LossSpec) -> np.ndarray:
    """Re-solves step 3 at each tau with the final beta and E-step weights."""
    theta = fitted.theta
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if theta.m_linear is not None:
        return theta.m_at(taus)
    omega1 = np.asarray(omega(data.X, fitted.leverage_x)) if fitted.use_leverage \
        else np.ones(data.n)
    weights = kernel_matrix(taus, data.t, KernelConfig(theta.h))
    return np.array([
        _step3_from_weights(weights[k], tau, theta.beta, data, fitted.weights, spec, omega1)
        for k, tau in enumerate(taus)])
