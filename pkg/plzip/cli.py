"""Command-line entry point for fitting, predicting and simulating PLZIP models.

Exit codes: 0 on success, 1 on input errors, 2 when a fit does not converge
(its document is still written).
"""
import argparse
import json
import logging
from dataclasses import asdict, dataclass, field
from os import environ as ENV
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from fit import (FitConfig, FitError, LocalFitError, SeparationError, em_fit,
                 fit_parametric_zip)
from leverage import build_leverage
from loss import FAMILIES, build_loss_spec, expected_loss, fisher_consistency_check
from mc import (PARAMETRIC_LOSS, POLICIES, SCHEMES, SchemeConfig, gen_scheme,
                prediction_error_study, run_study, summarize_study)
from model import Dataset, FitResult, ThetaEstimate, predict_components
from smoothing import (BandwidthSelectionError, DegenerateWindowError, KernelConfig,
                       cv_bandwidth, cv_curve, select_from_curve)

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
SCHEMA_VERSION = 1
TRUTH_PREFIX = "truth_"
FLOAT_FORMAT = "%.17g"
DEFAULT_U_GRID = np.linspace(-2.0, 3.0, 11)
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
NUMERICAL_ERRORS = (FitError, LocalFitError, SeparationError, BandwidthSelectionError,
                    DegenerateWindowError, np.linalg.LinAlgError)


class InputError(ValueError):
    """Raised for unusable command-line arguments or input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


@dataclass
class FitDocument:  # pylint: disable=too-many-instance-attributes
    """Everything needed to report a fit and to predict from it later."""
    loss: dict
    bandwidth: float
    beta: list
    gamma: list
    m_grid: list
    iterations: int
    converged: bool
    score_norm: float
    columns: dict
    seed: int
    data: str
    weights: list
    leverage: dict
    m_linear: list | None = None
    schema_version: int = SCHEMA_VERSION
    tool_version: str = TOOL_VERSION

    def to_json(self) -> str:
        """Stable JSON text; floats keep their shortest exact repr."""
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FitDocument":
        """Parses a document, rejecting unknown schema versions."""
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise InputError(f"Fit document is not valid JSON: {e}") from e
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"Unsupported fit document schema {payload.get('schema_version')}")
        try:
            return cls(**payload)
        except TypeError as e:
            raise InputError(f"Malformed fit document: {e}") from e


def build_document(result: FitResult, spec, columns: dict, seed: int, data_path: str,
                   hard: bool) -> FitDocument:
    """Serialisable view of a fit."""
    theta = result.theta
    return FitDocument(
        loss={"family": spec.family, "c": spec.c},
        bandwidth=float(theta.h),
        beta=theta.beta.tolist(),
        gamma=theta.gamma.tolist(),
        m_grid=[list(pair) for pair in theta.m_values],
        iterations=int(result.iterations),
        converged=bool(result.converged),
        score_norm=float(result.score_norm),
        columns=columns,
        seed=seed,
        data=data_path,
        weights=np.asarray(result.weights, dtype=float).tolist(),
        leverage={"use": bool(result.use_leverage), "hard": hard},
        m_linear=None if theta.m_linear is None else list(theta.m_linear),
    )


def result_from_document(doc: FitDocument, data: Dataset) -> FitResult:
    """Rebuilds the fit state that prediction needs from a document."""
    if len(doc.weights) != data.n:
        raise InputError(f"Training data {doc.data} has {data.n} rows, the fit used "
                         f"{len(doc.weights)}")
    spec = build_loss_spec(doc.loss["family"], doc.loss["c"] or None)
    grid = np.asarray(doc.m_grid, dtype=float).reshape(-1, 2)
    theta = ThetaEstimate(doc.beta, doc.gamma, grid[:, 0], grid[:, 1], doc.bandwidth,
                          spec.label, None if doc.m_linear is None else tuple(doc.m_linear))
    return FitResult(theta, doc.iterations, doc.converged, doc.score_norm,
                     weights=np.asarray(doc.weights, dtype=float),
                     leverage_x=build_leverage(data.X, hard=doc.leverage["hard"]),
                     use_leverage=doc.leverage["use"])


# --- CSV input -------------------------------------------------------------

def read_frame(path: str) -> pd.DataFrame:
    """Reads a CSV file, turning IO problems into input errors."""
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Cannot read {path}: {e}") from e


def numeric_columns(df: pd.DataFrame, columns: list, path: str) -> pd.DataFrame:
    """Returns the named columns as floats; lines are numbered as in the file."""
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}")
    out = pd.DataFrame(index=df.index)
    for column in columns:
        values = pd.to_numeric(df[column], errors="coerce").astype(float)
        bad = ~np.isfinite(values.to_numpy())
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise InputError(f"{path} line {row + 2}: column '{column}' holds "
                             f"'{df[column].iloc[row]}', expected a finite number")
        out[column] = values
    return out


def load_dataset(path: str, y: str | None, x: list, z: list, t: str,
                 z_intercept: bool) -> Dataset:
    """Validated dataset from a CSV; without ``y`` the response is all zero."""
    df = read_frame(path)
    frame = numeric_columns(df, ([y] if y else []) + list(x) + list(z) + [t], path)
    if y:
        counts = frame[y].to_numpy()
        bad = (counts < 0) | (counts != np.round(counts))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise InputError(f"{path} line {row + 2}: column '{y}' holds {counts[row]:g}, "
                             "expected a nonnegative integer count")
    else:
        frame["__y"] = 0.0
        y = "__y"
    return Dataset.from_frame(frame, y, x, z, t, z_intercept=z_intercept)


def write_frame(df: pd.DataFrame, path: str):
    """Writes a CSV with 17 significant digits."""
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Wrote %d rows to %s", len(df), path)


def column_list(text: str) -> list:
    """Parses a comma-separated column list."""
    return [item.strip() for item in text.split(",") if item.strip()]


def parse_grid(text: str | None):
    """Bandwidth grid from 'a,b,c' or 'geom:low:high:count'; None keeps the default."""
    if text is None or text == "default":
        return None
    try:
        if text.startswith("geom:"):
            low, high, count = text.split(":")[1:]
            return np.geomspace(float(low), float(high), int(count))
        return np.array([float(item) for item in column_list(text)])
    except ValueError as e:
        raise InputError(f"Cannot parse bandwidth grid '{text}'") from e


def _fit_config(args) -> FitConfig:
    return FitConfig(max_em_iters=args.max_iter, guard_false_zeros=args.guard_false_zeros,
                     hard_rejection=args.hard_rejection, seed=args.seed)


def _columns(args) -> dict:
    return {"y": args.y, "x": args.x, "z": args.z, "t": args.t, "z_intercept": args.z_intercept}


# --- commands --------------------------------------------------------------

def cmd_fit(args) -> int:
    """Fits one model and writes its document."""
    if args.bandwidth is None and args.cv is None and not args.parametric:
        raise InputError("One of --bandwidth or --cv is required")
    data = load_dataset(args.data, args.y, args.x, args.z, args.t, args.z_intercept)
    spec = build_loss_spec(args.loss, args.c)
    cfg = _fit_config(args)
    if args.parametric:
        result = fit_parametric_zip(data, spec, cfg)
    else:
        h = args.bandwidth
        if h is None:
            h = cv_bandwidth(data, spec, folds=args.cv, grid=parse_grid(args.grid),
                             seed=args.seed, cfg=cfg)
        result = em_fit(data, spec, KernelConfig(h), cfg)
    doc = build_document(result, spec, _columns(args), args.seed,
                         str(Path(args.data).resolve()), args.hard_rejection)
    Path(args.out).write_text(doc.to_json(), encoding="utf-8")
    logger.info("Wrote fit document to %s", args.out)
    return 0 if result.converged else 2


def cmd_predict(args) -> int:
    """Predicts the ZIP mean at new rows from a saved fit."""
    try:
        doc = FitDocument.from_json(Path(args.fit).read_text(encoding="utf-8"))
    except OSError as e:
        raise InputError(f"Cannot read {args.fit}: {e}") from e
    cols = doc.columns
    train = load_dataset(doc.data, cols["y"], cols["x"], cols["z"], cols["t"],
                         cols["z_intercept"])
    fitted = result_from_document(doc, train)
    new = load_dataset(args.data, None, cols["x"], cols["z"], cols["t"], cols["z_intercept"])
    spec = build_loss_spec(doc.loss["family"], doc.loss["c"] or None)
    m, pi, lam = predict_components(new.X, new.Z, new.t, fitted, train, spec)
    write_frame(pd.DataFrame({"t": new.t, "m": m, "pi": pi, "lambda": lam,
                              "mean": (1.0 - pi) * lam}), args.out)
    return 0


def cmd_simulate(args) -> int:
    """Writes one simulated sample with its truth columns."""
    data, truth = gen_scheme(SchemeConfig(args.scheme, args.n, args.seed, args.stream))
    frame = pd.DataFrame({"y": data.y, "x1": data.X[:, 0], "x2": data.X[:, 1],
                          "z1": data.Z[:, 0], "z2": data.Z[:, 1], "t": data.t,
                          f"{TRUTH_PREFIX}w": truth.w, f"{TRUTH_PREFIX}m": truth.m,
                          f"{TRUTH_PREFIX}contaminated": truth.contaminated.astype(int)})
    write_frame(frame, args.out)
    return 0


def cmd_study(args) -> int:
    """Runs the simulation study, or the prediction-error study with --data."""
    cfg = _fit_config(args)
    if args.data:
        if not (args.y and args.t):
            raise InputError("--data needs --y and --t")
        data = load_dataset(args.data, args.y, args.x, args.z, args.t, args.z_intercept)
        h = None if args.bandwidth in POLICIES else float(args.bandwidth)
        rows = prediction_error_study(data, args.losses, folds=args.folds, seed=args.seed,
                                      h=h, cfg=cfg, cv_folds=args.cv_folds)
        write_frame(rows, args.out)
        return 0
    unknown = [s for s in args.schemes if s.lower() not in SCHEMES]
    if unknown:
        raise InputError(f"Unknown schemes {unknown}, expected a subset of {SCHEMES}")
    rows = run_study(args.schemes, args.losses, args.reps, args.n, args.seed, args.bandwidth,
                     threads=args.threads, cfg=cfg, cv_folds=args.cv_folds,
                     cv_grid=parse_grid(args.grid))
    write_frame(rows, args.out)
    if args.summary:
        write_frame(summarize_study(rows), args.summary)
    return 0


def cmd_cv(args) -> int:
    """Writes the cross-validation curve and reports the chosen bandwidth."""
    data = load_dataset(args.data, args.y, args.x, args.z, args.t, args.z_intercept)
    spec = build_loss_spec(args.loss, args.c)
    curve = cv_curve(data, spec, folds=args.folds, grid=parse_grid(args.grid), seed=args.seed,
                     cfg=_fit_config(args))
    write_frame(curve, args.out)
    h = select_from_curve(curve)
    logger.info("Selected bandwidth %.6g", h)
    print(repr(h))
    return 0


def cmd_check(args) -> int:
    """Tabulates the Fisher-consistency residual over a grid of log-means."""
    spec = build_loss_spec(args.loss, args.c)
    u = DEFAULT_U_GRID if args.u is None else np.array([float(v) for v in column_list(args.u)])
    frame = pd.DataFrame({"u": u, "lambda": np.exp(u),
                          "residual": [fisher_consistency_check(v, spec) for v in u],
                          "expected_rho": [expected_loss(v, spec) for v in u]})
    write_frame(frame, args.out)
    return 0


# --- parser ----------------------------------------------------------------

def _add_data_arguments(parser, required=True):
    parser.add_argument("--data", required=required, help="Input CSV")
    parser.add_argument("--y", required=required, help="Count response column")
    parser.add_argument("--x", type=column_list, default=[], help="Comma-separated X columns")
    parser.add_argument("--z", type=column_list, default=[], help="Comma-separated Z columns")
    parser.add_argument("--t", required=required, help="Smoothing variable column")
    parser.add_argument("--z-intercept", action=argparse.BooleanOptionalAction, default=True,
                        help="Prepend an intercept column to Z")


def _add_fit_arguments(parser):
    parser.add_argument("--guard-false-zeros", action=argparse.BooleanOptionalAction,
                        default=None, help="Down-weight high-leverage x in the gamma step")
    parser.add_argument("--hard-rejection", action="store_true",
                        help="Zero weight beyond the leverage cutoff")
    parser.add_argument("--max-iter", type=int, default=100, help="Maximum EM iterations")
    parser.add_argument("--seed", type=int, default=0, help="Seed for restarts and folds")


def _add_loss_arguments(parser):
    parser.add_argument("--loss", choices=FAMILIES, default="ml", help="Loss family")
    parser.add_argument("--c", type=float, default=None, help="Tuning constant")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser for every sub-command."""
    parser = _Parser(prog="plzip", description="Robust partially linear ZIP regression")
    parser.add_argument("--version", action="version",
                        version=f"plzip {TOOL_VERSION} (fit document schema {SCHEMA_VERSION})")
    parser.add_argument("--log-level", default=ENV.get("PLZIP_LOG_LEVEL", "INFO"),
                        type=str.upper, help="Logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="Fit a model")
    _add_data_arguments(fit)
    _add_loss_arguments(fit)
    _add_fit_arguments(fit)
    fit.add_argument("--bandwidth", type=float, default=None, help="Fixed bandwidth")
    fit.add_argument("--cv", type=int, default=None, help="Select h by k-fold CV")
    fit.add_argument("--grid", default=None, help="CV grid 'a,b,c' or 'geom:low:high:count'")
    fit.add_argument("--parametric", action="store_true", help="Linear-in-t ZIP fit")
    fit.add_argument("--out", required=True, help="Fit document path")
    fit.set_defaults(handler=cmd_fit)

    predict = commands.add_parser("predict", help="Predict from a fit document")
    predict.add_argument("--fit", required=True, help="Fit document path")
    predict.add_argument("--data", required=True, help="CSV with the fit's x, z and t columns")
    predict.add_argument("--out", required=True, help="Prediction CSV")
    predict.set_defaults(handler=cmd_predict)

    simulate = commands.add_parser("simulate", help="Write one simulated sample")
    simulate.add_argument("--scheme", type=str.lower, choices=SCHEMES, default="c0")
    simulate.add_argument("--n", type=int, default=500)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--stream", type=int, default=0, help="Replication stream")
    simulate.add_argument("--out", required=True)
    simulate.set_defaults(handler=cmd_simulate)

    study = commands.add_parser("study", help="Monte Carlo or prediction-error study")
    _add_data_arguments(study, required=False)
    _add_fit_arguments(study)
    study.add_argument("--schemes", type=column_list, default=list(SCHEMES))
    study.add_argument("--losses", type=column_list, default=list(FAMILIES),
                       help=f"Loss families, optionally {PARAMETRIC_LOSS}")
    study.add_argument("--reps", type=int, default=100)
    study.add_argument("--n", type=int, default=500)
    study.add_argument("--bandwidth", default="fixed-cv", help="fixed-cv, per-rep or a number")
    study.add_argument("--cv-folds", type=int, default=5)
    study.add_argument("--folds", type=int, default=5, help="Folds of the prediction study")
    study.add_argument("--grid", default=None)
    study.add_argument("--threads", type=int, default=int(ENV.get("PLZIP_THREADS", "1")))
    study.add_argument("--out", required=True)
    study.add_argument("--summary", default=None, help="Per-cell summary CSV")
    study.set_defaults(handler=cmd_study)

    cv = commands.add_parser("cv", help="Cross-validation curve")
    _add_data_arguments(cv)
    _add_loss_arguments(cv)
    _add_fit_arguments(cv)
    cv.add_argument("--folds", type=int, default=5)
    cv.add_argument("--grid", default=None)
    cv.add_argument("--out", required=True)
    cv.set_defaults(handler=cmd_cv)

    check = commands.add_parser("check", help="Fisher-consistency residuals")
    _add_loss_arguments(check)
    check.add_argument("--u", default=None, help="Comma-separated log-means")
    check.add_argument("--out", required=True)
    check.set_defaults(handler=cmd_check)
    return parser


def main(argv=None) -> int:
    """Runs one command and returns its exit code."""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except InputError as e:
        logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
        logger.error("%s", e)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level, logging.INFO), format=LOG_FORMAT)
    try:
        return args.handler(args)
    # LinAlgError and DegenerateWindowError are ValueErrors too
    except NUMERICAL_ERRORS as e:
        logger.error("Fit failed: %s", e)
        return 2
    except ValueError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
