"""Leverage weights from a robust, diagonal Mahalanobis distance."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, median_abs_deviation

logger = logging.getLogger(__name__)

CUTOFF_LEVEL = 0.975


@dataclass(frozen=True, eq=False)
class LeverageWeights:
    """Median centre, normal-consistent MAD scale and chi-square cutoff.

    Columns with zero MAD are flagged in ``retained`` and left out of the
    distance. With no retained column the cutoff is infinite and every
    weight is 1.
    """
    center: np.ndarray
    scale: np.ndarray
    retained: np.ndarray
    cutoff: float
    hard: bool = False

    @property
    def dim(self) -> int:
        """Number of columns entering the distance."""
        return int(np.count_nonzero(self.retained))


def build_leverage(M, hard: bool = False) -> LeverageWeights:
    """Builds leverage weights from the rows of an n x d covariate matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.shape[0] < 2:
        raise ValueError(f"Leverage weights need at least 2 rows, got {M.shape[0]}")
    center = np.median(M, axis=0)
    scale = median_abs_deviation(M, axis=0, scale="normal")
    retained = scale > 0
    dim = int(np.count_nonzero(retained))
    if dim < M.shape[1]:
        logger.debug("Excluding %d degenerate columns from the distance", M.shape[1] - dim)
    cutoff = float(chi2.ppf(CUTOFF_LEVEL, dim)) if dim else np.inf
    return LeverageWeights(center, np.where(retained, scale, 1.0), retained, cutoff, hard)


def squared_distance(v, lw: LeverageWeights):
    """Squared robust distance of a vector, or of every row of a matrix."""
    v = np.asarray(v, dtype=float)
    standardised = (v - lw.center) / lw.scale
    return np.sum(np.where(lw.retained, standardised, 0.0) ** 2, axis=-1)


def omega(v, lw: LeverageWeights):
    """Returns the leverage weight: 1 inside the cutoff, cutoff/MD^2 beyond.

    With ``hard`` set the weight drops to 0 beyond the cutoff instead.
    """
    d2 = np.asarray(squared_distance(v, lw))
    if lw.dim == 0:
        weights = np.ones(d2.shape)
    else:
        beyond = d2 > lw.cutoff
        decay = 0.0 if lw.hard else lw.cutoff / np.where(beyond, d2, 1.0)
        weights = np.where(beyond, decay, 1.0)
    return float(weights) if weights.ndim == 0 else weights
