"""Conditional variance estimation by nearest-neighbour matching on instruments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .moments import ObservationSet

PRUNE_RTOL = 1e-10
_BLOCK = 512


class InsufficientDataError(ValueError):
    pass


class DegenerateInstrumentError(ValueError):
    pass


@dataclass(frozen=True)
class MatchingConfig:
    """Distance used to pair each observation with its nearest neighbour.

    When ``metric`` is None it defaults to the inverse sample variance of the
    instruments that survive :func:`prune_dependent_columns`.  A supplied
    metric applies to the columns listed in ``columns`` (all columns if None).
    Distance ties always go to the lowest index.
    """

    metric: np.ndarray | None = None
    columns: tuple[int, ...] | None = None
    prune_rtol: float = PRUNE_RTOL


def prune_dependent_columns(z: np.ndarray, rtol: float = PRUNE_RTOL) -> list[int]:
    """Indices of a maximal set of columns with invertible sample variance."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] == 0 or z.shape[0] < 2:
        return []
    zc = z - z.mean(axis=0)
    _, r, piv = linalg.qr(zc, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return []
    rank = int(np.sum(diag > rtol * diag[0]))
    return sorted(int(j) for j in piv[:rank])


def nearest_neighbours(u: np.ndarray) -> np.ndarray:
    """Euclidean nearest neighbour of each row of ``u``, excluding itself.

    Exhaustive search in blocks; ``argmin`` returns the first minimiser so
    ties go to the lowest index.
    """
    n = u.shape[0]
    sq = np.einsum("ij,ij->i", u, u)
    _, label = np.unique(u, axis=0, return_inverse=True)
    label = label.reshape(-1)
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        d = sq[start:stop, None] + sq[None, :] - 2.0 * (u[start:stop] @ u.T)
        # exact zero for identical rows regardless of roundoff in the expansion
        d[label[start:stop, None] == label[None, :]] = 0.0
        np.maximum(d, 0.0, out=d)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argmin(d, axis=1)
    return out


def _all_rows_duplicated(z: np.ndarray) -> bool:
    _, counts = np.unique(z, axis=0, return_counts=True)
    return bool(np.all(counts >= 2))


def within_cell_variance(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Average of within-cell sample variances, cells being identical z rows."""
    n, k = y.shape
    _, inverse = np.unique(z, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    total = np.zeros((k, k))
    for cell in np.unique(inverse):
        yc = y[inverse == cell]
        dev = yc - yc.mean(axis=0)
        total += dev.T @ dev * (yc.shape[0] / (yc.shape[0] - 1))
    s = total / n
    return 0.5 * (s + s.T)


def estimate_sigma(obs: ObservationSet, cfg: MatchingConfig | None = None) -> np.ndarray:
    """Matching estimator ``(1/2n) sum_i (Y_i - Y_l(i))(Y_i - Y_l(i))'``."""
    cfg = cfg or MatchingConfig()
    if obs.n < 2:
        raise InsufficientDataError("need at least two observations")
    z = obs.z
    if cfg.metric is None:
        cols = prune_dependent_columns(z, cfg.prune_rtol)
        if not cols:
            raise DegenerateInstrumentError(
                "no instrument column varies; supply a metric explicitly"
            )
        zp = z[:, cols]
        metric = np.linalg.inv(np.atleast_2d(np.cov(zp, rowvar=False)))
    else:
        cols = list(cfg.columns) if cfg.columns is not None else list(range(z.shape[1]))
        zp = z[:, cols]
        metric = np.atleast_2d(np.asarray(cfg.metric, dtype=float))
        if metric.shape != (len(cols), len(cols)):
            raise ValueError("metric shape does not match the instrument columns")
    if _all_rows_duplicated(zp):
        return within_cell_variance(obs.y, zp)
    metric = 0.5 * (metric + metric.T)
    chol = np.linalg.cholesky(metric)
    u = (zp - zp.mean(axis=0)) @ chol
    match = nearest_neighbours(u)
    diff = obs.y - obs.y[match]
    s = diff.T @ diff / (2.0 * obs.n)
    return 0.5 * (s + s.T)
