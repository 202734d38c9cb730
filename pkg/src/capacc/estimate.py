"""Robust baseline, covariance and structured precision estimation.

The covariance combines scaled MADs with Gaussian rank correlations.  The
precision matrix is the Gaussian MLE under a fixed zero pattern (covariance
selection), fitted by iterative proportional fitting over the maximal
cliques of the adjacency graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import networkx as nx
import numpy as np
from scipy import linalg, special, stats

from .core import (
    ConvergenceError,
    DataMatrix,
    InvalidArgumentError,
    NumericalError,
    PrecisionModel,
)

log = logging.getLogger(__name__)

MAD_CONSTANT = 1.4826


def robust_baseline(data) -> np.ndarray:
    """Per-series medians (mean of the two central values for even ``n``)."""
    values = np.asarray(data.values if isinstance(data, DataMatrix) else data, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) < 1:
        raise InvalidArgumentError("need at least one observation")
    return np.median(values, axis=0)


def mad(x, constant: float = MAD_CONSTANT) -> np.ndarray:
    """Median absolute deviation times ``constant``, along axis 0."""
    return constant * stats.median_abs_deviation(np.asarray(x, dtype=float), axis=0)


def normal_scores(x) -> np.ndarray:
    """``Phi^{-1}(R / (n + 1))`` with average ranks ``R``, along axis 0."""
    x = np.asarray(x, dtype=float)
    ranks = stats.rankdata(x, axis=0)
    return special.ndtri(ranks / (len(x) + 1))


def gaussian_rank_correlation(x, y) -> float:
    """Pearson correlation of the normal scores of ``x`` and ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidArgumentError("x and y must be vectors of equal length")
    if len(x) < 3:
        raise InvalidArgumentError("need at least 3 observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise InvalidArgumentError("correlation undefined for a constant vector")
    a, b = normal_scores(x), normal_scores(y)
    a, b = a - a.mean(), b - b.mean()
    r = float(a @ b / np.sqrt((a @ a) * (b @ b)))
    return min(1.0, max(-1.0, r))


def robust_covariance(data, mad_constant: float = MAD_CONSTANT) -> np.ndarray:
    """``s_ij = mad(x_i) mad(x_j) r_Gauss(x_i, x_j)``."""
    dm = data if isinstance(data, DataMatrix) else DataMatrix(data)
    values = dm.values
    if dm.n < 3:
        raise InvalidArgumentError("need at least 3 observations")
    scale = mad(values, mad_constant)
    for j in np.flatnonzero(scale == 0):
        raise InvalidArgumentError(f"column '{dm.column_names[j]}' has zero MAD")
    z = normal_scores(values)
    z = z - z.mean(axis=0)
    norm = np.sqrt(np.einsum("ij,ij->j", z, z))
    R = np.clip((z.T @ z) / np.outer(norm, norm), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    S = np.outer(scale, scale) * R
    return (S + S.T) / 2


def repair_pd(S, rel_floor: float = 1e-8) -> tuple:
    """Clip eigenvalues of ``S`` at ``rel_floor * trace / p``.

    Returns ``(S_repaired, repaired)``; ``S`` is returned unchanged when all
    eigenvalues already exceed the floor.
    """
    S = np.asarray(S, dtype=float)
    floor = rel_floor * np.trace(S) / len(S)
    lam, V = np.linalg.eigh(S)
    if lam[0] > floor:
        return S, False
    log.warning("covariance not positive definite (min eigenvalue %.3e); clipping at %.3e", lam[0], floor)
    out = (V * np.maximum(lam, floor)) @ V.T
    return (out + out.T) / 2, True


def _cliques(W: np.ndarray) -> list:
    g = nx.Graph()
    g.add_nodes_from(range(len(W)))
    g.add_edges_from(zip(*np.nonzero(np.triu(W, 1))))
    return [np.array(sorted(c)) for c in sorted(nx.find_cliques(g), key=min)]


def _objective(S, theta) -> float:
    sign, logdet = np.linalg.slogdet(theta)
    return logdet - float(np.sum(S * theta)) if sign > 0 else -np.inf


def structured_precision(S, W, tol: float = 1e-8, max_sweeps: int = 500, return_trace: bool = False):
    """Gaussian MLE of the precision matrix with zeros wherever ``W`` is 0.

    Maximises ``log det Theta - tr(S Theta)`` subject to ``Theta_ij = 0`` for
    ``i != j`` with ``w_ij = 0``.  Each step matches ``Theta^{-1}`` to ``S``
    on one maximal clique of ``W``; sweeps stop once the largest mismatch
    on ``W`` and the diagonal is below ``tol``.

    Returns
    -------
    PrecisionModel with zero mean, and the list of objective values after
    each sweep if ``return_trace``.

    Raises
    ------
    ConvergenceError
        If ``max_sweeps`` sweeps do not reach ``tol``.
    """
    S = np.asarray(S, dtype=float)
    W = np.asarray(W, dtype=bool)
    p = len(S)
    if S.shape != (p, p) or W.shape != (p, p):
        raise InvalidArgumentError("S and W must be square and of equal size")
    if not np.array_equal(W, W.T):
        raise InvalidArgumentError("W must be symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError("S is not positive definite") from None
    W = W.copy()
    np.fill_diagonal(W, False)
    free = W | np.eye(p, dtype=bool)
    cliques = _cliques(W)

    theta = np.diag(1.0 / np.diag(S))
    sigma = np.diag(np.diag(S)).astype(float)
    trace = [_objective(S, theta)]
    gap = np.inf
    for sweep in range(max_sweeps):
        for C in cliques:
            ix = np.ix_(C, C)
            sig_cc = sigma[ix]
            theta[ix] += linalg.inv(S[ix]) - linalg.inv(sig_cc)
            # Sigma update keeps Sigma = Theta^{-1}; its C block becomes S_CC.
            left = linalg.solve(sig_cc, sigma[C, :], assume_a="pos")
            sigma += left.T @ (S[ix] - sig_cc) @ left
            sigma = (sigma + sigma.T) / 2
        theta = (theta + theta.T) / 2
        sigma = linalg.inv(theta)
        sigma = (sigma + sigma.T) / 2
        trace.append(_objective(S, theta))
        gap = float(np.max(np.abs(sigma - S)[free]))
        if gap < tol:
            break
    else:
        raise ConvergenceError(f"structured precision did not converge in {max_sweeps} sweeps", gap)
    theta[~free] = 0.0
    model = PrecisionModel(mu0=np.zeros(p), Q=theta)
    return (model, trace) if return_trace else model


def whiten(data, S) -> DataMatrix:
    """Rows ``x_t`` mapped to ``S^{-1/2} x_t`` (symmetric inverse square root)."""
    dm = data if isinstance(data, DataMatrix) else DataMatrix(data)
    S = np.asarray(S, dtype=float)
    if S.shape != (dm.p, dm.p):
        raise InvalidArgumentError("S has the wrong dimension")
    lam, V = np.linalg.eigh((S + S.T) / 2)
    if lam[0] <= 0:
        raise NumericalError("S is not positive definite")
    root = (V / np.sqrt(lam)) @ V.T
    return DataMatrix(dm.values @ root, dm.column_names)


@dataclass(frozen=True)
class RobustEstimates:
    mu0_hat: np.ndarray
    S: np.ndarray
    Q_hat: PrecisionModel
    repaired: bool = False

    def model(self) -> PrecisionModel:
        """Precision model with the robust baseline as its mean."""
        return PrecisionModel(mu0=self.mu0_hat, Q=self.Q_hat.Q)


def estimate_model(data, W, mad_constant: float = MAD_CONSTANT, repair: bool = True,
                   tol: float = 1e-8, max_sweeps: int = 500) -> RobustEstimates:
    """Robust baseline, covariance and structured precision in one call.

    With ``repair`` a non positive definite covariance is clipped (and
    flagged) before the precision fit; without it a :class:`NumericalError`
    is raised.
    """
    dm = data if isinstance(data, DataMatrix) else DataMatrix(data)
    mu0 = robust_baseline(dm)
    S = robust_covariance(dm, mad_constant)
    repaired = False
    if repair:
        S_fit, repaired = repair_pd(S)
    else:
        S_fit = S
    Q = structured_precision(S_fit, W, tol=tol, max_sweeps=max_sweeps)
    return RobustEstimates(mu0_hat=mu0, S=S_fit, Q_hat=PrecisionModel(mu0=mu0, Q=Q.Q), repaired=repaired)
