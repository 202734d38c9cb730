"""Exact and approximate penalised savings for candidate segments.

The saving of a segment ``(s, e]`` in subset ``J`` is the drop in
``sum_t (x_t - mu)' Q (x_t - mu)`` when the means in ``J`` are fitted
instead of fixed at the baseline.  The approximation replaces the subset
MLE by the subset-truncated sample mean, which turns the search over
subsets into a banded binary quadratic program.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .bqp import BqpInstance, solve_banded_bqp, solve_banded_bqp_batch
from .core import InvalidArgumentError, NumericalError, PenaltyScheme, as_values
from .graph import NeighborhoodPlan, build_plan

_BLOCK = 64


def compensated_cumsum(x: np.ndarray) -> np.ndarray:
    """Prefix sums along axis 0 with a leading zero row.

    Plain cumulative sums inside short blocks, Kahan summation across block
    totals.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    out = np.zeros((n + 1,) + x.shape[1:])
    total = np.zeros(x.shape[1:])
    comp = np.zeros(x.shape[1:])
    for start in range(0, n, _BLOCK):
        block = np.cumsum(x[start:start + _BLOCK], axis=0)
        out[start + 1:start + 1 + len(block)] = total + block
        y = block[-1] - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return out


@dataclass(frozen=True)
class SegmentStats:
    mean: np.ndarray
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise InvalidArgumentError("segment length must be positive")


class SegmentSums:
    """Centred prefix sums for O(p) segment-mean queries."""

    def __init__(self, data, mu0=None):
        values = as_values(data)
        self.n, self.p = values.shape
        centred = values if mu0 is None else values - np.asarray(mu0, dtype=float)
        self.cum = compensated_cumsum(centred)

    def _check(self, s, e):
        if not (0 <= s < e <= self.n):
            raise InvalidArgumentError(f"invalid segment ({s}, {e}] for n={self.n}")

    def stats(self, s: int, e: int) -> SegmentStats:
        self._check(s, e)
        return SegmentStats(mean=(self.cum[e] - self.cum[s]) / (e - s), length=e - s)

    def means(self, starts, ends) -> np.ndarray:
        starts = np.asarray(starts)
        ends = np.asarray(ends)
        return (self.cum[ends] - self.cum[starts]) / (ends - starts)[..., None]


def segment_stats(data, mu0, s: int, e: int) -> SegmentStats:
    """Mean of ``x_t - mu0`` over ``t = s+1..e``.

    Builds the prefix sums on every call; hold a :class:`SegmentSums` for
    repeated queries.
    """
    return SegmentSums(data, mu0).stats(s, e)


def _subset(J, p) -> np.ndarray:
    J = np.unique(np.asarray(J, dtype=np.int64))
    if len(J) and (J[0] < 0 or J[-1] >= p):
        raise InvalidArgumentError(f"subset indices must lie in 0..{p - 1}")
    return J


def subset_mle(Q: np.ndarray, mean: np.ndarray, J) -> np.ndarray:
    """MLE of the means in ``J`` when the others are fixed at zero."""
    Q = np.asarray(Q, dtype=float)
    mean = np.asarray(mean, dtype=float)
    J = _subset(J, len(mean))
    if len(J) == 0:
        raise InvalidArgumentError("subset must be non-empty")
    rest = np.setdiff1d(np.arange(len(mean)), J)
    if len(rest) == 0:
        return mean.copy()
    try:
        factor = linalg.cho_factor(Q[np.ix_(J, J)])
    except linalg.LinAlgError:
        raise NumericalError("Q restricted to the subset is not positive definite") from None
    return mean[J] + linalg.cho_solve(factor, Q[np.ix_(J, rest)] @ mean[rest])


def exact_saving(Q: np.ndarray, stats: SegmentStats, J) -> float:
    """Unpenalised saving with the exact subset MLE plugged in."""
    p = len(stats.mean)
    J = _subset(J, p)
    if len(J) == 0:
        return 0.0
    mu = np.zeros(p)
    mu[J] = subset_mle(Q, stats.mean, J)
    return float(stats.length * (2 * stats.mean - mu) @ Q @ mu)


def truncated_saving(Q: np.ndarray, stats: SegmentStats, J) -> float:
    """Unpenalised saving with the subset-truncated mean plugged in."""
    p = len(stats.mean)
    mu = np.zeros(p)
    J = _subset(J, p)
    mu[J] = stats.mean[J]
    return float(stats.length * (2 * stats.mean - mu) @ Q @ mu)


def _plan(Q, plan):
    return plan if plan is not None else build_plan(Q)


def build_anomaly_bqp(Q, stats: SegmentStats, scheme: PenaltyScheme, plan=None) -> BqpInstance:
    Q = np.asarray(Q, dtype=float)
    x, L = stats.mean, stats.length
    return BqpInstance(
        A=-L * np.outer(x, x) * Q,
        b=2 * L * x * (Q @ x) - scheme.beta,
        c=-scheme.alpha_sparse,
        plan=_plan(Q, plan),
    )


def build_cpt_bqp(Q, left: SegmentStats, right: SegmentStats, scheme: PenaltyScheme, plan=None) -> BqpInstance:
    Q = np.asarray(Q, dtype=float)
    x1, n1, x2, n2 = left.mean, left.length, right.mean, right.length
    return BqpInstance(
        A=-n1 * np.outer(x1, x1) * Q - n2 * np.outer(x2, x2) * Q,
        b=2 * n1 * x1 * (Q @ x1) + 2 * n2 * x2 * (Q @ x2) - scheme.beta,
        c=-scheme.alpha_sparse,
        plan=_plan(Q, plan),
    )


@dataclass(frozen=True)
class SavingResult:
    """Penalised saving with its maximising subset (0-based) and regime."""

    value: float
    subset: tuple
    regime: str

    @property
    def dense(self) -> bool:
        return self.regime == "dense"


def _choose(sparse_value, sparse_subset, dense_value, p, complete=True) -> SavingResult:
    if complete and sparse_value >= dense_value:
        return SavingResult(float(sparse_value), tuple(sparse_subset), "sparse")
    return SavingResult(float(dense_value), tuple(range(p)), "dense")


def approx_saving(Q, plan: NeighborhoodPlan, stats: SegmentStats, scheme: PenaltyScheme) -> SavingResult:
    """Approximate penalised saving of one segment.

    Solves the sparse-regime BQP and compares it with the exact dense value
    ``S(s, e, [p]) - alpha_dense``; the sparse branch wins ties.
    """
    Q = np.asarray(Q, dtype=float)
    sol = solve_banded_bqp(build_anomaly_bqp(Q, stats, scheme, plan), scheme.k_star)
    dense = exact_saving(Q, stats, np.arange(len(stats.mean))) - scheme.alpha_dense
    return _choose(sol.value, sol.subset, dense, len(stats.mean), sol.complete)


def cpt_saving(Q, plan: NeighborhoodPlan, left: SegmentStats, right: SegmentStats, scheme: PenaltyScheme) -> SavingResult:
    """Approximate penalised changepoint saving for one split."""
    Q = np.asarray(Q, dtype=float)
    sol = solve_banded_bqp(build_cpt_bqp(Q, left, right, scheme, plan), scheme.k_star)
    dense = (
        left.length * float(left.mean @ Q @ left.mean)
        + right.length * float(right.mean @ Q @ right.mean)
        - scheme.alpha_dense
    )
    return _choose(sol.value, sol.subset, dense, len(left.mean), sol.complete)


def point_saving_of(Q, plan: NeighborhoodPlan, x: np.ndarray, beta_point: float) -> SavingResult:
    """``max_J [S~(J) - beta_point |J|]`` for a single centred observation."""
    Q = np.asarray(Q, dtype=float)
    inst = BqpInstance(A=-np.outer(x, x) * Q, b=2 * x * (Q @ x) - beta_point, c=0.0, plan=plan)
    sol = solve_banded_bqp(inst)
    return SavingResult(sol.value, sol.subset, "sparse")


class SavingBatch:
    """Penalised savings for many instances sharing one precision matrix.

    Instances are solved in chunks; ``parts`` holds ``(offset, solution)``
    for each chunk so subsets can be rebuilt on demand.
    """

    def __init__(self, values, dense, parts, p):
        self.values = values
        self.dense = dense
        self._parts = parts
        self._p = p

    def __len__(self):
        return len(self.values)

    def _u(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        out = np.zeros((len(indices), self._p), dtype=np.int8)
        offsets = [off for off, _ in self._parts]
        which = np.searchsorted(offsets, indices, side="right") - 1
        for k in np.unique(which):
            sel = which == k
            off, sol = self._parts[k]
            out[sel] = sol.u(indices[sel] - off)
        return out

    def subset(self, i: int) -> tuple:
        if self.dense[i]:
            return tuple(range(self._p))
        return tuple(int(j) for j in np.flatnonzero(self._u([i])[0]))

    def sizes(self, indices=None) -> np.ndarray:
        """Sizes of the maximising subsets (all rows, or ``indices``)."""
        idx = np.arange(len(self.values)) if indices is None else np.asarray(indices, dtype=np.int64)
        out = np.full(len(idx), self._p, dtype=np.int64)
        sparse = np.flatnonzero(~self.dense[idx])
        if len(sparse):
            out[sparse] = self._u(idx[sparse]).sum(axis=1)
        return out


# Upper bound on the number of floats in one chunk's stack of A matrices.
_CHUNK_FLOATS = 1 << 21


def _weighted_terms(Q, means, weights):
    """Quadratic and linear BQP coefficients ``sum_k w_k x_k x_k' o Q`` etc."""
    Qx = means @ Q  # Q symmetric
    A = -(weights[:, None, None] * means[:, :, None] * means[:, None, :]) * Q
    lin = 2 * weights[:, None] * means * Qx
    quad = weights * np.einsum("ki,ki->k", means, Qx)
    return A, lin, quad


def _as_batch(v, K):
    return np.broadcast_to(np.asarray(v, dtype=float), (K,))


def _penalised_batch(Q, plan, groups, alpha_sparse, beta, alpha_dense) -> SavingBatch:
    """Solve the BQPs for ``groups`` = [(means, weights), ...] summed per row."""
    K, p = groups[0][0].shape
    beta = _as_batch(beta, K)
    alpha_sparse = _as_batch(alpha_sparse, K)
    sparse_vals = np.empty(K)
    full_value = np.empty(K)
    parts = []
    step = max(1, _CHUNK_FLOATS // (p * p))
    for lo in range(0, K, step):
        hi = min(K, lo + step)
        A = lin = quad = 0.0
        for means, weights in groups:
            a, l_, q = _weighted_terms(Q, means[lo:hi], weights[lo:hi])
            A, lin, quad = A + a, lin + l_, quad + q
        sol = solve_banded_bqp_batch(A, lin - beta[lo:hi, None], -alpha_sparse[lo:hi], plan)
        sparse_vals[lo:hi] = sol.values
        full_value[lo:hi] = quad
        parts.append((lo, sol))
    if alpha_dense is None:
        return SavingBatch(sparse_vals, np.zeros(K, dtype=bool), parts, p)
    dense_value = full_value - _as_batch(alpha_dense, K)
    dense = sparse_vals < dense_value
    return SavingBatch(np.where(dense, dense_value, sparse_vals), dense, parts, p)


def approx_savings(Q, plan, means, lengths, alpha_sparse, beta, alpha_dense) -> SavingBatch:
    """Vectorised :func:`approx_saving` over rows of ``means``.

    Penalty arguments may be scalars or per-row arrays.
    """
    Q = np.asarray(Q, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    lengths = _as_batch(lengths, len(means))
    return _penalised_batch(Q, plan, [(means, lengths)], alpha_sparse, beta, alpha_dense)


def approx_cpt_savings(Q, plan, left_means, left_lengths, right_means, right_lengths,
                       alpha_sparse, beta, alpha_dense) -> SavingBatch:
    """Vectorised :func:`cpt_saving` over rows of left and right means."""
    Q = np.asarray(Q, dtype=float)
    m1 = np.atleast_2d(np.asarray(left_means, dtype=float))
    m2 = np.atleast_2d(np.asarray(right_means, dtype=float))
    groups = [(m1, _as_batch(left_lengths, len(m1))), (m2, _as_batch(right_lengths, len(m2)))]
    return _penalised_batch(Q, plan, groups, alpha_sparse, beta, alpha_dense)


def point_savings(Q, plan, centred, beta_point) -> SavingBatch:
    """Vectorised point-anomaly savings for rows of centred observations."""
    Q = np.asarray(Q, dtype=float)
    centred = np.atleast_2d(np.asarray(centred, dtype=float))
    return _penalised_batch(Q, plan, [(centred, np.ones(len(centred)))], 0.0, beta_point, None)


def approximation_error_bound(Q, stats: SegmentStats, J_hat: Sequence[int]) -> float:
    """Upper bound on exact minus approximate penalised saving.

    ``J_hat`` is the maximiser of the exact penalised saving.

    ``(e - s) * lambda_max(Q W) * ||mean outside J_hat||^2`` where ``W``
    holds ``Q_JJ^{-1} Q_{J,-J}`` in rows ``J``, columns ``-J``.  ``Q W`` is
    zero outside columns ``-J`` and its ``(-J, -J)`` block is the symmetric
    PSD matrix ``Q_{-J,J} Q_JJ^{-1} Q_{J,-J}``, so its eigenvalues are those
    of that block plus zeros.
    """
    Q = np.asarray(Q, dtype=float)
    p = len(stats.mean)
    J = _subset(J_hat, p)
    rest = np.setdiff1d(np.arange(p), J)
    if len(rest) == 0:
        return 0.0
    if len(J) == 0:
        raise InvalidArgumentError("J_hat must be non-empty")
    QJJ = linalg.cho_factor(Q[np.ix_(J, J)])
    cross = Q[np.ix_(J, rest)]
    block = cross.T @ linalg.cho_solve(QJJ, cross)
    lam = max(float(np.linalg.eigvalsh((block + block.T) / 2)[-1]), 0.0)
    return stats.length * lam * float(stats.mean[rest] @ stats.mean[rest])


def exhaustive_penalised_saving(Q, stats: SegmentStats, scheme: PenaltyScheme, approximate: bool):
    """Brute-force ``max_J [S(J) - P(|J|)]`` over all subsets (``J`` may be empty).

    Returns ``(value, subset)``; used as a reference for small ``p``.
    """
    p = len(stats.mean)
    saving = truncated_saving if approximate else exact_saving
    best, arg = -scheme.alpha_sparse, ()
    for k in range(1, 1 << p):
        J = tuple(i for i in range(p) if k >> i & 1)
        pen = min(scheme.alpha_sparse + scheme.beta * len(J), scheme.alpha_dense)
        v = saving(Q, stats, J) - pen
        if v > best:
            best, arg = v, J
    return best, arg
