"""Multiple collective and point anomaly detection (CAPA-CC).

``C(m)``, the best penalised saving for ``x_1..x_m``, satisfies

    C(m) = max(C(m-1),
               max_t C(t) + S~(t, m)      for m - M <= t <= m - l,
               C(m-1) + S~'(m))

with ``C(0) = 0``.  A start point ``t`` is discarded from time ``m + l``
onwards once ``C(t) + S~(t, m) + alpha_dense <= C(m)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bqp import solve_banded_bqp
from .core import (
    AnomalySet,
    CollectiveAnomaly,
    InvalidArgumentError,
    PenaltyScheme,
    PointAnomaly,
    PrecisionModel,
    as_values,
    default_penalties,
    one_based,
)
from .graph import NeighborhoodPlan, plan_for
from .saving import (
    SavingResult,
    SegmentSums,
    approx_savings,
    build_anomaly_bqp,
    point_saving_of,
    point_savings,
    subset_mle,
)

log = logging.getLogger(__name__)

_NEVER = np.iinfo(np.int64).max
# Relative slack on the saving upper bound, covering rounding differences
# between the quadratic form and the BQP objective at the full set.
_SLACK = 1e-9


@dataclass
class PeltState:
    """Trace of one run of the anomaly recursion."""

    C: np.ndarray
    decisions: list
    evaluations: int = 0
    solved: int = 0
    pruned_count: int = 0
    candidate_sizes: list = field(default_factory=list)


def point_saving(data, model: PrecisionModel, plan: NeighborhoodPlan, scheme: PenaltyScheme, t: int) -> SavingResult:
    """Penalised saving of a point anomaly at time ``t`` (1-based)."""
    values = as_values(data)
    if not 1 <= t <= len(values):
        raise InvalidArgumentError(f"t must be in 1..{len(values)}")
    x = values[t - 1] - model.mu0
    return point_saving_of(model.Q, plan, x, scheme.beta_point)


def prune(C: np.ndarray, t: int, m: int, saving: float, scheme: PenaltyScheme) -> bool:
    """Whether start point ``t`` can be dropped for all ends ``m' >= m + l``.

    ``saving`` is ``S~(t, m)``; the test is
    ``C(t) + S~(t, m) + alpha_dense <= C(m)``.
    """
    return bool(C[t] + saving + scheme.alpha_dense <= C[m])


def _check_lengths(n, min_len, max_len):
    if min_len < 2:
        raise InvalidArgumentError("minimum segment length must be at least 2")
    if max_len < min_len:
        raise InvalidArgumentError("maximum segment length must be >= minimum length")
    if min_len > n:
        raise InvalidArgumentError("minimum segment length exceeds the series length")


def run_recursion(values, model, plan, scheme, min_len, max_len, pruning=True, points=True) -> PeltState:
    """Forward pass of the recursion.

    Each candidate's penalised saving lies between
    ``max(S(t, m, [p]) - alpha_dense, -alpha_sparse)`` and
    ``S(t, m, [p]) - P(1)``; only candidates whose upper bound reaches the
    best lower bound are solved exactly.  Skipped candidates enter the
    pruning test with their upper bound, which can only prune less.
    """
    n, p = values.shape
    Q = model.Q
    sums = SegmentSums(values, model.mu0)
    if points:
        pts = point_savings(Q, plan, values - model.mu0, scheme.beta_point)
        point_vals = pts.values
    C = np.zeros(n + 1)
    decisions: list = [None] * (n + 1)
    state = PeltState(C=C, decisions=decisions)
    remove_at = np.full(n + 1, _NEVER, dtype=np.int64)
    cand = np.zeros(0, dtype=np.int64)
    min_pen = min(scheme.alpha_sparse + scheme.beta, scheme.alpha_dense)
    for m in range(1, n + 1):
        if m - min_len >= 0:
            cand = np.append(cand, m - min_len)
        cand = cand[(cand >= m - max_len) & (remove_at[cand] > m)]
        best, choice = C[m - 1], None
        if len(cand):
            state.evaluations += len(cand)
            state.candidate_sizes.append(len(cand))
            means = sums.means(cand, m)
            lengths = m - cand
            full = lengths * np.einsum("ki,ij,kj->k", means, Q, means)
            upper = full - min_pen + _SLACK * (1 + np.abs(full))
            lower = np.maximum(full - scheme.alpha_dense, -scheme.alpha_sparse)
            savings = upper.copy()
            keep = np.flatnonzero(C[cand] + upper >= max(best, np.max(C[cand] + lower)))
            if len(keep):
                state.solved += len(keep)
                batch = approx_savings(
                    Q, plan, means[keep], lengths[keep],
                    scheme.alpha_sparse, scheme.beta, scheme.alpha_dense,
                )
                savings[keep] = batch.values
                totals = C[cand[keep]] + batch.values
                i = int(np.argmax(totals))
                if totals[i] > best:
                    best = totals[i]
                    choice = ("collective", int(cand[keep[i]]), batch.subset(i), float(batch.values[i]))
        if points and C[m - 1] + point_vals[m - 1] > best:
            best = C[m - 1] + point_vals[m - 1]
            choice = ("point", pts.subset(m - 1), float(point_vals[m - 1]))
        C[m] = best
        decisions[m] = choice
        if pruning and len(cand):
            drop = C[cand] + savings + scheme.alpha_dense <= C[m]
            if drop.any():
                hit = cand[drop]
                fresh = remove_at[hit] == _NEVER
                state.pruned_count += int(fresh.sum())
                remove_at[hit] = np.minimum(remove_at[hit], m + min_len)
    return state


def _refine(Q, plan, sums, s, e, scheme, J):
    inst = build_anomaly_bqp(Q, sums.stats(s, e), scheme, plan)
    u = solve_banded_bqp(inst).u
    return tuple(int(j) for j in np.flatnonzero(u)) or J


def detect(
    data,
    model: PrecisionModel,
    plan: Optional[NeighborhoodPlan] = None,
    scheme: Optional[PenaltyScheme] = None,
    min_len: int = 2,
    max_len: Optional[int] = None,
    pruning: bool = True,
    points: bool = True,
    refine_subsets: bool = False,
    return_state: bool = False,
):
    """Detect collective and point anomalies in the mean.

    Parameters
    ----------
    data : DataMatrix or array (n, p)
    model : PrecisionModel
        Baseline mean and precision matrix.
    plan : NeighborhoodPlan, optional
        Defaults to the plan of ``model``'s nonzero pattern.
    scheme : PenaltyScheme, optional
        Defaults to :func:`default_penalties` for the data size.
    min_len, max_len : int
        Allowed collective anomaly lengths; ``max_len`` defaults to ``n``.
    pruning : bool
        Drop start points that can no longer be optimal.
    points : bool
        Allow point anomalies.
    refine_subsets : bool
        Re-estimate each segment's subset under the sparse penalty only.
    return_state : bool
        Also return the :class:`PeltState` trace.

    Returns
    -------
    AnomalySet, or (AnomalySet, PeltState) if ``return_state``.
    Reported means are ``mu0`` plus the exact subset MLE on the segment.
    """
    values = as_values(data)
    n, p = values.shape
    if model.p != p:
        raise InvalidArgumentError(f"model has p={model.p}, data has p={p}")
    plan = plan if plan is not None else plan_for(model)
    scheme = scheme if scheme is not None else default_penalties(n, p)
    max_len = n if max_len is None else int(max_len)
    _check_lengths(n, min_len, max_len)

    state = run_recursion(values, model, plan, scheme, min_len, max_len, pruning, points)
    sums = SegmentSums(values, model.mu0)
    collective, pts = [], []
    m = n
    while m > 0:
        dec = state.decisions[m]
        if dec is None:
            m -= 1
        elif dec[0] == "point":
            pts.append(PointAnomaly(t=m, J=one_based(dec[1]), saving=dec[2]))
            m -= 1
        else:
            _, t, J, val = dec
            if refine_subsets:
                J = _refine(model.Q, plan, sums, t, m, scheme, J)
            mean = model.mu0[list(J)] + subset_mle(model.Q, sums.stats(t, m).mean, J)
            collective.append(CollectiveAnomaly(s=t, e=m, J=one_based(J), mean=tuple(mean.tolist()), saving=val))
            m = t
    log.debug("recursion: %d evaluations, %d pruned", state.evaluations, state.pruned_count)
    result = AnomalySet(collective=tuple(collective), points=tuple(pts), total_cost=float(state.C[n]))
    return (result, state) if return_state else result
