"""Single and multiple changepoints in the mean (CPT-CC).

The single-change statistic compares a two-segment fit at split ``tau`` with
a common zero mean, after centring each series.  Multiple changes are found
by plain binary segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InvalidArgumentError, PenaltyScheme, PrecisionModel, as_values, default_penalties, one_based
from .graph import NeighborhoodPlan, plan_for
from .saving import SavingResult, SegmentStats, approx_cpt_savings, compensated_cumsum, cpt_saving


@dataclass(frozen=True)
class ChangepointResult:
    """Best split of a series; ``tau`` is the last index of the left segment.

    ``J`` is 1-based.
    """

    tau: int
    J: tuple
    value: float
    detected: bool

    def to_dict(self) -> dict:
        return {"tau": self.tau, "J": list(self.J), "value": self.value, "detected": self.detected}


def _centre(values: np.ndarray, model: PrecisionModel, centre: bool) -> np.ndarray:
    return values - (values.mean(axis=0) if centre else model.mu0)


def cpt_statistic(
    data,
    model: PrecisionModel,
    plan: Optional[NeighborhoodPlan],
    scheme: PenaltyScheme,
    tau: int,
    centre: bool = True,
) -> SavingResult:
    """Approximate penalised saving of a change after observation ``tau``.

    With ``centre`` the columns are centred by their sample means (so a
    change is measured against a common mean); otherwise ``model.mu0`` is
    subtracted.
    """
    values = as_values(data)
    n = len(values)
    if not 1 <= tau <= n - 1:
        raise InvalidArgumentError(f"tau must be in 1..{n - 1}")
    x = _centre(values, model, centre)
    left = SegmentStats(x[:tau].mean(axis=0), tau)
    right = SegmentStats(x[tau:].mean(axis=0), n - tau)
    return cpt_saving(model.Q, plan if plan is not None else plan_for(model), left, right, scheme)


def _scan(x: np.ndarray, Q, plan, scheme, min_len: int):
    """Best split of the already centred block ``x``; returns (tau, J, value)."""
    n = len(x)
    cum = compensated_cumsum(x)
    taus = np.arange(min_len, n - min_len + 1)
    left = cum[taus] / taus[:, None]
    right = (cum[n] - cum[taus]) / (n - taus)[:, None]
    batch = approx_cpt_savings(
        Q, plan, left, taus, right, n - taus, scheme.alpha_sparse, scheme.beta, scheme.alpha_dense
    )
    i = int(np.argmax(batch.values))
    return int(taus[i]), batch.subset(i), float(batch.values[i])


def _check(n, min_len):
    if min_len < 1:
        raise InvalidArgumentError("minimum segment length must be at least 1")
    if n < 2 * min_len:
        raise InvalidArgumentError(f"need n >= 2 l, got n={n}, l={min_len}")


def detect_single(
    data,
    model: PrecisionModel,
    plan: Optional[NeighborhoodPlan] = None,
    scheme: Optional[PenaltyScheme] = None,
    min_len: int = 1,
    centre: bool = True,
) -> ChangepointResult:
    """Maximise the changepoint statistic over ``l <= tau <= n - l``.

    The smallest maximising ``tau`` is returned.
    """
    values = as_values(data)
    n, p = values.shape
    _check(n, min_len)
    plan = plan if plan is not None else plan_for(model)
    scheme = scheme if scheme is not None else default_penalties(n, p)
    tau, J, value = _scan(_centre(values, model, centre), model.Q, plan, scheme, min_len)
    return ChangepointResult(tau=tau, J=one_based(J), value=value, detected=value > 0)


def detect_multiple(
    data,
    model: PrecisionModel,
    plan: Optional[NeighborhoodPlan] = None,
    scheme: Optional[PenaltyScheme] = None,
    min_len: int = 1,
    segment_penalties: bool = False,
    baseline: str = "segment",
) -> list:
    """Binary segmentation with the single-change statistic.

    Parameters
    ----------
    segment_penalties : bool
        Recompute default penalties for each sub-segment length (keeping the
        scaling factors of ``scheme``); by default ``scheme`` is used as is.
    baseline : {"segment", "global"}
        Centre each sub-segment by its own column means, or every
        sub-segment by the column means of the full series.

    Returns
    -------
    list of ChangepointResult
        Detected changes sorted by ``tau`` (global indices).
    """
    values = as_values(data)
    n, p = values.shape
    _check(n, min_len)
    if baseline not in ("segment", "global"):
        raise InvalidArgumentError("baseline must be 'segment' or 'global'")
    plan = plan if plan is not None else plan_for(model)
    scheme = scheme if scheme is not None else default_penalties(n, p)
    global_mean = values.mean(axis=0)
    found = []
    stack = [(0, n)]
    while stack:
        s, e = stack.pop()
        if e - s < 2 * min_len:
            continue
        block = values[s:e]
        x = block - (block.mean(axis=0) if baseline == "segment" else global_mean)
        sch = scheme
        if segment_penalties:
            sch = default_penalties(e - s, p, scheme.scale_b, scheme.scale_b_point)
        tau, J, value = _scan(x, model.Q, plan, sch, min_len)
        if value <= 0:
            continue
        found.append(ChangepointResult(tau=s + tau, J=one_based(J), value=value, detected=True))
        stack.append((s + tau, e))
        stack.append((s, s + tau))
    return sorted(found, key=lambda c: c.tau)
