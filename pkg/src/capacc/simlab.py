"""Simulation models, anomaly injection, penalty tuning and evaluation metrics.

Random streams come from numpy's ``default_rng`` (PCG64).  Replicate ``i`` of
a study seeded with ``seed`` uses the ``i``-th child of
``SeedSequence(seed)``, so results do not depend on execution order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .anomaly import detect
from .changepoint import detect_single
from .core import (
    AnomalySet,
    CollectiveAnomaly,
    DataMatrix,
    InvalidArgumentError,
    NumericalError,
    PenaltyScheme,
    PointAnomaly,
    PrecisionModel,
    as_values,
    default_penalties,
)
from .graph import banded_adjacency, lattice_adjacency, plan_for
from .saving import (
    SegmentSums,
    approx_cpt_savings,
    approx_saving,
    approx_savings,
    compensated_cumsum,
    point_savings,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Precision models


def car_precision(W, rho: float) -> PrecisionModel:
    """Standardised CAR precision ``D^{1/2} (diag(W 1) - rho W) D^{1/2}``.

    ``D`` holds the diagonal of ``(diag(W 1) - rho W)^{-1}``, so the
    returned precision has a correlation matrix as its inverse.
    """
    W = np.asarray(W, dtype=float)
    if not 0 < rho < 1:
        raise InvalidArgumentError("rho must lie in (0, 1)")
    Q = np.diag(W.sum(axis=1)) - rho * W
    try:
        factor = linalg.cho_factor(Q)
    except linalg.LinAlgError:
        raise NumericalError("CAR precision is not positive definite (isolated nodes?)") from None
    d = np.sqrt(np.diag(linalg.cho_solve(factor, np.eye(len(Q)))))
    return PrecisionModel(mu0=np.zeros(len(Q)), Q=d[:, None] * Q * d[None, :])


def constant_correlation_precision(p: int, rho: float) -> PrecisionModel:
    """Inverse of ``rho 11' + (1 - rho) I`` in closed form."""
    if p < 1:
        raise InvalidArgumentError("p must be positive")
    lower = -1.0 / (p - 1) if p > 1 else -math.inf
    if not lower < rho < 1:
        raise InvalidArgumentError(f"rho must lie in ({lower}, 1)")
    Q = (np.eye(p) - rho / (1 - rho + p * rho) * np.ones((p, p))) / (1 - rho)
    return PrecisionModel(mu0=np.zeros(p), Q=Q)


@dataclass(frozen=True)
class PrecisionSpec:
    """``kind`` is one of ``identity``, ``banded`` (uses ``r``), ``lattice``
    (uses ``m``, with ``p = m^2``) or ``constant``."""

    kind: str = "identity"
    rho: float = 0.0
    r: int = 1
    m: Optional[int] = None

    def build(self, p: int) -> PrecisionModel:
        if self.kind == "identity":
            return PrecisionModel.identity(p)
        if self.kind == "banded":
            return car_precision(banded_adjacency(p, self.r), self.rho)
        if self.kind == "lattice":
            m = self.m if self.m is not None else math.isqrt(p)
            if m * m != p:
                raise InvalidArgumentError(f"lattice needs p = m^2, got p={p}")
            return car_precision(lattice_adjacency(m), self.rho)
        if self.kind == "constant":
            return constant_correlation_precision(p, self.rho)
        raise InvalidArgumentError(f"unknown precision kind '{self.kind}'")


# ---------------------------------------------------------------------------
# Scenarios


CHANGE_CLASSES = ("mu_sigma", "mu_rho")


@dataclass(frozen=True)
class AnomalySpec:
    """Collective anomaly on ``(s, e]`` affecting 1-based variables ``J``."""

    s: int
    e: int
    J: tuple
    theta: float
    change_class: str = "mu_sigma"
    rho_c: float = 0.0


@dataclass(frozen=True)
class PointSpec:
    """Point anomaly at time ``t`` on ``count_vars`` random variables.

    Sizes are ``N(0, size_sd^2)``; ``size_sd`` defaults to ``sqrt(4 log p)``.
    """

    t: int
    count_vars: int
    size_sd: Optional[float] = None


@dataclass(frozen=True)
class SimScenario:
    n: int
    p: int
    precision: PrecisionSpec = field(default_factory=PrecisionSpec)
    anomalies: tuple = ()
    points: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.p < 1:
            raise InvalidArgumentError("need n >= 2 and p >= 1")
        spans = sorted((a.s, a.e) for a in self.anomalies)
        for a in self.anomalies:
            if not 0 <= a.s < a.e <= self.n or a.e - a.s < 2:
                raise InvalidArgumentError(f"invalid anomaly window ({a.s}, {a.e}]")
            if not a.theta > 0:
                raise InvalidArgumentError("signal strength must be positive")
            if not a.J or min(a.J) < 1 or max(a.J) > self.p:
                raise InvalidArgumentError("anomaly variables must lie in 1..p")
            if a.change_class not in CHANGE_CLASSES:
                raise InvalidArgumentError(f"unknown change class '{a.change_class}'")
            if a.change_class == "mu_rho" and not 0 <= a.rho_c <= 1:
                raise InvalidArgumentError("rho_c must lie in [0, 1]")
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            if e1 > s2:
                raise InvalidArgumentError("anomaly windows overlap")
        for pt in self.points:
            if not 1 <= pt.t <= self.n or not 1 <= pt.count_vars <= self.p:
                raise InvalidArgumentError(f"invalid point anomaly at t={pt.t}")
            if any(s < pt.t <= e for s, e in spans):
                raise InvalidArgumentError(f"point anomaly at t={pt.t} inside a collective anomaly")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        return cls(
            n=int(d["n"]),
            p=int(d["p"]),
            precision=PrecisionSpec(**d.get("precision", {})),
            anomalies=tuple(
                AnomalySpec(**{**a, "J": tuple(int(j) for j in a["J"])}) for a in d.get("anomalies", [])
            ),
            points=tuple(PointSpec(**pt) for pt in d.get("points", [])),
            seed=int(d.get("seed", 0)),
        )


def replicate_seeds(seed: int, reps: int) -> list:
    """One independent 64-bit seed per replicate."""
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def random_point_specs(n: int, count: int, count_vars: int, rng, exclude: Sequence = (),
                       size_sd: Optional[float] = None) -> tuple:
    """``count`` point anomalies at distinct times outside the ``exclude`` windows."""
    free = np.ones(n, dtype=bool)
    for s, e in exclude:
        free[s:e] = False
    times = np.flatnonzero(free) + 1
    if len(times) < count:
        raise InvalidArgumentError("not enough free time points for the point anomalies")
    chosen = np.sort(rng.choice(times, size=count, replace=False))
    return tuple(PointSpec(int(t), count_vars, size_sd) for t in chosen)


def _noise_factor(model: PrecisionModel) -> Optional[np.ndarray]:
    if np.array_equal(model.Q, np.eye(model.p)):
        return None
    return np.linalg.cholesky(model.covariance())


def sample_null(model: PrecisionModel, n: int, rng, factor=None) -> np.ndarray:
    """``n`` independent draws from ``N(mu0, Q^{-1})``."""
    z = rng.standard_normal((n, model.p))
    if factor is None:
        factor = _noise_factor(model)
    if factor is not None:
        z = z @ factor.T
    return z + model.mu0


def _anomalous_mean(spec: AnomalySpec, sigma: np.ndarray, rng) -> np.ndarray:
    J = np.array(spec.J) - 1
    if spec.change_class == "mu_sigma":
        mu = rng.multivariate_normal(np.zeros(len(J)), sigma[np.ix_(J, J)], method="cholesky")
    else:
        # Covariance rho_c 11' + (1 - rho_c) I.
        mu = math.sqrt(spec.rho_c) * rng.standard_normal() + math.sqrt(1 - spec.rho_c) * rng.standard_normal(len(J))
    norm = np.linalg.norm(mu)
    if norm == 0:
        raise NumericalError("sampled anomalous mean is zero")
    return mu * (spec.theta / norm)


def sample_scenario(scenario: SimScenario, model: Optional[PrecisionModel] = None) -> tuple:
    """Draw one dataset and its ground truth.

    ``model`` overrides ``scenario.precision`` (saves rebuilding it in loops).

    Returns
    -------
    (DataMatrix, AnomalySet)
        Ground-truth savings are ``(e - s) mu' Q_JJ mu`` for collective and
        ``delta' Q_JJ delta`` for point anomalies.
    """
    model = model if model is not None else scenario.precision.build(scenario.p)
    if model.p != scenario.p:
        raise InvalidArgumentError("model dimension does not match scenario")
    rng = np.random.default_rng(scenario.seed)
    sigma = model.covariance()
    x = sample_null(model, scenario.n, rng, _noise_factor(model))
    Q = model.Q
    collective = []
    for spec in scenario.anomalies:
        J = np.array(spec.J) - 1
        mu = _anomalous_mean(spec, sigma, rng)
        x[spec.s:spec.e, J] += mu
        saving = (spec.e - spec.s) * float(mu @ Q[np.ix_(J, J)] @ mu)
        collective.append(CollectiveAnomaly(spec.s, spec.e, tuple(sorted(spec.J)), tuple(mu.tolist()), saving))
    points = []
    for spec in scenario.points:
        sd = spec.size_sd if spec.size_sd is not None else math.sqrt(4 * math.log(scenario.p))
        J = np.sort(rng.choice(scenario.p, size=spec.count_vars, replace=False))
        delta = rng.normal(0.0, sd, size=len(J)) if sd > 0 else np.zeros(len(J))
        x[spec.t - 1, J] += delta
        saving = float(delta @ Q[np.ix_(J, J)] @ delta)
        if saving > 0:
            points.append(PointAnomaly(spec.t, tuple(int(j) + 1 for j in J), saving))
    return DataMatrix(x), AnomalySet(tuple(collective), tuple(points), 0.0)


# ---------------------------------------------------------------------------
# Metrics


def _comb2(k) -> float:
    k = np.asarray(k, dtype=float)
    return float(np.sum(k * (k - 1) / 2))


def adjusted_rand_index(labels_true, labels_pred) -> float:
    """Hubert-Arabie adjusted Rand index of two labelings.

    When the index is undefined (both partitions trivial in the same way)
    it is 1 for identical partitions and 0 otherwise.
    """
    a = np.asarray(labels_true)
    b = np.asarray(labels_pred)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError("label vectors must have equal length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    index = _comb2(table)
    sa, sb = _comb2(table.sum(axis=1)), _comb2(table.sum(axis=0))
    expected = sa * sb / _comb2(len(a)) if len(a) > 1 else 0.0
    top = (sa + sb) / 2
    if top == expected:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        return 1.0 if same else 0.0
    return float((index - expected) / (top - expected))


def subset_metrics(J_true, J_pred) -> tuple:
    """(precision, recall) of a predicted variable subset.

    Precision is 0 for an empty prediction unless the truth is empty too;
    recall is 1 for an empty truth.
    """
    t, q = set(J_true), set(J_pred)
    hit = len(t & q)
    precision = hit / len(q) if q else (1.0 if not t else 0.0)
    recall = hit / len(t) if t else 1.0
    return precision, recall


@dataclass(frozen=True)
class EvaluationReport:
    ari: float = math.nan
    subset_precision: float = math.nan
    subset_recall: float = math.nan
    power: float = math.nan
    false_positive_rate: float = math.nan
    rmse_tau: float = math.nan

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_anomalies(truth: AnomalySet, found: AnomalySet, n: int) -> EvaluationReport:
    """Compare detected anomalies with the ground truth of one dataset.

    ``power`` is the share of true collective anomalies overlapped by a
    detected one, ``false_positive_rate`` the share of detected collective
    anomalies overlapping none.  Subset metrics average over the detected
    true anomalies, each matched with its largest-overlap detection.
    """
    ari = adjusted_rand_index(truth.labels(n), found.labels(n))

    def overlap(a, b):
        return max(0, min(a.e, b.e) - max(a.s, b.s))

    hits, precisions, recalls = 0, [], []
    for a in truth.collective:
        best = max(found.collective, key=lambda b: overlap(a, b), default=None)
        if best is not None and overlap(a, best) > 0:
            hits += 1
            pr, rc = subset_metrics(a.J, best.J)
            precisions.append(pr)
            recalls.append(rc)
    false = sum(all(overlap(a, b) == 0 for a in truth.collective) for b in found.collective)
    return EvaluationReport(
        ari=ari,
        subset_precision=float(np.mean(precisions)) if precisions else math.nan,
        subset_recall=float(np.mean(recalls)) if recalls else math.nan,
        power=hits / len(truth.collective) if truth.collective else math.nan,
        false_positive_rate=false / len(found.collective) if found.collective else 0.0,
    )


def summarise(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Field-wise means, ignoring undefined entries."""
    out = {}
    for name in EvaluationReport.__dataclass_fields__:
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        out[name] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else math.nan
    return EvaluationReport(**out)


def rmse(estimates, target) -> float:
    est = np.asarray(estimates, dtype=float)
    return float(np.sqrt(np.mean((est - target) ** 2)))


# ---------------------------------------------------------------------------
# Detectors and critical scales

DETECTOR_KINDS = ("anomaly", "segment", "cpt")


@dataclass(frozen=True)
class DetectorConfig:
    """A detector whose penalties scale with one factor ``b``.

    ``kind`` selects the full anomaly detector, the saving of one known
    segment ``(s, e]`` (``segment`` attribute), or the single changepoint
    statistic.  Point penalties use ``b' = point_ratio * b``.
    """

    model: PrecisionModel
    kind: str = "anomaly"
    min_len: int = 2
    max_len: Optional[int] = None
    points: bool = True
    point_ratio: float = 1.0
    segment: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise InvalidArgumentError(f"unknown detector kind '{self.kind}'")
        if self.kind == "segment" and self.segment is None:
            raise InvalidArgumentError("segment detector needs (s, e)")

    @property
    def plan(self):
        return plan_for(self.model)

    def scheme(self, n: int, p: int, b: float) -> PenaltyScheme:
        return default_penalties(n, p, b, b * self.point_ratio)

    def run(self, data, b: float = 1.0):
        """Apply the detector at scale ``b``."""
        values = as_values(data)
        n, p = values.shape
        scheme = self.scheme(n, p, b)
        if self.kind == "anomaly":
            return detect(values, self.model, self.plan, scheme, self.min_len, self.max_len, points=self.points)
        if self.kind == "cpt":
            return detect_single(values, self.model, self.plan, scheme, self.min_len)
        s, e = self.segment
        stats = SegmentSums(values, self.model.mu0).stats(s, e)
        return approx_saving(self.model.Q, self.plan, stats, scheme)

    def detects(self, data, b: float = 1.0) -> bool:
        res = self.run(data, b)
        if self.kind == "anomaly":
            return bool(res.collective or res.points)
        if self.kind == "cpt":
            return res.detected
        return res.value > 0

    def critical_scale(self, data) -> float:
        """Supremum of the scales ``b`` at which the detector reports something.

        The detector fires at ``b`` exactly when ``b`` is below this value.
        """
        values = as_values(data)
        n, p = values.shape
        unit = self.scheme(n, p, 1.0)
        Q, plan = self.model.Q, self.plan
        if self.kind == "segment":
            s, e = self.segment
            mean = SegmentSums(values, self.model.mu0).stats(s, e).mean
            return float(segment_critical_scales(Q, plan, mean[None, :], e - s, unit)[0])
        if self.kind == "cpt":
            return _cpt_critical_scale(values, Q, plan, unit, self.min_len)
        return _anomaly_critical_scale(values - self.model.mu0, Q, plan, unit, self.min_len,
                                       self.max_len or n, self.points)

    def segment_critical_scales(self, datasets) -> np.ndarray:
        """Critical scales of a ``segment`` detector for many datasets at once."""
        if self.kind != "segment":
            raise InvalidArgumentError("only available for segment detectors")
        s, e = self.segment
        arr = np.stack([as_values(d) for d in datasets])
        n, p = arr.shape[1:]
        means = arr[:, s:e].mean(axis=1) - self.model.mu0
        return segment_critical_scales(self.model.Q, self.plan, means, e - s, self.scheme(n, p, 1.0))


def _unit_penalty(unit: PenaltyScheme, sizes: np.ndarray) -> np.ndarray:
    return np.minimum(unit.alpha_sparse + unit.beta * sizes, unit.alpha_dense)


def _ratio_iterations(solve, unit: PenaltyScheme, b0: np.ndarray) -> np.ndarray:
    """Dinkelbach iterations for ``max_J S~(J) / P(|J|)`` row-wise.

    ``solve(rows, b)`` returns the SavingBatch at penalty scale ``b``.  A
    row stops once its penalised saving at the current ratio is <= 0.
    """
    b = np.array(b0, dtype=float)
    active = np.arange(len(b))
    while len(active):
        batch = solve(active, b[active])
        pos = np.flatnonzero(batch.values > 0)
        if not len(pos):
            break
        rows = active[pos]
        sizes = batch.sizes(pos)
        used = np.where(batch.dense[pos], unit.alpha_dense, unit.alpha_sparse + unit.beta * sizes)
        gain = batch.values[pos] + b[rows] * used
        new = gain / _unit_penalty(unit, sizes)
        grew = new > b[rows] * (1 + 1e-13)
        b[rows] = np.maximum(b[rows], new)
        active = rows[grew]
    return b


def segment_critical_scales(Q, plan, means, lengths, unit: PenaltyScheme, b0=0.0) -> np.ndarray:
    """Largest penalty scale at which each segment's penalised saving is positive.

    Rows whose critical scale does not exceed ``b0`` return ``b0``.
    """
    means = np.atleast_2d(means)
    lengths = np.broadcast_to(np.asarray(lengths, dtype=float), (len(means),))

    def solve(rows, b):
        return approx_savings(Q, plan, means[rows], lengths[rows],
                              unit.alpha_sparse * b, unit.beta * b, unit.alpha_dense * b)

    start = np.maximum(b0, 1e-300)
    return _ratio_iterations(solve, unit, np.full(len(means), start))


_CHUNK_ROWS = 4096


def _anomaly_critical_scale(centred, Q, plan, unit, min_len, max_len, points) -> float:
    n = len(centred)
    cum = compensated_cumsum(centred)
    starts, ends = [], []
    for L in range(min_len, min(max_len, n) + 1):
        s = np.arange(0, n - L + 1)
        starts.append(s)
        ends.append(s + L)
    starts = np.concatenate(starts)
    ends = np.concatenate(ends)
    lengths = (ends - starts).astype(float)
    means = (cum[ends] - cum[starts]) / lengths[:, None]
    full = lengths * np.einsum("ki,ij,kj->k", means, Q, means)
    best = float(np.max(full)) / unit.alpha_dense if len(full) else 0.0
    upper = full / _unit_penalty(unit, np.ones(1))[0]
    order = np.argsort(-upper, kind="stable")
    for lo in range(0, len(order), _CHUNK_ROWS):
        rows = order[lo:lo + _CHUNK_ROWS]
        rows = rows[upper[rows] > best]
        if not len(rows):
            break
        crit = segment_critical_scales(Q, plan, means[rows], lengths[rows], unit, best)
        best = max(best, float(crit.max()))
    if points:
        bp = unit.beta_point
        full_pt = np.einsum("ki,ij,kj->k", centred, Q, centred)
        rows = np.flatnonzero(full_pt / bp > best)
        if len(rows):
            x = centred[rows]
            b = np.full(len(rows), max(best, 1e-300))
            active = np.arange(len(rows))
            while len(active):
                batch = point_savings(Q, plan, x[active], bp * b[active])
                pos = np.flatnonzero(batch.values > 0)
                if not len(pos):
                    break
                r = active[pos]
                sizes = batch.sizes(pos)
                new = (batch.values[pos] + b[r] * bp * sizes) / (bp * sizes)
                grew = new > b[r] * (1 + 1e-13)
                b[r] = np.maximum(b[r], new)
                active = r[grew]
            best = max(best, float(b.max()))
    return best


def _cpt_critical_scale(values, Q, plan, unit, min_len) -> float:
    n = len(values)
    x = values - values.mean(axis=0)
    cum = compensated_cumsum(x)
    taus = np.arange(min_len, n - min_len + 1)
    left = cum[taus] / taus[:, None]
    right = (cum[n] - cum[taus]) / (n - taus)[:, None]
    full = taus * np.einsum("ki,ij,kj->k", left, Q, left) + (n - taus) * np.einsum("ki,ij,kj->k", right, Q, right)
    best = float(full.max()) / unit.alpha_dense

    def solve(rows, b):
        return approx_cpt_savings(Q, plan, left[rows], taus[rows], right[rows], n - taus[rows],
                                  unit.alpha_sparse * b, unit.beta * b, unit.alpha_dense * b)

    crit = _ratio_iterations(solve, unit, np.full(len(taus), max(best, 1e-300)))
    return float(crit.max())


# ---------------------------------------------------------------------------
# Tuning


@dataclass(frozen=True)
class TuneResult:
    b: float
    alpha_hat: float
    within_band: bool
    critical: np.ndarray = field(repr=False)

    def alpha_at(self, b: float) -> float:
        return float(np.mean(self.critical > b))


def null_critical_scales(null_model: PrecisionModel, n: int, reps: int, config: DetectorConfig,
                         seed: int = 0) -> np.ndarray:
    """Critical scales of ``config`` on ``reps`` datasets drawn from ``null_model``."""
    factor = _noise_factor(null_model)
    datasets = (sample_null(null_model, n, np.random.default_rng(s), factor) for s in replicate_seeds(seed, reps))
    if config.kind == "segment":
        return config.segment_critical_scales(list(datasets))
    return np.array([config.critical_scale(d) for d in datasets])


def tune_scale(null_model: PrecisionModel, n: int, p: int, target_alpha: float, delta: float, reps: int,
               config: DetectorConfig, seed: int = 0, bounds=(0.1, 100.0), critical=None) -> TuneResult:
    """Scale ``b`` giving false-positive probability ``target_alpha`` on null data.

    The same pool of ``reps`` null datasets serves every ``b``.  Bisection
    (on log ``b``) narrows down to the smallest ``b`` whose estimated rate
    does not exceed ``target_alpha``; ``within_band`` reports whether that
    rate lies within ``delta`` of the target.

    Raises
    ------
    InvalidArgumentError
        If ``bounds`` do not bracket the target rate.
    """
    if not 0 < target_alpha < 1:
        raise InvalidArgumentError("target_alpha must lie in (0, 1)")
    if reps < 100:
        raise InvalidArgumentError("need at least 100 replicates")
    if null_model.p != p or config.model.p != p:
        raise InvalidArgumentError("model dimensions do not match p")
    if critical is None:
        critical = null_critical_scales(null_model, n, reps, config, seed)
    critical = np.asarray(critical, dtype=float)

    def rate(b):
        return float(np.mean(critical > b))

    lo, hi = bounds
    if rate(lo) <= target_alpha or rate(hi) > target_alpha:
        raise InvalidArgumentError(
            f"bounds {bounds} do not bracket alpha={target_alpha} "
            f"(rates {rate(lo):.3f} and {rate(hi):.3f})"
        )
    for _ in range(200):
        if hi / lo < 1 + 1e-9:
            break
        mid = math.sqrt(lo * hi)
        if rate(mid) > target_alpha:
            lo = mid
        else:
            hi = mid
    achieved = rate(hi)
    within = abs(achieved - target_alpha) <= delta
    if not within:
        log.warning("tuned rate %.4f outside %.3f +- %.3f", achieved, target_alpha, delta)
    return TuneResult(b=hi, alpha_hat=achieved, within_band=within, critical=critical)


@dataclass(frozen=True)
class CountTuneResult:
    b: float
    count: int
    attained: bool
    warnings: tuple = ()


def count_based_tune(data, config: DetectorConfig, target_K: int, grid=None) -> CountTuneResult:
    """Smallest ``b`` on a geometric grid giving at most ``target_K`` collective anomalies."""
    if target_K < 0:
        raise InvalidArgumentError("target_K must be non-negative")
    if config.kind != "anomaly":
        raise InvalidArgumentError("count-based tuning needs an anomaly detector")
    grid = np.geomspace(0.1, 100.0, 61) if grid is None else np.sort(np.asarray(grid, dtype=float))
    counts = [len(config.run(data, b).collective) for b in grid]
    warnings = []
    for b0, b1, c0, c1 in zip(grid, grid[1:], counts, counts[1:]):
        if c1 > c0:
            msg = f"count rose from {c0} to {c1} between b={b0:.4g} and b={b1:.4g}"
            log.warning(msg)
            warnings.append(msg)
    ok = [i for i, c in enumerate(counts) if c <= target_K]
    if not ok:
        i = int(np.argmin(counts))
        return CountTuneResult(float(grid[i]), counts[i], False, tuple(warnings + ["target count not reached"]))
    i = ok[0]
    attained = counts[i] == target_K
    if not attained:
        warnings.append(f"count {target_K} not attainable on the grid; nearest is {counts[i]}")
    return CountTuneResult(float(grid[i]), counts[i], attained, tuple(warnings))


# ---------------------------------------------------------------------------
# Power curves


def known_segment_power(true_model: PrecisionModel, configs: dict, n: int, s: int, e: int, J: tuple,
                        thetas: Sequence[float], reps: int, change_class: str = "mu_sigma", rho_c: float = 0.0,
                        target_alpha: float = 0.05, delta: float = 0.02, tune_reps: Optional[int] = None,
                        seed: int = 0) -> list:
    """Power of known-segment statistics over a grid of signal strengths.

    Each entry of ``configs`` (name -> model used by the statistic) is tuned
    on null data from ``true_model``; all methods see the same datasets.

    Returns
    -------
    list of dict with keys ``method``, ``parameter`` (tuned ``b``),
    ``theta``, ``power``, ``alpha_hat`` and ``within_band`` (tuning outcome).
    """
    p = true_model.p
    tune_reps = reps if tune_reps is None else tune_reps
    detectors = {
        name: DetectorConfig(model=m, kind="segment", segment=(s, e)) for name, m in configs.items()
    }
    tuned = {
        name: tune_scale(true_model, n, p, target_alpha, delta, tune_reps, det, seed=seed)
        for name, det in detectors.items()
    }
    rows = []
    seeds = np.random.SeedSequence(seed).spawn(len(thetas) + 1)[1:]
    for theta, ss in zip(thetas, seeds):
        scen_seeds = replicate_seeds(int(ss.generate_state(1)[0]), reps)
        spec = AnomalySpec(s, e, tuple(J), float(theta), change_class, rho_c)
        data = [
            sample_scenario(SimScenario(n, p, anomalies=(spec,), seed=sd), true_model)[0].values
            for sd in scen_seeds
        ]
        for name, det in detectors.items():
            crit = det.segment_critical_scales(data)
            rows.append({
                "method": name,
                "parameter": tuned[name].b,
                "theta": float(theta),
                "power": float(np.mean(crit > tuned[name].b)),
                "alpha_hat": tuned[name].alpha_hat,
                "within_band": tuned[name].within_band,
            })
    return rows
