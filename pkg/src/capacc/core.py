"""Shared data model: observations, precision models, penalties and results.

Time indexing follows the ``(s, e]`` convention: a segment with start ``s``
and end ``e`` covers observations ``s + 1, ..., e`` (1-based), which is the
numpy slice ``values[s:e]``.  Variable subsets stored in result objects
(:class:`CollectiveAnomaly`, :class:`PointAnomaly`) are 1-based; lower-level
numerical routines work with 0-based column indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SYMMETRY_TOL = 1e-10
ZERO_TOL = 1e-12


class InvalidArgumentError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a numerical routine meets an ill-posed input."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver does not converge.

    The last convergence measure is kept in ``gap``.
    """

    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (final gap {gap:.3e})")
        self.gap = gap


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DataMatrix:
    """An ``n x p`` panel of observations, rows in time order."""

    values: np.ndarray
    column_names: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise InvalidArgumentError("data must be a 2-d array")
        n, p = values.shape
        if n < 2 or p < 1:
            raise InvalidArgumentError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise InvalidArgumentError(
                f"non-finite value at row {bad[0] + 1}, column {bad[1] + 1}"
            )
        names = tuple(self.column_names) or tuple(f"x{i + 1}" for i in range(p))
        if len(names) != p:
            raise InvalidArgumentError("column_names must have one entry per column")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def as_values(data) -> np.ndarray:
    if isinstance(data, DataMatrix):
        return data.values
    return DataMatrix(data).values


def bandwidth_of(adjacency: np.ndarray) -> int:
    idx = np.argwhere(adjacency)
    if len(idx) == 0:
        return 0
    return int(np.abs(idx[:, 0] - idx[:, 1]).max())


@dataclass(frozen=True)
class PrecisionModel:
    """Baseline mean ``mu0`` and a positive definite precision matrix ``Q``.

    ``adjacency`` and ``bandwidth`` are derived from the nonzero pattern of
    ``Q`` and are not accepted as arguments.
    """

    mu0: np.ndarray
    Q: np.ndarray
    adjacency: np.ndarray = field(init=False)
    bandwidth: int = field(init=False)

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise InvalidArgumentError("Q must be square")
        p = Q.shape[0]
        mu0 = np.zeros(p) if self.mu0 is None else np.asarray(self.mu0, dtype=float)
        if mu0.shape != (p,):
            raise InvalidArgumentError(f"mu0 must have length {p}")
        if not np.all(np.isfinite(Q)) or not np.all(np.isfinite(mu0)):
            raise InvalidArgumentError("non-finite entries in mu0 or Q")
        if np.max(np.abs(Q - Q.T), initial=0.0) > SYMMETRY_TOL:
            raise InvalidArgumentError("Q is not symmetric")
        Q = (Q + Q.T) / 2
        try:
            np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            raise NumericalError("Q is not positive definite") from None
        adjacency = np.abs(Q) > ZERO_TOL
        np.fill_diagonal(adjacency, False)
        adjacency.flags.writeable = False
        object.__setattr__(self, "mu0", _readonly(mu0))
        object.__setattr__(self, "Q", _readonly(Q))
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "bandwidth", bandwidth_of(adjacency))

    @property
    def p(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def identity(cls, p: int, mu0=None) -> "PrecisionModel":
        return cls(mu0=mu0, Q=np.eye(p))

    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.Q)


@dataclass(frozen=True)
class PenaltyScheme:
    """Penalty constants for collective and point anomalies.

    The collective penalty on a subset of size ``j`` is
    ``min(alpha_sparse + beta * j, alpha_dense)``; a point anomaly costs
    ``beta_point`` per affected variable.  Stored values are already
    multiplied by ``scale_b`` (collective) and ``scale_b_point`` (point).
    """

    n: float
    p: int
    alpha_sparse: float
    alpha_dense: float
    beta: float
    beta_point: float
    scale_b: float = 1.0
    scale_b_point: float = 1.0

    def __post_init__(self):
        for name in ("alpha_sparse", "alpha_dense", "beta", "beta_point"):
            if not getattr(self, name) >= 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if not (self.scale_b > 0 and self.scale_b_point > 0):
            raise InvalidArgumentError("scaling factors must be positive")

    @property
    def psi(self) -> float:
        return math.log(self.n)

    @property
    def k_star(self) -> float:
        if self.beta == 0:
            return math.inf
        return (self.alpha_dense - self.alpha_sparse) / self.beta

    def rescaled(self, scale_b: float, scale_b_point: Optional[float] = None) -> "PenaltyScheme":
        """Return the scheme with penalties at scale ``scale_b`` (and ``scale_b_point``).

        Scales are absolute, not relative to the current ones.
        """
        if scale_b_point is None:
            scale_b_point = self.scale_b_point
        if not (scale_b > 0 and scale_b_point > 0):
            raise InvalidArgumentError("scaling factors must be positive")
        f = scale_b / self.scale_b
        g = scale_b_point / self.scale_b_point
        return PenaltyScheme(
            n=self.n,
            p=self.p,
            alpha_sparse=self.alpha_sparse * f,
            alpha_dense=self.alpha_dense * f,
            beta=self.beta * f,
            beta_point=self.beta_point * g,
            scale_b=scale_b,
            scale_b_point=scale_b_point,
        )

    def as_dict(self) -> dict:
        return {
            "alpha_sparse": self.alpha_sparse,
            "alpha_dense": self.alpha_dense,
            "beta": self.beta,
            "k_star": self.k_star,
            "beta_point": self.beta_point,
            "scale_b": self.scale_b,
            "scale_b_point": self.scale_b_point,
            "psi": self.psi,
        }


def default_penalties(n: int, p: int, scale_b: float = 1.0, scale_b_point: float = 1.0) -> PenaltyScheme:
    """Default penalties for ``n`` observations of ``p`` variables.

    With ``psi = log n``: ``alpha_sparse = 2 psi``, ``beta = 2 log p``,
    ``alpha_dense = p + 2 sqrt(p psi) + 2 psi`` and
    ``beta_point = 2 log p + 2 psi``.
    """
    if n < 2 or p < 1:
        raise InvalidArgumentError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
    if not (scale_b > 0 and scale_b_point > 0):
        raise InvalidArgumentError("scaling factors must be positive")
    psi = math.log(n)
    return PenaltyScheme(
        n=int(n) if float(n).is_integer() else float(n),
        p=int(p),
        alpha_sparse=scale_b * 2 * psi,
        alpha_dense=scale_b * (p + 2 * math.sqrt(p * psi) + 2 * psi),
        beta=scale_b * 2 * math.log(p),
        beta_point=scale_b_point * (2 * math.log(p) + 2 * psi),
        scale_b=float(scale_b),
        scale_b_point=float(scale_b_point),
    )


def penalty_of(scheme: PenaltyScheme, j: int) -> float:
    """Collective-anomaly penalty for a subset of ``j`` variables."""
    if not 1 <= j <= scheme.p:
        raise InvalidArgumentError(f"subset size must be in 1..{scheme.p}, got {j}")
    return min(scheme.alpha_sparse + scheme.beta * j, scheme.alpha_dense)


@dataclass(frozen=True)
class SegmentWindow:
    s: int
    e: int
    min_len: int = 1
    max_len: Optional[int] = None

    def __post_init__(self):
        length = self.e - self.s
        max_len = self.max_len if self.max_len is not None else length
        if not (0 <= self.s < self.e):
            raise InvalidArgumentError(f"invalid window ({self.s}, {self.e}]")
        if not (self.min_len <= length <= max_len):
            raise InvalidArgumentError(
                f"window length {length} outside [{self.min_len}, {max_len}]"
            )

    @property
    def length(self) -> int:
        return self.e - self.s


@dataclass(frozen=True)
class CollectiveAnomaly:
    s: int
    e: int
    J: tuple
    mean: tuple
    saving: float

    @property
    def length(self) -> int:
        return self.e - self.s


@dataclass(frozen=True)
class PointAnomaly:
    t: int
    J: tuple
    saving: float


@dataclass(frozen=True)
class AnomalySet:
    """Collective and point anomalies found in (or injected into) a series."""

    collective: tuple = ()
    points: tuple = ()
    total_cost: float = 0.0

    def __post_init__(self):
        collective = tuple(sorted(self.collective, key=lambda a: a.s))
        points = tuple(sorted(self.points, key=lambda a: a.t))
        for a, b in zip(collective, collective[1:]):
            if a.e > b.s:
                raise InvalidArgumentError(f"overlapping segments ({a.s},{a.e}] and ({b.s},{b.e}]")
        for a in collective:
            if a.e - a.s < 2:
                raise InvalidArgumentError("collective anomalies need length >= 2")
        for pt in points:
            if any(a.s < pt.t <= a.e for a in collective):
                raise InvalidArgumentError(f"point anomaly at {pt.t} inside a collective anomaly")
        for item in collective + points:
            if not item.saving > 0:
                raise InvalidArgumentError("stored savings must be positive")
        object.__setattr__(self, "collective", collective)
        object.__setattr__(self, "points", points)

    def labels(self, n: int) -> np.ndarray:
        """Binary per-observation labels, 1 for anomalous (point or collective)."""
        out = np.zeros(n, dtype=int)
        for a in self.collective:
            out[a.s:a.e] = 1
        for pt in self.points:
            out[pt.t - 1] = 1
        return out

    def to_dict(self) -> dict:
        return {
            "collective": [
                {"s": a.s, "e": a.e, "J": list(a.J), "means": list(a.mean), "saving": a.saving}
                for a in self.collective
            ],
            "points": [{"t": pt.t, "J": list(pt.J), "saving": pt.saving} for pt in self.points],
            "total_cost": self.total_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalySet":
        return cls(
            collective=tuple(
                CollectiveAnomaly(
                    s=int(a["s"]),
                    e=int(a["e"]),
                    J=tuple(int(j) for j in a["J"]),
                    mean=tuple(float(m) for m in a["means"]),
                    saving=float(a["saving"]),
                )
                for a in d.get("collective", [])
            ),
            points=tuple(
                PointAnomaly(t=int(pt["t"]), J=tuple(int(j) for j in pt["J"]), saving=float(pt["saving"]))
                for pt in d.get("points", [])
            ),
            total_cost=float(d.get("total_cost", 0.0)),
        )


def one_based(indices: Sequence[int]) -> tuple:
    return tuple(int(i) + 1 for i in sorted(indices))
