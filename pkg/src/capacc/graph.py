"""Adjacency constructors and the neighbourhood plan driving the BQP solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError, ZERO_TOL, bandwidth_of


def banded_adjacency(p: int, r: int) -> np.ndarray:
    """Boolean ``p x p`` adjacency with ``w_ij = 1`` iff ``0 < |i - j| <= r``."""
    if p < 1:
        raise InvalidArgumentError("p must be positive")
    if not 0 <= r <= p - 1:
        raise InvalidArgumentError(f"band must be in 0..{p - 1}, got {r}")
    dist = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return (dist > 0) & (dist <= r)


def lattice_adjacency(m: int) -> np.ndarray:
    """Adjacency of an ``m x m`` square lattice with 4-neighbourhoods.

    Node ``(u, v)`` (1-based) gets index ``(u - 1) m + v``.
    """
    if m < 1:
        raise InvalidArgumentError("lattice side must be positive")
    u, v = np.divmod(np.arange(m * m), m)
    du = np.abs(np.subtract.outer(u, u))
    dv = np.abs(np.subtract.outer(v, v))
    return du + dv == 1


@dataclass(frozen=True)
class NeighborhoodPlan:
    """Per-variable neighbour sets (0-based) for an ``r``-banded pattern.

    ``neighbors[d]`` holds the off-diagonal nonzeros of row ``d``,
    ``lower[d]`` the potential lower neighbours ``max(0, d - r)..d - 1`` and
    ``extended[d]`` the lower variables whose state can still matter at or
    after ``d``.
    """

    p: int
    r: int
    neighbors: tuple
    lower: tuple
    extended: tuple

    @property
    def max_width(self) -> int:
        return max((len(m) for m in self.extended), default=0)


def build_plan(pattern) -> NeighborhoodPlan:
    """Build the neighbourhood plan from a (boolean or numeric) pattern.

    Entries with absolute value above 1e-12 count as nonzero; the diagonal is
    ignored.
    """
    pattern = np.asarray(pattern)
    if pattern.ndim != 2 or pattern.shape[0] != pattern.shape[1]:
        raise InvalidArgumentError("pattern must be square")
    nz = np.abs(pattern.astype(float)) > ZERO_TOL
    np.fill_diagonal(nz, False)
    if not np.array_equal(nz, nz.T):
        raise InvalidArgumentError("pattern must be symmetric")
    p = nz.shape[0]
    r = bandwidth_of(nz)
    neighbors = tuple(tuple(int(i) for i in np.flatnonzero(nz[d])) for d in range(p))
    lower = tuple(tuple(range(max(0, d - r), d)) for d in range(p))
    extended = []
    for d in range(p):
        ahead = set()
        for i in range(d, min(p, d + r + 1)):
            ahead.update(neighbors[i])
        extended.append(tuple(i for i in lower[d] if i in ahead))
    return NeighborhoodPlan(p=p, r=r, neighbors=neighbors, lower=lower, extended=tuple(extended))


def plan_for(model) -> NeighborhoodPlan:
    """Plan for the nonzero pattern of a :class:`~capacc.core.PrecisionModel`."""
    return build_plan(model.adjacency)
