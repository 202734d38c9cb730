"""Exact dynamic programming for banded binary quadratic programs.

Maximises ``u'Au + u'b + c`` over ``u`` in ``{0, 1}^p`` when ``A`` has the
nonzero pattern described by a :class:`~capacc.graph.NeighborhoodPlan`.

Level ``d`` of the recursion holds one node per on/off pattern of the
variables ``M_d + [d]``; node index ``2 g + u_d`` where bit ``k`` of ``g`` is
the state of ``M_d[k]``.  Before growing level ``d`` the nodes of level
``d - 1`` are grouped by their pattern on ``M_d`` and the best node of each
group becomes the parent.  Work is ``O(sum_d 2^|M_d|)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidArgumentError
from .graph import NeighborhoodPlan, build_plan

BRUTE_FORCE_MAX_P = 25


@dataclass(frozen=True)
class BqpInstance:
    A: np.ndarray
    b: np.ndarray
    c: float
    plan: NeighborhoodPlan

    @property
    def p(self) -> int:
        return len(self.b)

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.A @ u + u @ self.b + self.c)


def make_instance(A, b, c=0.0, plan=None) -> BqpInstance:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if plan is None:
        plan = build_plan(A)
    if A.shape != (len(b), len(b)) or plan.p != len(b):
        raise InvalidArgumentError("dimension mismatch between A, b and plan")
    return BqpInstance(A=A, b=b, c=float(c), plan=plan)


@dataclass(frozen=True)
class _Level:
    extended: np.ndarray  # M_d
    order: np.ndarray  # previous-level nodes sorted by group
    width: int  # previous-level nodes per group
    bits: np.ndarray  # (2^|M_d|, |M_d|) on/off patterns


@functools.lru_cache(maxsize=64)
def _levels(plan: NeighborhoodPlan) -> tuple:
    levels = []
    prev_ext: tuple = ()
    for d in range(plan.p):
        ext = plan.extended[d]
        n_groups = 1 << len(ext)
        if d == 0:
            group = np.zeros(1, dtype=np.int64)
        else:
            n_prev = 2 << len(prev_ext)
            node = np.arange(n_prev)
            u_prev, g_prev = node & 1, node >> 1
            group = np.zeros(n_prev, dtype=np.int64)
            for k, m in enumerate(ext):
                if m == d - 1:
                    bit = u_prev
                else:
                    try:
                        bit = (g_prev >> prev_ext.index(m)) & 1
                    except ValueError:
                        raise InvalidArgumentError(
                            f"plan is inconsistent: variable {m} in M_{d} but not in M_{d - 1}"
                        ) from None
                group |= bit << k
        order = np.argsort(group, kind="stable")
        width = len(group) // n_groups
        if width * n_groups != len(group):
            raise InvalidArgumentError("plan is inconsistent: uneven parent groups")
        g = np.arange(n_groups)
        bits = ((g[:, None] >> np.arange(len(ext))[None, :]) & 1).astype(float)
        levels.append(_Level(np.array(ext, dtype=np.int64), order, width, bits))
        prev_ext = ext
    return tuple(levels)


@dataclass(frozen=True)
class BqpSolution:
    """Result of :func:`solve_banded_bqp`.

    When ``complete`` is False the recursion stopped early because every
    surviving path had more than ``k_star`` ones; ``value`` is then the
    objective of ``u`` (a feasible lower bound on the maximum), and the
    caller should use the dense branch instead.
    """

    value: float
    u: np.ndarray
    complete: bool
    node_counts: tuple

    @property
    def subset(self) -> tuple:
        return tuple(int(i) for i in np.flatnonzero(self.u))


def _path(parents: list, node: int, depth: int) -> list:
    """Bits ``u_0..u_depth`` of the path ending in ``node`` at level ``depth``."""
    bits = []
    for d in range(depth, -1, -1):
        bits.append(node & 1)
        node = int(parents[d][node >> 1])
    return bits[::-1]


def _lex_first(candidates, parents, depth) -> int:
    paths = {int(c): _path(parents, int(c), depth) for c in candidates}
    return min(paths, key=lambda c: paths[c])


def solve_banded_bqp(instance: BqpInstance, k_star: float = math.inf) -> BqpSolution:
    """Maximise ``u'Au + u'b + c`` exactly by dynamic programming.

    Ties are broken towards the lexicographically smallest ``u``.  The
    recursion stops once the minimal number of ones over all surviving paths
    exceeds ``k_star``.
    """
    A, b, plan = instance.A, instance.b, instance.plan
    p = plan.p
    if A.shape != (p, p) or b.shape != (p,):
        raise InvalidArgumentError("dimension mismatch between instance and plan")
    levels = _levels(plan)
    vals = np.array([instance.c])
    counts = np.zeros(1, dtype=np.int64)
    parents = []
    node_counts = []
    complete = True
    depth = -1
    for d, lv in enumerate(levels):
        grouped = vals[lv.order].reshape(-1, lv.width)
        arg = grouped.argmax(axis=1)
        best = grouped[np.arange(len(arg)), arg]
        if lv.width > 1:
            tied = np.flatnonzero((grouped == best[:, None]).sum(axis=1) > 1)
            for gi in tied:
                members = lv.order.reshape(-1, lv.width)[gi]
                cands = members[grouped[gi] == best[gi]]
                arg[gi] = np.flatnonzero(members == _lex_first(cands, parents, d - 1))[0]
        parent = lv.order.reshape(-1, lv.width)[np.arange(len(arg)), arg]
        gain = b[d] + A[d, d] + 2 * lv.bits @ A[d, lv.extended]
        vals = np.stack([best, best + gain], axis=1).ravel()
        pc = counts[parent]
        counts = np.stack([pc, pc + 1], axis=1).ravel()
        parents.append(parent)
        node_counts.append(len(vals))
        depth = d
        if d < p - 1 and counts.min() > k_star:
            complete = False
            break
    top = vals.max()
    cands = np.flatnonzero(vals == top)
    node = int(cands[0]) if len(cands) == 1 else _lex_first(cands, parents, depth)
    u = np.zeros(p, dtype=np.int8)
    u[: depth + 1] = _path(parents, node, depth)
    return BqpSolution(value=float(top), u=u, complete=complete, node_counts=tuple(node_counts))


class BatchSolution:
    """Maxima of many BQPs sharing one plan; subsets are rebuilt on demand."""

    def __init__(self, values: np.ndarray, parents: list, final: np.ndarray, p: int):
        self.values = values
        self._parents = parents
        self._final = final
        self._p = p

    def u(self, indices=None) -> np.ndarray:
        """Binary maximisers for the requested instances, shape ``(k, p)``."""
        if indices is None:
            indices = np.arange(len(self.values))
        indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        out = np.zeros((len(indices), self._p), dtype=np.int8)
        node = self._final[indices]
        for d in range(self._p - 1, -1, -1):
            out[:, d] = node & 1
            node = self._parents[d][indices, node >> 1]
        return out


def solve_banded_bqp_batch(A: np.ndarray, b: np.ndarray, c, plan: NeighborhoodPlan) -> BatchSolution:
    """Solve ``K`` instances ``(A[k], b[k], c[k])`` with a common plan.

    No early stopping; ties go to the first node in group order, which is
    deterministic but not necessarily the lexicographically smallest ``u``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    K, p = b.shape
    if A.shape != (K, p, p) or plan.p != p:
        raise InvalidArgumentError("dimension mismatch in batch BQP")
    levels = _levels(plan)
    vals = np.broadcast_to(np.asarray(c, dtype=float), (K,)).reshape(K, 1)
    rows = np.arange(K)[:, None]
    parents = []
    for d, lv in enumerate(levels):
        grouped = vals[:, lv.order].reshape(K, -1, lv.width)
        if lv.width == 1:
            best = grouped[:, :, 0]
            parent = np.broadcast_to(lv.order, (K, len(lv.order)))
        else:
            arg = grouped.argmax(axis=2)
            best = np.take_along_axis(grouped, arg[:, :, None], axis=2)[:, :, 0]
            parent = lv.order.reshape(-1, lv.width)[np.arange(arg.shape[1])[None, :], arg]
        gain = b[:, d] + A[:, d, d]
        if len(lv.extended):
            gain = gain[:, None] + 2 * A[:, d, lv.extended] @ lv.bits.T
        else:
            gain = gain[:, None]
        vals = np.stack([best, best + gain], axis=2).reshape(K, -1)
        parents.append(parent)
    final = vals.argmax(axis=1)
    return BatchSolution(vals[rows[:, 0], final], parents, final, p)


def _lex_vectors(p: int, start: int, stop: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    shifts = np.arange(p - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts[None, :]) & 1).astype(float)


def brute_force_bqp(instance: BqpInstance) -> tuple:
    """Exhaustive maximum over all ``2^p`` vectors, lexicographically smallest on ties."""
    p = instance.p
    if p > BRUTE_FORCE_MAX_P:
        raise InvalidArgumentError(f"brute force refused for p={p} > {BRUTE_FORCE_MAX_P}")
    best_val, best_u = -math.inf, None
    chunk = 1 << 16
    for start in range(0, 1 << p, chunk):
        U = _lex_vectors(p, start, min(1 << p, start + chunk))
        vals = np.einsum("ki,ij,kj->k", U, instance.A, U) + U @ instance.b + instance.c
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_u = float(vals[i]), U[i].astype(np.int8)
    return best_val, best_u

