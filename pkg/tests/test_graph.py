import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capacc.core import InvalidArgumentError
from capacc.graph import banded_adjacency, build_plan, lattice_adjacency


def test_banded_examples():
    W = banded_adjacency(3, 1)
    assert W.tolist() == [[False, True, False], [True, False, True], [False, True, False]]
    assert not banded_adjacency(4, 0).any()
    assert (banded_adjacency(5, 4) == ~np.eye(5, dtype=bool)).all()


@pytest.mark.parametrize("r", [-1, 3])
def test_banded_out_of_range(r):
    with pytest.raises(InvalidArgumentError):
        banded_adjacency(3, r)


def lattice_oracle(m):
    """Neighbours by explicit enumeration of 1-based coordinates."""
    coords = [(u, v) for u in range(1, m + 1) for v in range(1, m + 1)]
    W = np.zeros((m * m, m * m), dtype=bool)
    for i, (u1, v1) in enumerate(coords):
        for j, (u2, v2) in enumerate(coords):
            W[i, j] = abs(u1 - u2) + abs(v1 - v2) == 1
    return W


@pytest.mark.parametrize("m", [1, 2, 3, 5])
def test_lattice_matches_enumeration(m):
    np.testing.assert_array_equal(lattice_adjacency(m), lattice_oracle(m))


def test_lattice_examples():
    assert lattice_adjacency(1).tolist() == [[False]]
    W2 = lattice_adjacency(2)
    assert list(np.flatnonzero(W2[0]) + 1) == [2, 3]
    W3 = lattice_adjacency(3)
    assert list(np.flatnonzero(W3[4]) + 1) == [2, 4, 6, 8]


def extended_oracle(W):
    """Extended neighbourhoods by direct set computation (1-based in and out)."""
    p = len(W)
    idx = np.argwhere(W)
    r = int(np.abs(idx[:, 0] - idx[:, 1]).max()) if len(idx) else 0
    N = {d: {i + 1 for i in np.flatnonzero(W[d - 1])} for d in range(1, p + 1)}
    out = []
    for d in range(1, p + 1):
        P = set(range(max(1, d - r), d))
        U = set().union(*(N[i] for i in range(d, min(p, d + r) + 1)))
        out.append(tuple(sorted(P & U)))
    return out


def test_full_band_extended_is_lower_band():
    for p, r in [(6, 1), (8, 3), (5, 4)]:
        plan = build_plan(banded_adjacency(p, r))
        for d in range(p):
            assert plan.extended[d] == tuple(range(max(0, d - r), d))


def test_figure_pattern():
    # The figure's caption lists the extended neighbourhoods but not the full
    # pattern.  This 4-banded pattern was reconstructed by hand so that every
    # listed set is reproduced: edges (1-based) 1-2, 2-6, 3-4, 4-7, 5-7, 6-7, 7-8.
    W = np.zeros((8, 8), dtype=bool)
    for i, j in [(1, 2), (2, 6), (3, 4), (4, 7), (5, 7), (6, 7), (7, 8)]:
        W[i - 1, j - 1] = W[j - 1, i - 1] = True
    plan = build_plan(W)
    assert plan.r == 4
    got = [tuple(i + 1 for i in m) for m in plan.extended]
    assert got == [(), (1,), (2,), (2, 3), (2, 4), (2, 4, 5), (4, 5, 6), (7,)]
    assert got == extended_oracle(W)


def test_diagonal_only():
    plan = build_plan(np.eye(5))
    assert plan.r == 0
    assert all(m == () for m in plan.extended)
    assert plan.max_width == 0


def test_asymmetric_rejected():
    W = np.zeros((3, 3))
    W[0, 1] = 1
    with pytest.raises(InvalidArgumentError):
        build_plan(W)


def test_numeric_pattern_tolerance():
    A = np.eye(3)
    A[0, 1] = A[1, 0] = 1e-13
    assert build_plan(A).r == 0


@st.composite
def symmetric_patterns(draw):
    p = draw(st.integers(1, 12))
    bits = draw(st.lists(st.booleans(), min_size=p * p, max_size=p * p))
    W = np.triu(np.array(bits).reshape(p, p), 1)
    return W | W.T


@settings(max_examples=300, deadline=None)
@given(W=symmetric_patterns())
def test_plan_properties(W):
    plan = build_plan(W)
    p = len(W)
    assert [tuple(i + 1 for i in m) for m in plan.extended] == extended_oracle(W)
    assert plan.max_width <= plan.r
    for d in range(p):
        M, P = set(plan.extended[d]), set(plan.lower[d])
        assert M <= P <= set(range(d))
        assert len(M) <= min(plan.r, d)
        for i in M:
            assert any(W[j, i] for j in range(d, min(p, d + plan.r + 1)))
    assert build_plan(W) == plan
