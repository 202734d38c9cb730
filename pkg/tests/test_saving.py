import itertools

import numpy as np
import pytest
from scipy import optimize

import capacc.saving as saving_mod
from capacc.core import InvalidArgumentError, default_penalties
from capacc.graph import build_plan
from capacc.saving import (
    SegmentStats,
    SegmentSums,
    approx_cpt_savings,
    approx_saving,
    approx_savings,
    approximation_error_bound,
    build_anomaly_bqp,
    build_cpt_bqp,
    compensated_cumsum,
    cpt_saving,
    exact_saving,
    exhaustive_penalised_saving,
    point_saving_of,
    point_savings,
    segment_stats,
    subset_mle,
    truncated_saving,
)
from conftest import random_banded_precision


def cost(X, Q, mu):
    """Gaussian cost of rows of ``X`` around ``mu``."""
    D = X - mu
    return float(np.einsum("ti,ij,tj->", D, Q, D))


def all_subsets(p):
    return [J for k in range(1, p + 1) for J in itertools.combinations(range(p), k)]


def test_compensated_cumsum_accuracy():
    x = np.full((100_000, 1), 0.1)
    x[0] = 1e8
    out = compensated_cumsum(x)
    assert out[0, 0] == 0.0
    assert out[-1, 0] == pytest.approx(1e8 + 0.1 * 99_999, rel=0, abs=1e-6)


class TestSegmentStats:
    def test_constant_data(self):
        mu0 = np.array([1.0, -2.0])
        X = np.tile(mu0, (6, 1))
        np.testing.assert_array_equal(segment_stats(X, mu0, 1, 5).mean, np.zeros(2))

    def test_single_row(self):
        X = np.arange(12.0).reshape(4, 3)
        np.testing.assert_allclose(segment_stats(X, np.ones(3), 2, 3).mean, X[2] - 1)

    def test_matches_naive(self, rng):
        X = rng.normal(size=(5, 3))
        mu0 = rng.normal(size=3)
        ref = sum(X[t] - mu0 for t in range(1, 4)) / 3
        np.testing.assert_allclose(segment_stats(X, mu0, 1, 4).mean, ref, atol=1e-14)

    @pytest.mark.parametrize("s,e", [(3, 3), (-1, 2), (0, 6)])
    def test_invalid(self, s, e):
        with pytest.raises(InvalidArgumentError):
            segment_stats(np.zeros((5, 2)), None, s, e)

    def test_vectorised_means(self, rng):
        X = rng.normal(size=(30, 4))
        sums = SegmentSums(X)
        s, e = np.array([0, 5, 12]), np.array([3, 20, 30])
        ref = np.stack([X[a:b].mean(axis=0) for a, b in zip(s, e)])
        np.testing.assert_allclose(sums.means(s, e), ref, atol=1e-13)


class TestSubsetMle:
    def test_identity(self, rng):
        x = rng.normal(size=4)
        np.testing.assert_allclose(subset_mle(np.eye(4), x, [0, 2]), x[[0, 2]])

    def test_full_subset(self, rng):
        x = rng.normal(size=3)
        np.testing.assert_allclose(subset_mle(random_banded_precision(rng, 3, 1).Q, x, [0, 1, 2]), x)

    def test_worked_example(self):
        Q = np.array([[1, -0.5, 0], [-0.5, 2, -0.5], [0, -0.5, 1]])
        # The closed form x_J + Q_JJ^{-1} Q_{J,-J} x_{-J} gives 1 + (1/2)(-0.5 - 0.5).
        assert subset_mle(Q, np.ones(3), [1])[0] == pytest.approx(0.5)

    def test_against_numerical_minimisation(self, rng):
        for _ in range(20):
            p = int(rng.integers(2, 6))
            Q = random_banded_precision(rng, p, min(2, p - 1)).Q
            X = rng.normal(size=(7, p)) + rng.normal(size=p)
            J = sorted(rng.choice(p, size=int(rng.integers(1, p + 1)), replace=False))

            def obj(v):
                mu = np.zeros(p)
                mu[J] = v
                return cost(X, Q, mu)

            ref = optimize.minimize(obj, np.zeros(len(J)), method="BFGS", options={"gtol": 1e-10}).x
            np.testing.assert_allclose(subset_mle(Q, X.mean(axis=0), J), ref, atol=1e-5)

    def test_empty_subset(self):
        with pytest.raises(InvalidArgumentError):
            subset_mle(np.eye(2), np.zeros(2), [])


class TestExactSaving:
    def test_zero_mean(self, rng):
        st = SegmentStats(np.zeros(4), 7)
        Q = random_banded_precision(rng, 4, 2).Q
        assert all(exact_saving(Q, st, J) == 0 for J in all_subsets(4))

    def test_identity_full(self, rng):
        x = rng.normal(size=5)
        assert exact_saving(np.eye(5), SegmentStats(x, 8), range(5)) == pytest.approx(8 * x @ x)

    def test_cost_difference_oracle(self, rng):
        for _ in range(40):
            p = int(rng.integers(1, 7))
            Q = random_banded_precision(rng, p, min(2, p - 1)).Q
            X = rng.normal(size=(9, p)) + rng.normal(size=p)
            s, e = 2, 8
            st = segment_stats(X, None, s, e)
            for J in all_subsets(p):
                mu = np.zeros(p)
                mu[list(J)] = subset_mle(Q, st.mean, J)
                ref = cost(X[s:e], Q, np.zeros(p)) - cost(X[s:e], Q, mu)
                assert exact_saving(Q, st, J) == pytest.approx(ref, rel=1e-9, abs=1e-9)

    def test_truncated_never_exceeds_exact(self, rng):
        for _ in range(30):
            Q = random_banded_precision(rng, 5, 2).Q
            st = SegmentStats(rng.normal(size=5), 4)
            for J in all_subsets(5):
                assert truncated_saving(Q, st, J) <= exact_saving(Q, st, J) + 1e-9


class TestBuildBqp:
    def test_zero_mean(self):
        sch = default_penalties(100, 3)
        inst = build_anomaly_bqp(np.eye(3), SegmentStats(np.zeros(3), 5), sch)
        assert not inst.A.any()
        np.testing.assert_allclose(inst.b, -sch.beta)
        assert inst.c == -sch.alpha_sparse

    def test_single_variable(self):
        sch = default_penalties(100, 1)
        inst = build_anomaly_bqp(np.array([[1.0]]), SegmentStats(np.array([2.0]), 5), sch)
        assert inst.A[0, 0] == -20
        assert inst.b[0] == 40 - sch.beta
        assert inst.objective([1]) == pytest.approx(20 - sch.beta - sch.alpha_sparse)

    def test_objective_matches_formula(self, rng):
        for _ in range(20):
            p = int(rng.integers(1, 11))
            Q = random_banded_precision(rng, p, min(3, p - 1), fill=0.6).Q
            st = SegmentStats(rng.normal(size=p), int(rng.integers(1, 20)))
            sch = default_penalties(200, p)
            inst = build_anomaly_bqp(Q, st, sch)
            x, L = st.mean, st.length
            for u in itertools.product((0, 1), repeat=p):
                u = np.array(u, dtype=float)
                ref = L * (2 * x - x * u) @ Q @ (x * u) - sch.beta * u.sum() - sch.alpha_sparse
                assert inst.objective(u) == pytest.approx(ref, rel=1e-10, abs=1e-10)

    def test_all_ones_equals_exact_full(self, rng):
        Q = random_banded_precision(rng, 6, 2).Q
        st = SegmentStats(rng.normal(size=6), 11)
        sch = default_penalties(100, 6)
        inst = build_anomaly_bqp(Q, st, sch)
        ref = exact_saving(Q, st, range(6)) - 6 * sch.beta - sch.alpha_sparse
        assert inst.objective(np.ones(6)) == pytest.approx(ref)

    def test_cpt_zero_and_reduction(self, rng):
        Q = random_banded_precision(rng, 4, 1).Q
        sch = default_penalties(100, 4)
        z = SegmentStats(np.zeros(4), 6)
        assert cpt_saving(Q, build_plan(Q), z, z, sch).value == pytest.approx(-sch.alpha_sparse)
        left = SegmentStats(rng.normal(size=4), 9)
        a = build_cpt_bqp(Q, left, z, sch)
        b = build_anomaly_bqp(Q, left, sch)
        np.testing.assert_allclose(a.A, b.A)
        np.testing.assert_allclose(a.b, b.b)

    def test_cpt_objective_matches_sum(self, rng):
        for _ in range(10):
            p = int(rng.integers(1, 9))
            Q = random_banded_precision(rng, p, min(2, p - 1)).Q
            left = SegmentStats(rng.normal(size=p), 7)
            right = SegmentStats(rng.normal(size=p), 3)
            sch = default_penalties(10, p)
            inst = build_cpt_bqp(Q, left, right, sch)
            for J in all_subsets(p):
                u = np.zeros(p)
                u[list(J)] = 1
                ref = truncated_saving(Q, left, J) + truncated_saving(Q, right, J) - sch.beta * len(J) - sch.alpha_sparse
                assert inst.objective(u) == pytest.approx(ref, rel=1e-10, abs=1e-10)


class TestApproxSaving:
    def test_zero_mean(self):
        sch = default_penalties(100, 5)
        Q = np.eye(5)
        res = approx_saving(Q, build_plan(Q), SegmentStats(np.zeros(5), 10), sch)
        assert res.value == pytest.approx(-min(sch.alpha_sparse, sch.alpha_dense))
        assert res.subset == () and res.regime == "sparse"

    def test_dense_signal(self, rng):
        p = 8
        Q = random_banded_precision(rng, p, 2).Q
        sch = default_penalties(100, p)
        st = SegmentStats(np.full(p, 50.0), 10)
        res = approx_saving(Q, build_plan(Q), st, sch)
        assert res.regime == "dense"
        assert res.subset == tuple(range(p))
        assert res.value == pytest.approx(exact_saving(Q, st, range(p)) - sch.alpha_dense)

    def test_matches_exhaustive(self, rng):
        for _ in range(150):
            p = int(rng.integers(1, 11))
            r = int(rng.integers(0, min(3, p - 1) + 1))
            Q = random_banded_precision(rng, p, r, fill=0.7).Q
            scale = rng.choice([0.3, 1.0, 3.0])
            st = SegmentStats(scale * rng.normal(size=p) * (rng.random(p) < 0.5), int(rng.integers(1, 30)))
            sch = default_penalties(200, p, scale_b=float(rng.choice([0.5, 1.0, 2.0])))
            res = approx_saving(Q, build_plan(Q), st, sch)
            ref, _ = exhaustive_penalised_saving(Q, st, sch, approximate=True)
            dense = exact_saving(Q, st, range(p)) - sch.alpha_dense
            assert res.value == pytest.approx(max(ref, dense), rel=1e-10, abs=1e-9)
            # The approximation never exceeds the exact penalised saving.
            exact, _ = exhaustive_penalised_saving(Q, st, sch, approximate=False)
            assert res.value <= exact + 1e-9

    def test_batch_matches_single(self, rng):
        p = 6
        Q = random_banded_precision(rng, p, 2).Q
        plan = build_plan(Q)
        sch = default_penalties(100, p)
        means = rng.normal(size=(40, p)) * rng.choice([0.2, 1.0, 4.0], size=(40, 1))
        lengths = rng.integers(1, 20, size=40)
        batch = approx_savings(Q, plan, means, lengths, sch.alpha_sparse, sch.beta, sch.alpha_dense)
        for i in range(40):
            ref = approx_saving(Q, plan, SegmentStats(means[i], int(lengths[i])), sch)
            assert batch.values[i] == pytest.approx(ref.value, rel=1e-10, abs=1e-9)
            assert batch.dense[i] == ref.dense
            J = batch.subset(i)
            if not batch.dense[i]:
                v = truncated_saving(Q, SegmentStats(means[i], int(lengths[i])), J)
                assert v - sch.alpha_sparse - sch.beta * len(J) == pytest.approx(ref.value, abs=1e-9)
        assert batch.sizes().tolist() == [len(batch.subset(i)) for i in range(40)]

    def test_chunking_is_invisible(self, rng, monkeypatch):
        p = 5
        Q = random_banded_precision(rng, p, 1).Q
        plan = build_plan(Q)
        sch = default_penalties(100, p)
        means = rng.normal(size=(23, p))
        whole = approx_savings(Q, plan, means, 3, sch.alpha_sparse, sch.beta, sch.alpha_dense)
        monkeypatch.setattr(saving_mod, "_CHUNK_FLOATS", 2 * p * p)
        chunked = approx_savings(Q, plan, means, 3, sch.alpha_sparse, sch.beta, sch.alpha_dense)
        assert len(chunked._parts) == 12
        np.testing.assert_array_equal(whole.values, chunked.values)
        assert [whole.subset(i) for i in range(23)] == [chunked.subset(i) for i in range(23)]

    def test_cpt_batch(self, rng):
        p = 4
        Q = random_banded_precision(rng, p, 1).Q
        plan = build_plan(Q)
        sch = default_penalties(50, p)
        m1, m2 = rng.normal(size=(10, p)), rng.normal(size=(10, p))
        batch = approx_cpt_savings(Q, plan, m1, 4, m2, 7, sch.alpha_sparse, sch.beta, sch.alpha_dense)
        for i in range(10):
            ref = cpt_saving(Q, plan, SegmentStats(m1[i], 4), SegmentStats(m2[i], 7), sch)
            assert batch.values[i] == pytest.approx(ref.value, abs=1e-9)


class TestPointSaving:
    def test_matches_enumeration(self, rng):
        for _ in range(30):
            p = int(rng.integers(1, 8))
            Q = random_banded_precision(rng, p, min(2, p - 1)).Q
            x = rng.normal(size=p) * 3
            bp = 4.0
            res = point_saving_of(Q, build_plan(Q), x, bp)
            ref = max([0.0] + [truncated_saving(Q, SegmentStats(x, 1), J) - bp * len(J) for J in all_subsets(p)])
            assert res.value == pytest.approx(ref, abs=1e-9)
            batch = point_savings(Q, build_plan(Q), x[None, :], bp)
            assert batch.values[0] == pytest.approx(ref, abs=1e-9)


class TestErrorBound:
    def test_full_subset(self, rng):
        Q = random_banded_precision(rng, 4, 2).Q
        assert approximation_error_bound(Q, SegmentStats(rng.normal(size=4), 3), range(4)) == 0.0

    def test_identity(self, rng):
        st = SegmentStats(rng.normal(size=4), 3)
        assert approximation_error_bound(np.eye(4), st, [0, 2]) == 0.0
        assert exact_saving(np.eye(4), st, [0, 2]) == pytest.approx(truncated_saving(np.eye(4), st, [0, 2]))

    def test_bounds_gap(self, rng):
        for _ in range(40):
            p = int(rng.integers(2, 9))
            Q = random_banded_precision(rng, p, min(3, p - 1), strength=0.9).Q
            st = SegmentStats(rng.normal(size=p) * 2, int(rng.integers(1, 15)))
            sch = default_penalties(100, p)
            exact, J_hat = exhaustive_penalised_saving(Q, st, sch, approximate=False)
            approx, _ = exhaustive_penalised_saving(Q, st, sch, approximate=True)
            if not J_hat:
                continue
            gap = exact - approx
            assert -1e-9 <= gap <= approximation_error_bound(Q, st, J_hat) + 1e-9
