import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxskipvr import InvalidInputError, InvalidProblemError, bregman, estimate_constants, flat
from proxskipvr import LogisticObjective, QuadraticObjective
from proxskipvr.core import Rng, mulhi, power_iteration, subsets_from_raw

from conftest import flat_logistic, logistic_data


def test_rng_reproducible_stream():
    a, b = Rng(123), Rng(123)
    assert np.array_equal(a.raw(50), b.raw(50))
    assert a.position == b.position == 50
    assert Rng(1).raw() != Rng(2).raw()


def test_rng_matches_pcg64_raw_stream():
    ref = np.random.PCG64(99).random_raw(10)
    assert np.array_equal(Rng(99).raw(10), ref)


def test_uniform_decoding_is_53_bit():
    r = Rng(5)
    raw = Rng(5).raw(1000)
    u = r.uniform(1000)
    assert np.array_equal(u, (raw >> np.uint64(11)).astype(float) / 2.0**53)
    assert u.min() >= 0.0 and u.max() < 1.0


@given(st.integers(0, 2**64 - 1), st.integers(1, 2**32 - 1))
def test_mulhi_matches_big_integer_product(u, n):
    assert int(mulhi(np.uint64(u), n)) == (u * n) >> 64


def test_scalar_and_batch_decoding_agree():
    r1, r2 = Rng(7), Rng(7)
    scalar = [r1.sample_subset(9, 4) for _ in range(20)]
    batch = subsets_from_raw(r2.raw(80).reshape(20, 4), 9, 4)
    assert np.array_equal(np.array(scalar), batch)


@pytest.mark.parametrize("p,expected", [(1.0, 1), (0.0, 0)])
def test_bernoulli_endpoints_consume_one_draw(p, expected):
    r = Rng(3)
    assert all(r.bernoulli(p) == expected for _ in range(100))
    assert r.position == 100


def test_bernoulli_rejects_bad_probability():
    with pytest.raises(InvalidInputError):
        Rng(0).bernoulli(1.5)
    with pytest.raises(InvalidInputError):
        Rng(0).bernoulli(-0.1)


def test_bernoulli_frequency():
    r = Rng(2024)
    N = 10**6
    hits = int(np.sum(r.uniform(N) < 0.3))
    assert abs(hits / N - 0.3) <= 4 * math.sqrt(0.21 / N)


def test_sample_subset_full_and_errors():
    r = Rng(0)
    assert r.sample_subset(5, 5).tolist() == [0, 1, 2, 3, 4]
    assert r.position == 0
    with pytest.raises(InvalidInputError):
        r.sample_subset(3, 4)
    with pytest.raises(InvalidInputError):
        r.sample_subset(3, 0)


def test_sample_subset_inclusion_frequency():
    r = Rng(8)
    N = 10**5
    picks = subsets_from_raw(r.raw(N).reshape(N, 1), 2, 1)[:, 0]
    freq = np.mean(picks == 0)
    assert abs(freq - 0.5) <= 4 * math.sqrt(0.25 / N)


def test_sample_subset_uniform_over_pairs():
    r = Rng(9)
    N = 60_000
    S = subsets_from_raw(r.raw(2 * N).reshape(N, 2), 4, 2)
    counts = {c: 0 for c in combinations(range(4), 2)}
    for a, b in S:
        counts[(int(a), int(b))] += 1
    se = math.sqrt((1 / 6) * (5 / 6) / N)
    for c in counts.values():
        assert abs(c / N - 1 / 6) <= 4 * se


@settings(max_examples=50)
@given(st.integers(1, 30), st.data())
def test_subsets_are_sorted_distinct(m, data):
    tau = data.draw(st.integers(1, m))
    seed = data.draw(st.integers(0, 2**32))
    S = Rng(seed).sample_subset(m, tau)
    assert len(S) == tau
    assert np.all(np.diff(S) > 0)
    assert S.min() >= 0 and S.max() < m


def test_permutation_is_permutation():
    p = Rng(4).permutation(100)
    assert sorted(p.tolist()) == list(range(100))


def test_normal_moments():
    z = Rng(10).normal(200_000)
    assert abs(z.mean()) < 4 / math.sqrt(200_000)
    assert abs(z.var() - 1) < 0.02


def test_spawn_depends_only_on_seed_and_key():
    a = Rng(5)
    a.raw(10)
    assert Rng(5).spawn(3).seed == a.spawn(3).seed
    assert Rng(5).spawn(3).seed != Rng(5).spawn(4).seed


def test_bregman_quadratic_half_norm():
    f = QuadraticObjective.single(np.eye(2), np.zeros(2))
    assert bregman(f, np.array([3.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(2.0, abs=1e-15)


def test_bregman_identity_and_mismatch():
    f = flat_logistic()
    x = np.ones((1, 5))
    assert bregman(f, x, x) == 0.0
    with pytest.raises(InvalidInputError):
        bregman(f, np.ones((1, 5)), np.ones((1, 4)))


def _naive_logistic(A, b, lam, x):
    """Loop-based value and gradient of the mean L2-regularized logistic loss."""
    n = len(b)
    val, grad = 0.0, [0.0] * len(x)
    for i in range(n):
        z = -b[i] * sum(A[i][k] * x[k] for k in range(len(x)))
        val += math.log1p(math.exp(z)) if z < 30 else z + math.log1p(math.exp(-z))
        s = 1.0 / (1.0 + math.exp(-z))
        for k in range(len(x)):
            grad[k] += -b[i] * A[i][k] * s
    val = val / n + 0.5 * lam * sum(v * v for v in x)
    grad = [g / n + lam * v for g, v in zip(grad, x)]
    return val, grad


def test_bregman_logistic_matches_naive_definition():
    A, b, lam = logistic_data(3, 5, 3, lam=0.1)
    f = LogisticObjective(A[None], b[None], lam)
    rng = Rng(1)
    x, y = rng.normal(3), rng.normal(3)
    fx, _ = _naive_logistic(A.tolist(), b.tolist(), lam, x.tolist())
    fy, gy = _naive_logistic(A.tolist(), b.tolist(), lam, y.tolist())
    expected = fx - fy - sum(g * (a - c) for g, a, c in zip(gy, x, y))
    assert bregman(f, x[None], y[None]) == pytest.approx(expected, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("make", ["logistic", "quadratic"])
def test_bregman_nonnegative_and_sandwiched(make, quad_problem):
    prob = flat(flat_logistic(2, 30, 4)) if make == "logistic" else quad_problem
    f = prob.f
    L, _, mu = prob.constants()
    rng = Rng(77)
    X = rng.normal((10_000,) + f.shape) * 2.0
    Y = rng.normal((10_000,) + f.shape) * 2.0
    for x, y in zip(X[:2000], Y[:2000]):
        D = bregman(f, x, y)
        sq = float(np.sum((x - y) ** 2))
        scale = max(1.0, abs(f.value(x)))
        assert D >= -1e-10 * scale
        assert mu / 2 * sq <= D * (1 + 1e-9) + 1e-12 * scale
        assert D <= L / 2 * sq * (1 + 1e-9) + 1e-12 * scale


def test_bregman_nonnegative_many_pairs():
    f = flat_logistic(4, 20, 3)
    rng = Rng(78)
    X = rng.normal((10_000, 1, 3)) * 3
    Y = rng.normal((10_000, 1, 3)) * 3
    fx = np.array([f.value(x) for x in X])
    fy = np.array([f.value(y) for y in Y])
    gy = np.array([f.grad(y) for y in Y])
    D = fx - fy - np.sum(gy * (X - Y), axis=(1, 2))
    assert np.all(D >= -1e-10 * np.maximum(1, np.abs(fx)))


def test_constants_diagonal_quadratic():
    f = QuadraticObjective.single(np.diag([4.0, 1.0]), np.zeros(2))
    assert tuple(estimate_constants(f)) == (4.0, 4.0, 1.0)


def test_constants_logistic_mu_is_lambda():
    f = flat_logistic(lam=0.037)
    assert estimate_constants(f).mu == 0.037


def test_constants_logistic_against_dense_eigensolver():
    A, b, lam = logistic_data(12, 50, 20, lam=0.01)
    f = LogisticObjective(A[None], b[None], lam)
    oracle = np.linalg.eigvalsh(A.T @ A / (4 * 50))[-1] + lam
    assert f.constants().L == pytest.approx(oracle, rel=1e-6)
    assert f.constants().L_max == pytest.approx(np.max(np.sum(A**2, axis=1)) / 4 + lam, rel=1e-15)


def test_constants_reject_non_strongly_convex():
    f = QuadraticObjective.single(np.diag([1.0, 0.0]), np.zeros(2))
    with pytest.raises(InvalidProblemError):
        estimate_constants(f)


def test_power_iteration_matches_eigvalsh():
    rng = Rng(3)
    B = rng.normal((15, 15))
    S = B @ B.T
    assert power_iteration(lambda v: S @ v, 15) == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-7)
