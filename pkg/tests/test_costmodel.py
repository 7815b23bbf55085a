import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxskipvr.core import Rng
from proxskipvr.costmodel import (
    CostParams,
    cost_hub,
    cost_proxskip,
    cost_proxskip_vr,
    cost_ratio,
    cost_ratio_from_complexities,
    cost_ratio_limits,
    crossover_delta,
    empirical_cost_ratio,
)
from proxskipvr.errors import InvalidInputError
from proxskipvr.estimators import minibatch_smoothness


def random_constants(rng):
    mu = 10 ** (2 * rng.uniform() - 1)
    L = mu * 10 ** (4 * rng.uniform())
    L_max = L * (1 + 20 * rng.uniform())
    m = 2 + rng.randbelow(200)
    tau = 1 + rng.randbelow(m)
    return mu, L, minibatch_smoothness(tau, m, L, L_max), m, tau


def test_cost_proxskip_examples():
    assert cost_proxskip(10, 100, 0.0, 50) == 10
    assert cost_proxskip(10, 100, 0.01, 50) == pytest.approx(60.0, rel=1e-15)
    assert cost_proxskip(7, 9, 1.0, 1) == 16


def test_cost_proxskip_vr_examples():
    assert cost_proxskip_vr(5, 10, 0.1, 8, 3, 1.0) == pytest.approx(5 + 0.1 * 11 * 10, rel=1e-15)
    assert cost_proxskip_vr(5, 10, 0.1, 8, 8, 0.0) == pytest.approx(5 + 2 * 0.1 * 8 * 10, rel=1e-15)
    assert cost_proxskip_vr(20, 200, 1e-3, 100, 16, 0.02) == pytest.approx(26.736, rel=1e-12)


def test_cost_hub_examples():
    assert cost_hub(30, 300, 1e-2, 100, 16, 0.02, 5, 100) == pytest.approx(40.752, rel=1e-12)
    assert cost_hub(20, 200, 1e-3, 100, 16, 0.02, 100, 100) == pytest.approx(
        cost_proxskip_vr(20, 200, 1e-3, 100, 16, 0.02), rel=1e-15)
    limit = cost_hub(30, 300, 1e-2, 100, 16, 0.0, 1, 100)
    assert limit == pytest.approx(30 + 1e-2 * (1 / 100) * 2 * 16 * 300, rel=1e-15)
    with pytest.raises(InvalidInputError):
        cost_hub(1, 1, 1, 10, 2, 0.5, 0, 4)


def test_costs_reject_negative():
    with pytest.raises(InvalidInputError):
        cost_proxskip(-1, 10, 0.1, 5)
    with pytest.raises(InvalidInputError):
        cost_proxskip_vr(1, 10, -0.1, 5, 2, 0.5)
    with pytest.raises(InvalidInputError):
        CostParams(delta=-1)
    with pytest.raises(InvalidInputError):
        CostParams(m=4, tau=5)


def test_cost_ratio_examples():
    assert cost_ratio(0.0, 1.0, 4.0, 6.0, 100, 10) == pytest.approx(math.sqrt(4 / 6), rel=1e-15)
    assert cost_ratio(0.0, 1.0, 4.0, 6.0, 100, 10) == pytest.approx(0.81650, abs=5e-6)
    big = cost_ratio(1e12, 1.0, 4.0, 6.0, 100, 10)
    assert big == pytest.approx(100 * 4 / (2 * (100 + 5 * 10)), rel=1e-9)


def test_cost_ratio_limits_closed_forms():
    rng = Rng(1)
    for _ in range(100):
        mu, L, Lt, m, tau = random_constants(rng)
        at0, inf = cost_ratio_limits(mu, L, Lt, m, tau)
        assert abs(cost_ratio(0.0, mu, L, Lt, m, tau) - math.sqrt(L / Lt)) <= 1e-12 * math.sqrt(L / Lt)
        assert at0 == pytest.approx(math.sqrt(L / Lt), rel=1e-12)
        assert inf == pytest.approx(m * L / (2 * (m * mu + (Lt - mu) * tau)), rel=1e-12)


def test_cost_ratio_monotone_when_limit_exceeds_start():
    rng = Rng(2)
    grid = np.concatenate([[0.0], np.logspace(-12, 6, 400)])
    checked = 0
    for _ in range(100):
        mu, L, Lt, m, tau = random_constants(rng)
        at0, inf = cost_ratio_limits(mu, L, Lt, m, tau)
        vals = np.array([cost_ratio(d, mu, L, Lt, m, tau) for d in grid])
        if inf > at0:
            checked += 1
            assert np.all(np.diff(vals) >= -1e-12 * vals[1:])
        else:
            assert np.all(np.diff(vals) <= 1e-12 * vals[1:])
    assert checked > 10


def test_cost_ratio_below_one_at_zero():
    rng = Rng(3)
    for _ in range(100):
        mu, L, Lt, m, tau = random_constants(rng)
        if tau < m:
            assert cost_ratio(0.0, mu, L, Lt, m, tau) <= 1.0


def test_crossover_examples():
    assert crossover_delta(1.0, 4.0, 4.0, 100, 2) == 0.0
    # tau = m: asymptote mL / (2 (m mu + (L(tau) - mu) m)) stays below 1
    assert crossover_delta(1.0, 4.0, 50.0, 10, 10) is None
    mu, L, m, tau = 1.0, 2e3, 100, 16
    Lt = minibatch_smoothness(tau, m, L, 3 * L)
    d = crossover_delta(mu, L, Lt, m, tau)
    assert d is not None and d > 0
    assert abs(cost_ratio(d, mu, L, Lt, m, tau) - 1.0) <= 1e-12


def test_crossover_plug_back_random():
    rng = Rng(4)
    hits = 0
    for _ in range(100):
        mu, L, Lt, m, tau = random_constants(rng)
        d = crossover_delta(mu, L, Lt, m, tau)
        if d is None:
            assert cost_ratio_limits(mu, L, Lt, m, tau)[1] <= 1.0
            continue
        hits += 1
        assert abs(cost_ratio(d, mu, L, Lt, m, tau) - 1.0) <= 1e-12
    assert hits > 10


def test_complexity_route_reproduces_ratio():
    rng = Rng(5)
    for _ in range(100):
        mu, L, Lt, m, tau = random_constants(rng)
        delta = 10 ** (10 * rng.uniform() - 8)
        a = cost_ratio(delta, mu, L, Lt, m, tau)
        b = cost_ratio_from_complexities(delta, mu, L, Lt, m, tau)
        assert abs(a - b) <= 1e-12 * a


@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0, 1e3), st.integers(1, 100), st.floats(0, 1))
def test_vr_cost_between_endpoints(Tc, Ti, delta, m, q):
    lo = cost_proxskip_vr(Tc, Ti, delta, m, 1, q)
    hi = cost_proxskip_vr(Tc, Ti, delta, m, m, q)
    mid = cost_proxskip_vr(Tc, Ti, delta, m, max(1, m // 2), q)
    assert lo <= mid * (1 + 1e-12) + 1e-12 and mid <= hi * (1 + 1e-12) + 1e-12


def test_empirical_cost_ratio():
    base = SimpleNamespace(comms=100, grad_evals=5000)
    vr = SimpleNamespace(comms=120, grad_evals=1000)
    assert empirical_cost_ratio(0.0, base, vr) == pytest.approx(100 / 120)
    assert empirical_cost_ratio(0.1, base, vr) == pytest.approx(600 / 220)
