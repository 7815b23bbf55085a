import math

import numpy as np
import pytest

from proxskipvr import ConsensusRegularizer, InvalidInputError, InvalidStateError, ZeroRegularizer, flat
from proxskipvr.estimators import GD, HUB, LSVRG, SGD, Compressor, EstimatorParams
from proxskipvr.solver import SolverConfig, estimator_hyperparams
from proxskipvr.verify import (
    CheckReport,
    check_assumption4,
    check_minibatch_lemma,
    check_neighborhood,
    check_prox_facts,
    check_theorem1,
    check_unbiasedness,
    log_checkpoints,
    random_states,
    reports_to_csv,
    reports_to_text,
    theorem1_summary,
    trajectory_states,
)

from conftest import flat_logistic, lifted_logistic


def test_report_pass_rule():
    rep = CheckReport.from_items("demo", 10, [(0, 0.5, 0.0), (1, -0.1, 0.2), (2, -0.3, 0.2), (3, -1.0, 0.1)])
    assert not rep.passed
    assert rep.first_violation == 2
    assert (rep.margin, rep.slack) == (-1.0, 0.1)
    ok = CheckReport.from_items("demo", 10, [(0, -0.1, 0.1)])
    assert ok.passed and ok.first_violation is None
    with pytest.raises(InvalidInputError):
        CheckReport.from_items("empty", 1, [])


def test_report_serialization():
    reps = [CheckReport.from_items("a", 5, [(0, 1.0, 0.0)]), CheckReport.from_items("b", 5, [(0, -2.0, 0.5)])]
    text = reports_to_text(reps)
    assert text.splitlines()[0].startswith("PASS a samples=5")
    assert "FAIL b" in text and "first_violation=0" in text
    csv_lines = reports_to_csv(reps).splitlines()
    assert csv_lines[0] == "check,samples,margin,slack,pass,first_violation"
    assert csv_lines[2] == "b,5,-2.0,0.5,0,0"


def test_unbiasedness_gd_exact(logistic_problem):
    rep = check_unbiasedness(GD(), logistic_problem, random_states(logistic_problem, 4), N=1000)
    assert rep.passed and rep.margin == 0.0


def test_unbiasedness_lsvrg_equal_control(logistic_problem):
    pts = [(x, x) for x, _ in random_states(logistic_problem, 3)]
    rep = check_unbiasedness(LSVRG(2), logistic_problem, pts, N=2000)
    assert rep.passed


def test_unbiasedness_needs_samples(logistic_problem):
    with pytest.raises(InvalidInputError):
        check_unbiasedness(SGD(2), logistic_problem, random_states(logistic_problem, 1), N=10)


def test_assumption4_gd_exact(logistic_problem):
    rep = check_assumption4(GD(), logistic_problem, random_states(logistic_problem, 5, scale=2.0), N=1000)
    assert rep.passed
    assert len(rep.items) == 10


def test_assumption4_needs_reference():
    with pytest.raises(InvalidStateError):
        check_assumption4(GD(), flat(flat_logistic()), [np.zeros((1, 5))])


def test_assumption4_sgd_and_hub():
    prob = lifted_logistic(seed=2, n=40, d=4, M=2)
    cfg = SolverConfig(0.05, 0.5, 200, seed=0, q=0.1)
    states = trajectory_states(prob, HUB(2, Compressor("rand-k", 2)), cfg, count=5, x0=np.ones(prob.shape))
    assert check_assumption4(SGD(2), prob, states, N=20_000).passed
    rep = check_assumption4(HUB(2, Compressor("rand-k", 2)), prob, states, N=20_000, q=0.1)
    assert rep.passed, rep.to_text()


def test_assumption4_catches_understated_constants():
    class Optimistic(SGD):
        def params(self, problem, q=None):
            return EstimatorParams.build(A=0.01 * problem.constants().L)

    prob = lifted_logistic(seed=2)
    rep = check_assumption4(Optimistic(2), prob, random_states(prob, 3, scale=3.0), N=5000)
    assert not rep.passed and rep.first_violation == 0


def test_assumption4_deterministic():
    prob = lifted_logistic(seed=2)
    states = random_states(prob, 2)
    a = check_assumption4(LSVRG(2), prob, states, N=5000, q=0.3, seed=4)
    b = check_assumption4(LSVRG(2), prob, states, N=5000, q=0.3, seed=4)
    assert a.items == b.items


def test_minibatch_lemma_all_tau():
    prob = lifted_logistic(seed=7, n=40, d=4, M=2)
    m = prob.m
    pts = [x for x, _ in random_states(prob, 4, scale=2.0)]
    for tau in sorted({1, 2, math.ceil(m / 2), m}):
        rep = check_minibatch_lemma(prob, tau, pts, N=20_000)
        assert rep.passed, rep.to_text()


def test_log_checkpoints():
    cps = log_checkpoints(1000)
    assert cps[0] == 1 and cps[-1] == 1000
    assert cps == sorted(set(cps))
    assert log_checkpoints(1) == [1]


def test_theorem1_gd_p1_per_seed():
    prob = flat(flat_logistic(seed=1)).with_reference()
    c = prob.constants()
    gamma = 1.0 / c.L
    cfg = SolverConfig(gamma, 1.0, 200)
    s = theorem1_summary(prob, GD(), cfg, range(3), x0=np.ones((1, 5)))
    assert np.all(s["std"] <= 1e-12 * s["mean"])
    rate = (1 - gamma * c.mu) ** s["checkpoints"] * s["psi0"]
    assert np.all(s["mean"] <= rate * (1 + 1e-12))


def test_theorem1_lsvrg_passes():
    prob = lifted_logistic(seed=1, n=20, d=3, M=2, lam=0.1)
    est = LSVRG(2)
    gamma, p, q = estimator_hyperparams(prob, est)
    cfg = SolverConfig(gamma, p, 2000, q=q)
    rep = check_theorem1(prob, est, cfg, range(100), x0=np.ones(prob.shape))
    assert rep.passed, rep.to_text()
    with pytest.raises(InvalidInputError):
        check_theorem1(prob, est, cfg, range(5))


def test_neighborhood_sgd():
    prob = lifted_logistic(seed=1, n=20, d=3, M=2, lam=0.1)
    est = SGD(2)
    gamma, p, _ = estimator_hyperparams(prob, est)
    rep = check_neighborhood(prob, est, SolverConfig(gamma, p, 4000), range(20))
    assert rep.passed, rep.to_text()


def test_prox_facts_pass():
    for reg in (ConsensusRegularizer(), ZeroRegularizer()):
        rep = check_prox_facts(reg, trials=10_000)
        assert rep.passed, rep.to_text()
        assert len(rep.items) == 30_000


def test_prox_facts_zero_regularizer_is_tight():
    rep = check_prox_facts(ZeroRegularizer(), trials=200)
    firm = [m for i, m, _ in rep.items if i % 3 == 0]
    assert np.allclose(firm, 0.0, atol=1e-9)


def test_prox_facts_catch_expanding_map():
    class Expanding(ZeroRegularizer):
        kind = "expanding"

        def prox(self, x, step):
            return 2.0 * x

    rep = check_prox_facts(Expanding(), trials=50)
    assert not rep.passed and rep.first_violation == 0


def test_trajectory_states_count(logistic_problem):
    cfg = SolverConfig(0.01, 0.5, 50, q=0.2)
    states = trajectory_states(logistic_problem, LSVRG(2), cfg, count=6)
    assert len(states) == 6
    assert np.array_equal(states[0][0], np.zeros(logistic_problem.shape))
    with pytest.raises(InvalidInputError):
        trajectory_states(logistic_problem, LSVRG(2), SolverConfig(0.01, 0.5, 3, q=0.2), count=20)
