import numpy as np
import pytest

from proxskipvr import InvalidInputError, QuadraticObjective, flat
from proxskipvr import _backend
from proxskipvr.core import Rng
from proxskipvr.estimators import GD, HUB, LSVRG, SGD, Compressor
from proxskipvr.problem import random_quadratic
from proxskipvr.solver import SolverConfig, estimator_hyperparams, run

from conftest import lifted_logistic

pytestmark = pytest.mark.skipif(not _backend.compiled_available(), reason="compiled extension not built")

DISCRETE = ("iter", "comms", "grad_evals", "theta", "y_updated")


def both(problem, est, cfg, **kw):
    a = run(problem, est, cfg, backend="python", **kw)
    b = run(problem, est, cfg, backend="compiled", **kw)
    assert a.meta["backend"] == "python" and b.meta["backend"] == "compiled"
    return a, b


def assert_close(a, b, rtol=1e-9):
    for col in DISCRETE:
        assert np.array_equal(a[col], b[col]), col
    for col in ("dist_sq", "psi"):
        x, y = a[col], b[col]
        scale = np.maximum(np.abs(x), np.abs(x[0]) * 1e-6)
        assert np.all(np.abs(x - y) <= rtol * scale), col
    # f - f* cancels, so its error is absolute: a few ulps of an O(1) objective
    assert np.all(np.abs(a["fgap"] - b["fgap"]) <= rtol * np.abs(a["fgap"]) + 1e-14)
    assert a.meta["draws"] == b.meta["draws"]


@pytest.mark.parametrize("est", [GD(), SGD(3), LSVRG(3), HUB(2, Compressor("rand-k", 2)), LSVRG(10)],
                         ids=lambda e: e.describe())
def test_logistic_backends_agree(est):
    prob = lifted_logistic(seed=1, n=40, d=5, M=4)
    gamma, p, q = estimator_hyperparams(prob, est)
    a, b = both(prob, est, SolverConfig(gamma, p, 400, seed=5, q=q))
    assert_close(a, b)
    assert np.allclose(a.final_state.x, b.final_state.x, rtol=1e-9, atol=1e-12)


def test_quadratic_backends_agree():
    from proxskipvr import ConsensusRegularizer, CompositeProblem

    prob = CompositeProblem(random_quadratic(Rng(2), 3, 4, 4, 50.0), ConsensusRegularizer()).with_reference()
    est = HUB(2, Compressor("rand-k", 1))
    gamma, p, q = estimator_hyperparams(prob, est)
    a, b = both(prob, est, SolverConfig(gamma, p, 300, seed=1, q=q))
    assert_close(a, b)


def test_flat_problem_backends_agree():
    prob = flat(QuadraticObjective.single(np.diag([1.0, 4.0]), [1.0, 2.0])).with_reference()
    a, b = both(prob, GD(), SolverConfig(0.25, 1.0, 50), x0=[[3.0, -1.0]])
    assert_close(a, b)


def test_snapshots_and_target_agree():
    prob = lifted_logistic(seed=3)
    est = LSVRG(2)
    gamma, p, q = estimator_hyperparams(prob, est)
    cfg = SolverConfig(gamma, p, 20_000, seed=2, q=q, target=1e-8)
    a, b = both(prob, est, cfg, snapshots=[0, 10, 100, 600, 5000])
    assert a.status == b.status == "converged"
    assert len(a) == len(b)
    assert [s[0] for s in a.snapshots] == [s[0] for s in b.snapshots] == [0, 10, 100, 600]
    for (_, xa, ha), (_, xb, hb) in zip(a.snapshots, b.snapshots):
        assert np.allclose(xa, xb, rtol=1e-9, atol=1e-14)


def test_resume_from_state_matches_single_run():
    prob = lifted_logistic(seed=4)
    est = SGD(2)
    cfg = SolverConfig(0.01, 0.5, 200, seed=1)
    whole = run(prob, est, cfg, backend="compiled")
    first = run(prob, est, SolverConfig(0.01, 0.5, 100, seed=1), backend="compiled")
    assert np.array_equal(first["theta"], whole["theta"][:101])


def test_compiled_is_deterministic():
    prob = lifted_logistic(seed=5)
    est = HUB(3, Compressor("rand-k", 2))
    cfg = SolverConfig(0.01, 0.3, 500, seed=9, q=0.05)
    a = run(prob, est, cfg, backend="compiled")
    b = run(prob, est, cfg, backend="compiled")
    for col in a.columns:
        assert np.array_equal(a[col], b[col], equal_nan=True)


def test_env_var_forces_python(monkeypatch):
    prob = lifted_logistic()
    assert _backend.select("auto", prob, GD()) == "compiled"
    monkeypatch.setenv("PROXSKIPVR_BACKEND", "python")
    assert _backend.select("auto", prob, GD()) == "python"
    assert run(prob, GD(), SolverConfig(0.01, 0.5, 5)).meta["backend"] == "python"


def test_fallback_when_extension_missing(monkeypatch):
    prob = lifted_logistic()
    monkeypatch.setattr(_backend, "_kernels", None)
    assert not _backend.compiled_available()
    assert _backend.select("auto", prob, GD()) == "python"
    with pytest.raises(InvalidInputError):
        _backend.select("compiled", prob, GD())


def test_unsupported_estimator_falls_back():
    class Custom(SGD):
        def direction(self, problem, x, state, rng):
            return super().direction(problem, x, state, rng)

    prob = lifted_logistic()
    assert _backend.select("auto", prob, Custom(2)) == "python"
    with pytest.raises(InvalidInputError):
        _backend.select("compiled", prob, Custom(2))
    with pytest.raises(InvalidInputError):
        _backend.select("fast", prob, GD())


def test_objective_value_kernel_matches_python():
    prob = lifted_logistic(seed=6)
    f = prob.f
    x = Rng(1).normal(prob.shape)
    k = _backend.kernels()
    v = k.objective_value(0, np.ascontiguousarray(f.A), np.ascontiguousarray(f.b), f.lam,
                          np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1)), x)
    assert v == pytest.approx(f.value(x), rel=1e-13)
