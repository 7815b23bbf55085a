import numpy as np
import pytest

from proxskipvr import CompositeProblem, LogisticObjective, QuadraticObjective, lift
from proxskipvr._backend import compiled_available
from proxskipvr.core import Rng

BACKENDS = ["python"] + (["compiled"] if compiled_available() else [])


def logistic_data(seed, n, d, lam=0.05):
    rng = Rng(seed)
    A = rng.normal((n, d))
    b = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    return A, b, lam


def flat_logistic(seed=0, n=40, d=5, lam=0.05):
    A, b, lam = logistic_data(seed, n, d, lam)
    return LogisticObjective(A[None], b[None], lam)


def lifted_logistic(seed=0, n=40, d=5, M=2, lam=0.05):
    return lift(flat_logistic(seed, n, d, lam), M).with_reference()


def random_spd(rng, d, lo=0.5, hi=3.0):
    Q, _ = np.linalg.qr(rng.normal((d, d)))
    return (Q * np.linspace(lo, hi, d)) @ Q.T


@pytest.fixture
def logistic_problem():
    return lifted_logistic()


@pytest.fixture
def quad_problem():
    """Heterogeneous lifted quadratic: 3 blocks x 4 components in R^3."""
    rng = Rng(11)
    M, m, d = 3, 4, 3
    H = np.stack([np.stack([random_spd(rng, d) for _ in range(m)]) for _ in range(M)])
    c = rng.normal((M, m, d))
    from proxskipvr import ConsensusRegularizer

    return CompositeProblem(QuadraticObjective(H, c), ConsensusRegularizer()).with_reference()


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param
