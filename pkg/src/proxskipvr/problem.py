"""Objectives, regularizers, consensus lifting and the reference minimizer.

Every smooth objective here lives on the lifted space: iterates are arrays of
shape ``(M, d)`` (``M`` hubs, or workers, with a ``d``-dimensional model block
each) and the smooth part is

    f(x) = (1/M) * sum_i (1/m) * sum_j phi_ij(x_i),

so the ``m`` per-index functions ``phi~_j(x) = (1/M) sum_i phi_ij(x_i)`` average
to ``f``. A flat problem on ``R^d`` is the special case ``M = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Constants, check_finite, estimate_constants, power_iteration
from .errors import InvalidInputError, InvalidProblemError, NoConvergenceError


def softplus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_neg(z):
    """``1 / (1 + exp(z))``, evaluated on the stable branch."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


class FiniteSumObjective:
    """Base class for lifted finite-sum objectives.

    Subclasses provide vectorized component evaluation; everything else is
    derived here. Sums over components are taken in ascending index order.
    """

    kind = "abstract"
    M: int
    m: int
    d: int

    @property
    def shape(self):
        return (self.M, self.d)

    def component_values_all(self, x) -> np.ndarray:
        """Values ``phi_ij(x_i)`` as an ``(M, m)`` array."""
        raise NotImplementedError

    def component_grads_all(self, x) -> np.ndarray:
        """Gradients ``grad phi_ij(x_i)`` as an ``(M, m, d)`` array."""
        raise NotImplementedError

    def component_grads_at(self, x, subsets) -> np.ndarray:
        """Gradients for ``subsets`` of shape ``(M, k)``; returns ``(M, k, d)``."""
        raise NotImplementedError

    def value(self, x) -> float:
        x = self._check(x)
        return float(self.component_values_all(x).mean(axis=1).mean())

    def grad(self, x) -> np.ndarray:
        return self.hub_grads(x) / self.M

    def hub_grads(self, x) -> np.ndarray:
        """Per-hub gradients ``grad phi_i(x_i)``, shape ``(M, d)``."""
        return self.component_grads_all(self._check(x)).mean(axis=1)

    def tilde_grads(self, x) -> np.ndarray:
        """Gradients of ``phi~_j`` stacked as ``(m, M, d)``."""
        return np.swapaxes(self.component_grads_all(self._check(x)), 0, 1) / self.M

    def constants(self) -> Constants:
        raise NotImplementedError

    def reshard(self, M: int) -> FiniteSumObjective:
        """Split the ``M * m`` components into ``M`` equal shards in storage order."""
        raise NotImplementedError

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.M, self.d):
            if self.M == 1 and x.shape == (self.d,):
                return x[None, :]
            raise InvalidInputError(f"expected shape {(self.M, self.d)}, got {x.shape}")
        return x

    def _reshape_for(self, M):
        total = self.M * self.m
        if not 1 <= M <= total:
            raise InvalidInputError(f"cannot split {total} components into {M} shards")
        m = total // M
        return m, M * m


class LogisticObjective(FiniteSumObjective):
    """L2-regularized logistic loss, ``phi_ij(x) = softplus(-b_ij a_ij.x) + lam/2 |x|^2``.

    Args:
        A: features, shape ``(M, m, d)``.
        b: labels in {-1, +1}, shape ``(M, m)``.
        lam: regularization weight, must be positive.
    """

    kind = "logistic"

    def __init__(self, A, b, lam: float):
        A = np.ascontiguousarray(A, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        if A.ndim == 2:
            A, b = A[None], b[None]
        if A.ndim != 3 or b.shape != A.shape[:2]:
            raise InvalidProblemError(f"bad shapes A={A.shape}, b={b.shape}")
        if not np.all(np.abs(b) == 1.0):
            raise InvalidProblemError("labels must be -1 or +1")
        if not lam > 0:
            raise InvalidProblemError(f"regularization must be positive, got {lam}")
        check_finite(A, "features")
        self.A, self.b, self.lam = A, b, float(lam)
        self.M, self.m, self.d = A.shape
        self._constants = None

    def _margins(self, x):
        return self.b * np.einsum("imd,id->im", self.A, x)

    def component_values_all(self, x):
        x = self._check(x)
        return softplus(-self._margins(x)) + 0.5 * self.lam * np.sum(x * x, axis=1)[:, None]

    def component_grads_all(self, x):
        x = self._check(x)
        coef = -self.b * sigmoid_neg(self._margins(x))
        return coef[:, :, None] * self.A + self.lam * x[:, None, :]

    def component_grads_at(self, x, subsets):
        x = self._check(x)
        rows = np.arange(self.M)[:, None]
        A = self.A[rows, subsets]
        b = self.b[rows, subsets]
        coef = -b * sigmoid_neg(b * np.einsum("ikd,id->ik", A, x))
        return coef[:, :, None] * A + self.lam * x[:, None, :]

    def constants(self) -> Constants:
        """Hessian bound ``A_i^T A_i / (4m) + lam I`` per hub, scaled by ``1/M``."""
        if self._constants is None:
            L_hub = []
            for Ai in self.A:
                L_hub.append(power_iteration(lambda v, Ai=Ai: Ai.T @ (Ai @ v) / (4.0 * self.m), self.d))
            L = (max(L_hub) + self.lam) / self.M
            L_max = (float(np.max(np.sum(self.A**2, axis=2))) / 4.0 + self.lam) / self.M
            # the power-iteration estimate can exceed the exact bound by rounding
            L = min(L, L_max)
            self._constants = Constants(L, L_max, self.lam / self.M)
        return self._constants

    def reshard(self, M):
        m, keep = self._reshape_for(M)
        A = self.A.reshape(-1, self.d)[:keep].reshape(M, m, self.d)
        b = self.b.reshape(-1)[:keep].reshape(M, m)
        return LogisticObjective(A, b, self.lam)


class QuadraticObjective(FiniteSumObjective):
    """Convex quadratics ``phi_ij(x) = 1/2 (x - c_ij)^T H_ij (x - c_ij)``.

    Args:
        H: symmetric PSD matrices, shape ``(M, m, d, d)``.
        c: centers, shape ``(M, m, d)``.
    """

    kind = "quadratic"

    def __init__(self, H, c):
        H = np.ascontiguousarray(H, dtype=np.float64)
        c = np.ascontiguousarray(c, dtype=np.float64)
        if H.ndim != 4 or c.shape != H.shape[:3] or H.shape[2] != H.shape[3]:
            raise InvalidProblemError(f"bad shapes H={H.shape}, c={c.shape}")
        if not np.allclose(H, np.swapaxes(H, 2, 3), rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise InvalidProblemError("Hessians must be symmetric")
        eig_min = np.linalg.eigvalsh(H).min() if H.size else 0.0
        if eig_min < -1e-12 * max(1.0, np.abs(H).max()):
            raise InvalidProblemError("components must be convex")
        self.H, self.c = H, c
        self.M, self.m, self.d = c.shape
        self._constants = None

    @classmethod
    def single(cls, H, c):
        """One flat quadratic ``1/2 (x - c)^T H (x - c)`` (``M = m = 1``)."""
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return cls(H[None, None], c[None, None])

    def component_values_all(self, x):
        diff = self._check(x)[:, None, :] - self.c
        return 0.5 * np.einsum("imd,imd->im", diff, np.einsum("imde,ime->imd", self.H, diff))

    def component_grads_all(self, x):
        diff = self._check(x)[:, None, :] - self.c
        return np.einsum("imde,ime->imd", self.H, diff)

    def component_grads_at(self, x, subsets):
        x = self._check(x)
        rows = np.arange(self.M)[:, None]
        diff = x[:, None, :] - self.c[rows, subsets]
        return np.einsum("ikde,ike->ikd", self.H[rows, subsets], diff)

    def constants(self) -> Constants:
        if self._constants is None:
            hub_eigs = np.linalg.eigvalsh(self.H.mean(axis=1))
            comp_max = np.linalg.eigvalsh(self.H).max()
            self._constants = Constants(
                float(hub_eigs.max()) / self.M,
                float(comp_max) / self.M,
                float(hub_eigs.min()) / self.M,
            )
        return self._constants

    def minimizer_blocks(self) -> np.ndarray:
        """Per-hub minimizers of ``phi_i`` (requires each hub Hessian to be PD)."""
        Hbar = self.H.mean(axis=1)
        rhs = np.einsum("imde,ime->id", self.H, self.c) / self.m
        return np.linalg.solve(Hbar, rhs[..., None])[..., 0]

    def reshard(self, M):
        m, keep = self._reshape_for(M)
        d = self.d
        H = self.H.reshape(-1, d, d)[:keep].reshape(M, m, d, d)
        c = self.c.reshape(-1, d)[:keep].reshape(M, m, d)
        return QuadraticObjective(H, c)


class ZeroRegularizer:
    """``r = 0``; its prox is the identity."""

    kind = "zero"

    def prox(self, x, step: float):
        if not step > 0:
            raise InvalidInputError(f"prox step must be positive, got {step}")
        return np.array(x, dtype=np.float64, copy=True)

    def value(self, x) -> float:
        return 0.0

    def project(self, x):
        return np.asarray(x, dtype=np.float64)

    def gradient_mapping(self, x, g, step):
        return np.asarray(g, dtype=np.float64)


def consensus_prox(x, step: float = 1.0):
    """Projection onto ``x_1 = ... = x_M``: every block becomes the unweighted block mean.

    The output does not depend on ``step`` (the regularizer is an indicator).
    """
    if not step > 0:
        raise InvalidInputError(f"prox step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"expected an (M, d) block vector, got shape {x.shape}")
    return np.broadcast_to(x.mean(axis=0), x.shape).copy()


class ConsensusRegularizer:
    """Indicator of the consensus set; communication is its prox."""

    kind = "consensus"

    def prox(self, x, step: float):
        return consensus_prox(x, step)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return 0.0 if np.all(x == x[0]) else math.inf

    def project(self, x):
        return consensus_prox(x)

    def gradient_mapping(self, x, g, step):
        # (x - prox(x - step*g)) / step, arranged so a consensual x contributes exactly 0
        x = np.asarray(x, dtype=np.float64)
        return (x - x.mean(axis=0)) / step + np.asarray(g).mean(axis=0)


@dataclass
class CompositeProblem:
    """``min f(x) + r(x)`` with cached minimizer ``x_star`` and ``h_star = grad f(x_star)``."""

    f: FiniteSumObjective
    r: object = field(default_factory=ZeroRegularizer)
    x_star: np.ndarray | None = None
    h_star: np.ndarray | None = None
    _cstar: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self):
        return self.f.M

    @property
    def m(self):
        return self.f.m

    @property
    def d(self):
        return self.f.d

    @property
    def shape(self):
        return self.f.shape

    def value(self, x) -> float:
        return self.f.value(x)

    def grad(self, x):
        return self.f.grad(x)

    def constants(self) -> Constants:
        return estimate_constants(self.f)

    @property
    def has_reference(self) -> bool:
        return self.x_star is not None

    def with_reference(self, tol: float = 1e-12, x0=None) -> CompositeProblem:
        """Solve for and cache ``x_star``/``h_star``; returns ``self``."""
        if self.x_star is None:
            self.set_reference(solve_reference(self, tol=tol, x0=x0))
        return self

    def set_reference(self, x_star):
        self.x_star = np.array(self.f._check(x_star), dtype=np.float64)
        self.h_star = self.f.grad(self.x_star)
        self._cstar = None
        return self

    def component_grads_star(self):
        """Component gradients at ``x_star``, shape ``(M, m, d)`` (cached)."""
        if self.x_star is None:
            from .errors import InvalidStateError

            raise InvalidStateError("minimizer not cached; call with_reference() first")
        if self._cstar is None:
            self._cstar = self.f.component_grads_all(self.x_star)
        return self._cstar

    def f_star(self) -> float:
        return self.f.value(self.x_star)

    def objective_gap(self, x) -> float:
        """``f(P x) - f(x_star)`` with ``P`` the projection onto the domain of ``r``."""
        return self.f.value(self.r.project(x)) - self.f_star()


def lift(objective: FiniteSumObjective, M: int) -> CompositeProblem:
    """Consensus form of a flat objective: shard its components over ``M`` blocks.

    Components are split contiguously into equal shards and trailing remainders
    are dropped; shuffle beforehand (see :func:`proxskipvr.dataio.partition`).
    """
    if objective.M != 1:
        raise InvalidInputError("lift expects a flat objective (M = 1)")
    return CompositeProblem(objective.reshard(M), ConsensusRegularizer())


def flat(objective: FiniteSumObjective) -> CompositeProblem:
    """Unregularized problem ``min f`` over the objective's own block layout."""
    return CompositeProblem(objective, ZeroRegularizer())


def solve_reference(problem: CompositeProblem, tol: float = 1e-12, x0=None, max_iter: int = 10**7):
    """Deterministic proximal gradient descent with step ``1/L``.

    Iterates until the gradient mapping ``|x_{t+1} - x_t| / gamma`` is at most
    ``tol * max(1, |G(x_0)|)``.

    Raises:
        NoConvergenceError: if ``max_iter`` iterations do not suffice.
    """
    f, r = problem.f, problem.r
    L = problem.constants().L
    gamma = 1.0 / L
    x = np.zeros(f.shape) if x0 is None else np.array(f._check(x0), dtype=np.float64)
    x = r.project(x)
    scale = None
    for _ in range(max_iter):
        g = f.grad(x)
        res = float(np.linalg.norm(r.gradient_mapping(x, g, gamma)))
        if scale is None:
            scale = tol * max(1.0, res)
        if res <= scale:
            return x
        x = r.prox(x - gamma * g, gamma)
    raise NoConvergenceError(f"reference solve did not reach tol={tol} in {max_iter} iterations")


def random_quadratic(rng, M: int, m: int, d: int, kappa: float, spread: float = 1.0) -> QuadraticObjective:
    """Quadratics sharing one Hessian with spectrum log-spaced on ``[1, kappa]``.

    The Hessian is ``Q diag(s) Q^T`` for a random orthogonal ``Q``; centers are
    Gaussian with scale ``spread``, so blocks disagree while the lifted
    condition number is ``kappa`` (up to rounding; 1 when ``d = 1``).
    """
    if not kappa >= 1:
        raise InvalidInputError(f"condition number must be at least 1, got {kappa}")
    Q, R = np.linalg.qr(rng.normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    spectrum = np.logspace(0.0, math.log10(kappa), d)
    spectrum[0] = 1.0
    if d > 1:
        spectrum[-1] = float(kappa)
    Hs = (Q * spectrum) @ Q.T
    Hs = 0.5 * (Hs + Hs.T)
    H = np.broadcast_to(Hs, (M, m, d, d)).copy()
    c = spread * rng.normal((M, m, d))
    return QuadraticObjective(H, c)
