"""Unbiased gradient estimators with their variance constants.

Each estimator is a small object with three roles: producing a direction
``g_t`` from the current iterate and control state, updating the control
state with the q-coin, and declaring the constants ``(A, B, C, A~, B~, C~)``
of the second-moment bounds

    E |g - grad f(x*)|^2  <= 2A D_f(x, x*) + B sigma     + C
    E sigma_next          <= 2A~ D_f(x, x*) + B~ sigma  + C~.

Randomness per call to :meth:`direction` is drawn in a fixed order: one
subset per hub (hubs ascending), then compressor draws for every sampled
client (hubs ascending, clients ascending).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Rng, subsets_from_raw
from .errors import InvalidInputError, InvalidParamsError, InvalidStateError


@dataclass(frozen=True)
class Compressor:
    """Unbiased compression operator: ``identity`` or ``rand-k`` sparsification."""

    kind: str = "identity"
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "rand-k"):
            raise InvalidInputError(f"unknown compressor kind {self.kind!r}")
        if self.kind == "rand-k" and (self.k is None or self.k < 1):
            raise InvalidInputError(f"rand-k needs k >= 1, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> Compressor:
        """Parse ``identity`` or ``rand-k:K``."""
        text = text.strip()
        if text == "identity":
            return cls()
        if text.startswith("rand-k:"):
            try:
                return cls("rand-k", int(text.split(":", 1)[1]))
            except ValueError:
                pass
        raise InvalidInputError(f"cannot parse compressor {text!r}")

    def __str__(self):
        return "identity" if self.kind == "identity" else f"rand-k:{self.k}"

    def kept(self, d: int) -> int:
        if self.kind == "identity":
            return d
        if self.k > d:
            raise InvalidInputError(f"rand-k needs k <= d, got k={self.k}, d={d}")
        return self.k

    def omega(self, d: int) -> float:
        return d / self.kept(d) - 1.0


def apply_compressor(c: Compressor, x, rng: Rng) -> np.ndarray:
    """Compress one vector; rand-k keeps ``k`` random coordinates scaled by ``d/k``."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    k = c.kept(d)
    if k == d:
        return x.copy()
    idx = subsets_from_raw(rng.raw(k), d, k)
    out = np.zeros_like(x)
    out[idx] = x[idx] * (d / k)
    return out


def _compress_batch(diff, k, raw):
    """Apply rand-k to the last axis of ``diff`` using pre-drawn raw values of shape ``(..., k)``."""
    d = diff.shape[-1]
    mask = np.zeros(diff.shape, dtype=bool)
    np.put_along_axis(mask, subsets_from_raw(raw, d, k), True, axis=-1)
    return np.where(mask, diff * (d / k), 0.0)


@dataclass(frozen=True)
class EstimatorParams:
    """Constants of the second-moment bounds plus the derived ``W`` and ``beta``."""

    A: float
    B: float = 0.0
    C: float = 0.0
    A_t: float = 0.0
    B_t: float = 0.0
    C_t: float = 0.0
    W: float = 0.0
    beta: float = 0.0

    @classmethod
    def build(cls, A, B=0.0, C=0.0, A_t=0.0, B_t=0.0, C_t=0.0, gap=None) -> EstimatorParams:
        """``gap`` is ``1 - B~`` when known exactly (e.g. the refresh probability)."""
        for name, v in (("A", A), ("B", B), ("C", C), ("A~", A_t), ("B~", B_t), ("C~", C_t)):
            if not v >= 0:
                raise InvalidParamsError(f"constant {name} must be nonnegative, got {v}")
        W, beta = derive_W_beta(B, B_t, gap)
        return cls(float(A), float(B), float(C), float(A_t), float(B_t), float(C_t), W, beta)

    @property
    def effective_smoothness(self) -> float:
        """``A + W A~``, the quantity bounding the stepsize."""
        return self.A + self.W * self.A_t


def derive_W_beta(B: float, B_tilde: float, gap: float | None = None) -> tuple[float, float]:
    """``W = 2B/(1-B~)`` and ``beta = (B + W B~)/W``; ``(0, B~)`` when ``B = 0``.

    ``gap`` overrides ``1 - B~``; with ``B~ = 1 - q`` for tiny ``q`` the
    subtraction loses most of ``q``'s digits.
    """
    if not B_tilde < 1:
        raise InvalidParamsError(f"need B~ < 1, got {B_tilde}")
    if B > 0:
        W = 2.0 * B / (1.0 - B_tilde if gap is None else gap)
        return W, (B + W * B_tilde) / W
    return 0.0, float(B_tilde)


def minibatch_coefficients(tau: int, m: int) -> tuple[float, float]:
    """Weights ``(c1, c2)`` with ``L(tau) = c1 L_max + c2 L``; ``c1 + c2 = 1``."""
    if not 1 <= tau <= m:
        raise InvalidInputError(f"need 1 <= tau <= m, got tau={tau}, m={m}")
    if m == 1:
        return 1.0, 0.0
    den = tau * (m - 1)
    return (m - tau) / den, m * (tau - 1) / den


def minibatch_smoothness(tau: int, m: int, L: float, L_max: float) -> float:
    """Expected smoothness of the tau-nice minibatch estimator over ``m`` components."""
    if not L_max >= L:
        raise InvalidInputError(f"need L_max >= L, got L={L}, L_max={L_max}")
    if not 1 <= tau <= m:
        raise InvalidInputError(f"need 1 <= tau <= m, got tau={tau}, m={m}")
    if m == 1:
        return float(L)
    if tau == 1:
        return float(L_max)
    if tau == m:
        return float(L)
    # written as L plus a nonnegative excess so that rounding keeps it monotone in tau
    return L + (m - tau) * (L_max - L) / (tau * (m - 1))


@dataclass
class EstimatorState:
    """Control state: ``y``, component gradients at ``y`` and their hub means.

    ``sigma`` is the estimator's sigma(y); NaN when no minimizer is cached.
    """

    y: np.ndarray | None = None
    Gy: np.ndarray | None = None
    hy: np.ndarray | None = None
    sigma: float = 0.0

    def copy(self) -> EstimatorState:
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return EstimatorState(cp(self.y), cp(self.Gy), cp(self.hy), self.sigma)


class Estimator:
    """Base class; subclasses fill in :meth:`direction` and :meth:`params`."""

    kind = "abstract"
    has_control = False
    tau: int | None = None
    compressor = Compressor()

    def validate(self, problem) -> None:
        if self.tau is not None and not 1 <= self.tau <= problem.m:
            raise InvalidInputError(f"need 1 <= tau <= m, got tau={self.tau}, m={problem.m}")
        self.compressor.kept(problem.d)

    def init_state(self, problem, x0) -> EstimatorState:
        return EstimatorState()

    def direction(self, problem, x, state: EstimatorState, rng: Rng) -> np.ndarray:
        raise NotImplementedError

    def refresh(self, problem, x, state: EstimatorState, rng: Rng, q: float) -> bool:
        """Draw the q-coin; estimators without control state draw nothing."""
        return False

    def params(self, problem, q: float | None = None) -> EstimatorParams:
        raise NotImplementedError

    def sigma(self, problem, state: EstimatorState) -> float:
        return 0.0

    def step_cost(self, m: int, refreshed: bool) -> int:
        """Component-gradient evaluations per worker for one step."""
        return m

    def draws_per_call(self, problem) -> int:
        """Raw draws consumed by one :meth:`direction` call."""
        return 0

    def sample(self, problem, x, state: EstimatorState, raw) -> np.ndarray:
        """Directions for a batch of pre-drawn raw arrays of shape ``(N, draws_per_call)``.

        Row ``s`` equals what :meth:`direction` would return after consuming
        ``raw[s]`` from the stream.
        """
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class GD(Estimator):
    """Exact gradient ``g = grad f(x)``."""

    kind = "gd"

    def direction(self, problem, x, state, rng):
        return problem.f.grad(x)

    def params(self, problem, q=None):
        return EstimatorParams.build(A=problem.constants().L)

    def sample(self, problem, x, state, raw):
        g = problem.f.grad(x)
        return np.broadcast_to(g, (len(raw),) + g.shape)


def _subset_raw_count(M, m, tau):
    return 0 if tau == m else M * tau


class SGD(Estimator):
    """Minibatch estimator: per hub, the mean over a fresh tau-nice subset.

    Args:
        tau: minibatch size per hub.
        variance: ``"exact"`` computes Var(g(x*)) in closed form; ``"mc"``
            estimates it from ``mc_samples`` draws.
    """

    kind = "sgd"

    def __init__(self, tau: int, variance: str = "exact", mc_samples: int = 100_000, mc_seed: int = 0):
        if variance not in ("exact", "mc"):
            raise InvalidInputError(f"unknown variance mode {variance!r}")
        self.tau = int(tau)
        self.variance = variance
        self.mc_samples = mc_samples
        self.mc_seed = mc_seed

    def _subsets(self, problem, raw):
        M, m, tau = problem.M, problem.m, self.tau
        return subsets_from_raw(raw.reshape(raw.shape[:-1] + (M, tau)), m, tau)

    def direction(self, problem, x, state, rng):
        M, m, tau = problem.M, problem.m, self.tau
        if tau == m:
            return problem.f.grad(x)
        S = self._subsets(problem, rng.raw(M * tau))
        return problem.f.component_grads_at(x, S).mean(axis=1) / M

    def draws_per_call(self, problem):
        return _subset_raw_count(problem.M, problem.m, self.tau)

    def sample(self, problem, x, state, raw):
        M, m, tau = problem.M, problem.m, self.tau
        if tau == m:
            return GD().sample(problem, x, state, raw)
        G = problem.f.component_grads_all(x)
        S = self._subsets(problem, np.asarray(raw, dtype=np.uint64))
        rows = np.arange(M)[:, None]
        return G[rows, S].mean(axis=-2) / M

    def step_cost(self, m, refreshed):
        return self.tau

    def params(self, problem, q=None):
        c = problem.constants()
        Lt = minibatch_smoothness(self.tau, problem.m, c.L, c.L_max)
        return EstimatorParams.build(A=2.0 * Lt, C=2.0 * sgd_variance(problem, self))

    def describe(self):
        return f"sgd(tau={self.tau})"


def sgd_variance(problem, est: SGD, mode: str | None = None) -> float:
    """``Var(g(x*))`` of the minibatch estimator, ``E|g(x*) - grad f(x*)|^2``."""
    mode = mode or est.variance
    G = problem.component_grads_star()
    M, m = problem.M, problem.m
    if mode == "exact":
        c1, _ = minibatch_coefficients(est.tau, m)
        spread = G - G.mean(axis=1, keepdims=True)
        return float(c1 * np.sum(spread**2) / m / M**2)
    N = est.mc_samples
    rng = Rng(est.mc_seed)
    h = problem.h_star
    total = 0.0
    for start in range(0, N, 10_000):
        n = min(10_000, N - start)
        raw = rng.raw(n * est.draws_per_call(problem)).reshape(n, -1)
        g = est.sample(problem, problem.x_star, None, raw)
        total += float(np.sum((g - h) ** 2))
    return total / N


class HUB(Estimator):
    """Compressed loopless variance-reduced estimator over hubs.

    Per hub ``i`` with subset ``S_i``:
    ``g_i = (1/tau) sum_{j in S_i} Q(grad phi_ij(x_i) - grad phi_ij(y_i)) + grad phi_i(y_i)``,
    and the global block is ``g_i / M``. The control ``y`` is refreshed to the
    current iterate with probability ``q``.
    """

    kind = "hub"
    has_control = True

    def __init__(self, tau: int, compressor: Compressor | None = None):
        self.tau = int(tau)
        self.compressor = compressor or Compressor()

    def init_state(self, problem, x0):
        state = EstimatorState()
        self._set_control(problem, np.array(x0, dtype=np.float64), state)
        return state

    def _set_control(self, problem, y, state):
        state.y = y
        state.Gy = problem.f.component_grads_all(y)
        state.hy = state.Gy.mean(axis=1)
        state.sigma = self.sigma(problem, state) if problem.has_reference else math.nan

    def direction(self, problem, x, state, rng):
        M, m, d, tau = problem.M, problem.m, problem.d, self.tau
        k = self.compressor.kept(d)
        rows = np.arange(M)[:, None]
        if tau == m:
            S = np.broadcast_to(np.arange(m), (M, m))
        else:
            S = subsets_from_raw(rng.raw(M * tau).reshape(M, tau), m, tau)
        diff = problem.f.component_grads_at(x, S) - state.Gy[rows, S]
        if k < d:
            diff = _compress_batch(diff, k, rng.raw(M * tau * k).reshape(M, tau, k))
        return (diff.mean(axis=1) + state.hy) / M

    def draws_per_call(self, problem):
        M, m, d, tau = problem.M, problem.m, problem.d, self.tau
        k = self.compressor.kept(d)
        return _subset_raw_count(M, m, tau) + (M * tau * k if k < d else 0)

    def sample(self, problem, x, state, raw):
        M, m, d, tau = problem.M, problem.m, problem.d, self.tau
        k = self.compressor.kept(d)
        raw = np.asarray(raw, dtype=np.uint64)
        N = raw.shape[0]
        ns = _subset_raw_count(M, m, tau)
        if tau == m:
            S = np.broadcast_to(np.arange(m), (N, M, m))
        else:
            S = subsets_from_raw(raw[:, :ns].reshape(N, M, tau), m, tau)
        D = problem.f.component_grads_all(x) - state.Gy
        diff = D[np.arange(M)[:, None], S]
        if k < d:
            diff = _compress_batch(diff, k, raw[:, ns:].reshape(N, M, tau, k))
        return (diff.mean(axis=-2) + state.hy) / M

    def refresh(self, problem, x, state, rng, q):
        if rng.bernoulli(q):
            self._set_control(problem, np.array(x, dtype=np.float64, copy=True), state)
            return True
        return False

    def step_cost(self, m, refreshed):
        return self.tau + (m if refreshed else self.tau)

    def sigma_weights(self, m: int) -> tuple[float, float]:
        """``(c1, c2)`` in ``sigma = c1 * mean_j |dG_j|^2 + c2 * |grad f(y) - h*|^2``."""
        return 1.0, 0.0

    def sigma(self, problem, state):
        if state.Gy is None:
            raise InvalidStateError("estimator state has no control vector")
        return sigma_from_tables(problem, state.Gy, state.hy, *self.sigma_weights(problem.m))

    def sigma_at(self, problem, y) -> float:
        """sigma evaluated at an arbitrary control point ``y``."""
        G = problem.f.component_grads_all(y)
        return sigma_from_tables(problem, G, G.mean(axis=1), *self.sigma_weights(problem.m))

    def params(self, problem, q=None):
        if q is None or not 0 < q <= 1:
            raise InvalidParamsError(f"need 0 < q <= 1, got {q}")
        c = problem.constants()
        Lt = minibatch_smoothness(self.tau, problem.m, c.L, c.L_max)
        w = self.compressor.omega(problem.d) / self.tau
        return EstimatorParams.build(
            A=4.0 * (Lt + w * c.L_max), B=4.0 * (1.0 + w), A_t=q * c.L_max, B_t=1.0 - q, gap=q
        )

    def describe(self):
        return f"hub(tau={self.tau},{self.compressor})"


class LSVRG(HUB):
    """Loopless SVRG: the HUB estimator without compression.

    Draws and iterates coincide with ``HUB(tau, identity)``; the declared
    constants and sigma follow the minibatch control-variate analysis.
    """

    kind = "lsvrg"

    def __init__(self, tau: int):
        super().__init__(tau, Compressor())

    def sigma_weights(self, m):
        return minibatch_coefficients(self.tau, m)

    def params(self, problem, q=None):
        if q is None or not 0 < q <= 1:
            raise InvalidParamsError(f"need 0 < q <= 1, got {q}")
        c = problem.constants()
        Lt = minibatch_smoothness(self.tau, problem.m, c.L, c.L_max)
        return EstimatorParams.build(A=2.0 * Lt, B=2.0, A_t=q * Lt, B_t=1.0 - q, gap=q)

    def describe(self):
        return f"lsvrg(tau={self.tau})"


def sigma_from_tables(problem, Gy, hy, c1, c2) -> float:
    """``c1 (1/M^2)(1/m) sum_ij |Gy_ij - G*_ij|^2 + c2 |hy/M - h*|^2``."""
    M, m = problem.M, problem.m
    G = problem.component_grads_star()
    s = c1 * float(np.sum((Gy - G) ** 2)) / m / M**2
    if c2:
        s += c2 * float(np.sum((hy / M - problem.h_star) ** 2))
    return s


def make_estimator(kind: str, tau: int | None = None, compressor: Compressor | str | None = None) -> Estimator:
    """Construct an estimator by name: ``gd``, ``sgd``, ``lsvrg`` or ``hub``."""
    if isinstance(compressor, str):
        compressor = Compressor.parse(compressor)
    if kind == "gd":
        return GD()
    if tau is None:
        raise InvalidInputError(f"estimator {kind!r} needs a minibatch size")
    if kind == "sgd":
        return SGD(tau)
    if kind == "lsvrg":
        return LSVRG(tau)
    if kind == "hub":
        return HUB(tau, compressor)
    raise InvalidInputError(f"unknown estimator {kind!r}")


def gd_estimator(problem, x):
    """Functional form: ``(g, params)``."""
    return GD().direction(problem, x, None, None), GD().params(problem)


def sgd_minibatch_estimator(problem, x, tau, rng):
    est = SGD(tau)
    est.validate(problem)
    g = est.direction(problem, x, None, rng)
    return g, (est.params(problem) if problem.has_reference else None)


def _vr_estimator(est, problem, x, state, q, rng):
    if not 0 < q <= 1:
        raise InvalidInputError(f"need 0 < q <= 1, got {q}")
    est.validate(problem)
    state = state.copy()
    g = est.direction(problem, x, state, rng)
    est.refresh(problem, x, state, rng, q)
    return g, state, est.params(problem, q)


def lsvrg_estimator(problem, x, state, tau, q, rng):
    """Functional form: ``(g, new_state, params)``; ``state`` is not mutated."""
    return _vr_estimator(LSVRG(tau), problem, x, state, q, rng)


def hub_estimator(problem, x, state, tau, q, compressor, rng):
    """Functional form: ``(g, new_state, params)``; ``state`` is not mutated."""
    return _vr_estimator(HUB(tau, compressor), problem, x, state, q, rng)
