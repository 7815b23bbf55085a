"""The ProxSkip-VR iteration, theory-driven hyperparameters and baselines.

One step, given the shift ``h`` and an estimator direction ``g``:

    x_hat = x - gamma (g - h)
    theta ~ Bernoulli(p)
    x+    = prox_{(gamma/p) r}(x_hat - (gamma/p) h)  if theta else x_hat
    h+    = h + (p/gamma)(x+ - x_hat)

followed by the estimator's q-coin, which may reset its control point to the
iterate the direction was computed at. Draws per step come in that order:
estimator randomness, theta, q-coin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .core import Rng
from .errors import DivergenceError, InvalidInputError, InvalidParamsError, InvalidStateError
from .estimators import GD, HUB, SGD, Estimator, EstimatorParams, EstimatorState

COLUMNS = ("iter", "comms", "grad_evals", "dist_sq", "psi", "fgap", "theta", "y_updated")
_INT_COLUMNS = ("iter", "comms", "grad_evals", "theta", "y_updated")


@dataclass
class SolverConfig:
    """Hyperparameters of one run.

    ``target`` stops the run once ``psi_t / psi_0 <= target``.
    """

    gamma: float
    p: float
    T: int
    seed: int = 0
    q: float | None = None
    target: float | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidInputError(f"stepsize must be positive, got {self.gamma}")
        if not 0 < self.p <= 1:
            raise InvalidInputError(f"need 0 < p <= 1, got {self.p}")
        if self.q is not None and not 0 < self.q <= 1:
            raise InvalidInputError(f"need 0 < q <= 1, got {self.q}")
        if int(self.T) < 1:
            raise InvalidInputError(f"need T >= 1, got {self.T}")
        if self.target is not None and not self.target > 0:
            raise InvalidInputError(f"target must be positive, got {self.target}")
        self.T = int(self.T)


@dataclass
class SolverState:
    x: np.ndarray
    h: np.ndarray
    est: EstimatorState = field(default_factory=EstimatorState)
    t: int = 0
    last_theta: int = 0
    last_refreshed: bool = False

    def copy(self) -> SolverState:
        return SolverState(self.x.copy(), self.h.copy(), self.est.copy(), self.t, self.last_theta, self.last_refreshed)


@dataclass
class RunTrace:
    """Per-iteration metrics; row 0 describes the initial state."""

    columns: dict
    meta: dict
    status: str = "budget"
    warnings: list = field(default_factory=list)
    final_state: SolverState | None = None
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.columns["iter"])

    def __getitem__(self, name):
        return self.columns[name]

    @property
    def comms(self) -> int:
        return int(self.columns["comms"][-1])

    @property
    def grad_evals(self) -> int:
        return int(self.columns["grad_evals"][-1])

    @property
    def iterations(self) -> int:
        return int(self.columns["iter"][-1])

    def psi_ratio(self) -> np.ndarray:
        psi = self.columns["psi"]
        return psi / psi[0]

    def first_reaching(self, eps: float, column: str = "psi"):
        """Index of the first row with ``column / column[0] <= eps``, or None."""
        v = self.columns[column]
        hit = np.nonzero(v <= eps * v[0])[0]
        return int(hit[0]) if hit.size else None

    def truncated(self, rows: int) -> RunTrace:
        cols = {k: v[:rows].copy() for k, v in self.columns.items()}
        return RunTrace(cols, dict(self.meta), self.status, list(self.warnings), None, list(self.snapshots))


def _empty_columns(n):
    cols = {}
    for name in COLUMNS:
        cols[name] = np.zeros(n, dtype=np.int64) if name in _INT_COLUMNS else np.full(n, np.nan)
    return cols


def lyapunov(state: SolverState, problem, gamma: float, p: float, W: float, sigma: float | None = None) -> float:
    """``|x - x*|^2 + (gamma/p)^2 |h - h*|^2 + gamma^2 W sigma``."""
    if problem.x_star is None:
        raise InvalidStateError("Lyapunov function needs a cached minimizer")
    if sigma is None:
        sigma = state.est.sigma if W else 0.0
    psi = float(np.sum((state.x - problem.x_star) ** 2))
    # products rather than powers: float ** raises on overflow, * gives inf
    s = gamma / p
    psi += s * s * float(np.sum((state.h - problem.h_star) ** 2))
    if W:
        psi += gamma * gamma * W * sigma
    return psi


def theoretical_bound(psi0, gamma, mu, p, beta, C, C_t, W, T) -> float:
    """Upper bound on ``E[psi_T]``: geometric contraction plus the noise floor."""
    rate_floor = min(gamma * mu, p * p, 1.0 - beta)
    if not rate_floor > 0:
        raise InvalidParamsError("no contraction: min(gamma mu, p^2, 1 - beta) must be positive")
    rho = max(1.0 - gamma * mu, beta, 1.0 - p * p)
    return rho**T * psi0 + (C + W * C_t) * gamma**2 / rate_floor


def contraction_factor(gamma, mu, p, beta) -> float:
    return max(1.0 - gamma * mu, beta, 1.0 - p * p)


def theory_hyperparams(params, mu: float, has_control: bool | None = None, epsilon: float | None = None,
                       iterations: int = 20, damping: float = 0.5, fallback_gamma: float | None = None):
    """Stepsize and probabilities prescribed by the convergence theory.

    Args:
        params: an :class:`EstimatorParams`, or a callable ``q -> EstimatorParams``
            for estimators whose constants depend on ``q``; the coupled
            ``(gamma, q)`` relations are then solved by damped fixed-point
            iteration from ``q = 1``.
        mu: strong convexity constant.
        has_control: whether to return ``q`` (defaults to ``callable(params)``).
        epsilon: when given and ``C > 0``, also enforce ``gamma <= epsilon mu / (2C)``
            so the noise floor stays below ``epsilon / 2``.
        fallback_gamma: used when the fixed point does not settle.

    Returns:
        ``(gamma, p, q)``; ``q`` is None without control state.
    """
    if not mu > 0:
        raise InvalidParamsError(f"need mu > 0, got {mu}")
    coupled = callable(params)
    if has_control is None:
        has_control = coupled

    def gamma_for(pr: EstimatorParams):
        s = pr.effective_smoothness
        if not s > 0:
            raise InvalidParamsError("A + W A~ must be positive")
        g = min(1.0 / mu, 1.0 / s)
        if epsilon is not None and (pr.C + pr.W * pr.C_t) > 0:
            g = min(g, epsilon * mu / (2.0 * (pr.C + pr.W * pr.C_t)))
        return g

    if coupled:
        q = 1.0
        gamma = gamma_for(params(q))
        for _ in range(iterations):
            q = (1 - damping) * q + damping * min(1.0, 2.0 * gamma * mu)
            gamma = gamma_for(params(q))
            if abs(q - min(1.0, 2.0 * gamma * mu)) <= 1e-12 * q:
                break
        # snap q onto its rule and confirm the stepsize is consistent with it
        q = min(1.0, 2.0 * gamma * mu)
        if not math.isclose(gamma_for(params(q)), gamma, rel_tol=1e-12):
            if fallback_gamma is None:
                raise InvalidParamsError("coupled (gamma, q) relations did not settle")
            gamma = min(1.0 / mu, fallback_gamma)
            q = min(1.0, 2.0 * gamma * mu)
    else:
        gamma = gamma_for(params)
        q = min(1.0, 2.0 * gamma * mu) if has_control else None
    p = min(1.0, math.sqrt(gamma * mu))
    return gamma, p, q


def estimator_hyperparams(problem, estimator: Estimator, epsilon: float | None = None):
    """Theory hyperparameters ``(gamma, p, q)`` for ``estimator`` on ``problem``."""
    mu = problem.constants().mu
    if estimator.has_control:
        fallback = None
        if estimator.kind == "lsvrg":
            c = problem.constants()
            from .estimators import minibatch_smoothness

            fallback = 1.0 / (6.0 * minibatch_smoothness(estimator.tau, problem.m, c.L, c.L_max))
        return theory_hyperparams(lambda q: estimator.params(problem, q), mu, True, epsilon, fallback_gamma=fallback)
    return theory_hyperparams(estimator.params(problem), mu, False, epsilon)


def proxskip_vr_step(state: SolverState, problem, estimator: Estimator, config: SolverConfig, rng: Rng,
                     force_theta: int | None = None) -> SolverState:
    """One iteration; returns a new state and leaves ``state`` untouched.

    ``force_theta`` replaces the coin flip (and consumes no draw for it).
    """
    gamma, p = config.gamma, config.p
    x, h = state.x, state.h
    est = state.est.copy()
    g = estimator.direction(problem, x, est, rng)
    x_hat = x - gamma * (g - h)
    theta = rng.bernoulli(p) if force_theta is None else int(force_theta)
    if theta:
        step = gamma / p
        x_new = problem.r.prox(x_hat - step * h, step)
    else:
        x_new = x_hat
    h_new = h + (p / gamma) * (x_new - x_hat)
    refreshed = False
    if estimator.has_control:
        if config.q is None:
            raise InvalidInputError("estimator with control state needs q")
        refreshed = estimator.refresh(problem, x, est, rng, config.q)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(h_new))):
        raise DivergenceError(f"non-finite iterate at step {state.t + 1}")
    return SolverState(x_new, h_new, est, state.t + 1, theta, refreshed)


def initial_state(problem, estimator: Estimator, x0=None, h0=None) -> SolverState:
    shape = problem.shape
    x = np.zeros(shape) if x0 is None else np.array(problem.f._check(x0), dtype=np.float64)
    h = np.zeros(shape) if h0 is None else np.array(problem.f._check(h0), dtype=np.float64)
    return SolverState(x, h, estimator.init_state(problem, x))


def run(problem, estimator: Estimator, config: SolverConfig, x0=None, h0=None, backend: str = "auto",
        track_fgap: bool = True, snapshots=None, state: SolverState | None = None) -> RunTrace:
    """Run up to ``config.T`` steps from ``(x0, h0)`` (or a given ``state``).

    Args:
        backend: ``"auto"``, ``"python"`` or ``"compiled"``.
        track_fgap: record ``f(P x_t) - f*`` each step (one extra full pass).
        snapshots: iteration indices at which to store copies of ``(x, h)``.

    Raises:
        DivergenceError: when an iterate becomes non-finite; ``err.trace``
            holds the rows up to the last finite iterate.
    """
    estimator.validate(problem)
    if estimator.has_control and config.q is None:
        raise InvalidInputError("estimator with control state needs q")
    if config.target is not None and not problem.has_reference:
        raise InvalidStateError("a psi target needs a cached minimizer")
    if state is None:
        state = initial_state(problem, estimator, x0, h0)
    else:
        state = state.copy()
    have_ref = problem.has_reference
    W, warnings = 0.0, []
    params = None
    if have_ref:
        params = estimator.params(problem, config.q) if estimator.has_control else estimator.params(problem)
        W = params.W
        mu = problem.constants().mu
        bound = min(1.0 / mu, 1.0 / params.effective_smoothness)
        if config.gamma > bound * (1 + 1e-12):
            warnings.append(f"stepsize {config.gamma!r} exceeds the theory bound {bound!r}")
    rng = Rng(config.seed)
    snaps = sorted(set(int(s) for s in snapshots)) if snapshots is not None else []

    impl = _backend.select(backend, problem, estimator)
    cols = _empty_columns(config.T + 1)
    f_star = problem.f_star() if have_ref else math.nan
    psi0 = lyapunov(state, problem, config.gamma, config.p, W) if have_ref else math.nan
    cols["iter"][0] = state.t
    if have_ref:
        cols["dist_sq"][0] = float(np.sum((state.x - problem.x_star) ** 2))
        cols["psi"][0] = psi0
    if track_fgap and have_ref:
        cols["fgap"][0] = problem.objective_gap(state.x)
    target_abs = config.target * psi0 if config.target is not None else -1.0

    stored = []
    if snaps and snaps[0] == 0:
        stored.append((0, state.x.copy(), state.h.copy()))
    if impl == "compiled":
        rows, status, state = _run_compiled(problem, estimator, config, state, rng, cols, W, f_star,
                                            track_fgap and have_ref, target_abs, snaps, stored)
    else:
        rows, status, state = _run_python(problem, estimator, config, state, rng, cols, W, f_star,
                                          track_fgap and have_ref, target_abs, snaps, stored)
    c = problem.constants()
    meta = {
        "estimator": estimator.describe(),
        "backend": impl,
        "gamma": config.gamma,
        "p": config.p,
        "q": config.q,
        "seed": config.seed,
        "T": config.T,
        "W": W,
        "L": c.L,
        "L_max": c.L_max,
        "mu": c.mu,
        "draws": rng.position,
    }
    if params is not None:
        meta["beta"] = params.beta
        meta["C"] = params.C
    trace = RunTrace({k: v[:rows] for k, v in cols.items()}, meta, status, warnings, state, stored)
    if status == "diverged":
        raise DivergenceError(f"non-finite iterate after step {rows - 1}", trace=trace)
    return trace


def _record(cols, t_idx, state, problem, config, W, f_star, track_fgap, comms, ge):
    cols["iter"][t_idx] = state.t
    cols["comms"][t_idx] = comms
    cols["grad_evals"][t_idx] = ge
    cols["theta"][t_idx] = state.last_theta
    cols["y_updated"][t_idx] = int(state.last_refreshed)
    if problem.has_reference:
        cols["dist_sq"][t_idx] = float(np.sum((state.x - problem.x_star) ** 2))
        cols["psi"][t_idx] = lyapunov(state, problem, config.gamma, config.p, W)
        if track_fgap:
            cols["fgap"][t_idx] = problem.f.value(problem.r.project(state.x)) - f_star


def _run_python(problem, estimator, config, state, rng, cols, W, f_star, track_fgap, target_abs, snaps, stored):
    comms = ge = 0
    m = problem.m
    snap_set = set(snaps)
    for i in range(1, config.T + 1):
        try:
            state = proxskip_vr_step(state, problem, estimator, config, rng)
        except DivergenceError:
            return i, "diverged", state
        comms += state.last_theta
        ge += estimator.step_cost(m, state.last_refreshed)
        _record(cols, i, state, problem, config, W, f_star, track_fgap, comms, ge)
        if i in snap_set:
            stored.append((i, state.x.copy(), state.h.copy()))
        if target_abs >= 0 and cols["psi"][i] <= target_abs:
            return i + 1, "converged", state
    return config.T + 1, "budget", state


def _run_compiled(problem, estimator, config, state, rng, cols, W, f_star, track_fgap, target_abs, snaps, stored):
    kern = _backend.kernels()
    f, r = problem.f, problem.r
    M, m, d = problem.M, problem.m, problem.d
    est_code = {"gd": 0, "sgd": 1, "lsvrg": 2, "hub": 2}[estimator.kind]
    tau = estimator.tau if estimator.tau is not None else m
    k = estimator.compressor.kept(d)
    have_ref = problem.has_reference
    if estimator.has_control:
        y, Gy, hy = state.est.y, state.est.Gy, state.est.hy
        c1, c2 = estimator.sigma_weights(m)
    else:
        y, Gy, hy = np.zeros((M, d)), np.zeros((M, 1, d)), np.zeros((M, d))
        c1 = c2 = 0.0
    if have_ref:
        xs, hs, Gs = problem.x_star, problem.h_star, problem.component_grads_star()
    else:
        xs, hs, Gs = np.zeros((M, d)), np.zeros((M, d)), np.zeros((M, m, d))
    if f.kind == "logistic":
        obj = (0, np.ascontiguousarray(f.A), np.ascontiguousarray(f.b), f.lam,
               np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1)))
    else:
        obj = (1, np.zeros((1, 1, 1)), np.zeros((1, 1)), 0.0, np.ascontiguousarray(f.H), np.ascontiguousarray(f.c))
    xs, hs, Gs = (np.ascontiguousarray(a) for a in (xs, hs, Gs))
    x = np.ascontiguousarray(state.x.copy())
    h = np.ascontiguousarray(state.h.copy())
    y = np.ascontiguousarray(y.copy())
    Gy = np.ascontiguousarray(Gy.copy())
    hy = np.ascontiguousarray(hy.copy())
    sigma = state.est.sigma if estimator.has_control else 0.0
    q = config.q if config.q is not None else 1.0
    bounds = [s for s in snaps if 0 < s < config.T] + [config.T]
    t_local, comms, ge, status = 0, 0, 0, "budget"
    last_theta = last_ref = 0
    for stop in bounds:
        if stop <= t_local:
            continue
        bg = rng.bit_generator
        with bg.lock:
            out = kern.run_loop(
                *obj, 1 if r.kind == "consensus" else 0, est_code, tau, k,
                config.gamma, config.p, q, x, h, y, Gy, hy, xs, hs, Gs, int(have_ref),
                c1, c2, W, sigma, f_star if have_ref else 0.0, int(track_fgap),
                t_local, stop, target_abs, bg.capsule,
                cols["comms"], cols["grad_evals"], cols["dist_sq"], cols["psi"], cols["fgap"],
                cols["theta"], cols["y_updated"], comms, ge,
            )
        steps_done, code, draws, sigma = out
        rng.advance_position(draws)
        t_local = steps_done
        if t_local > 0:
            comms = int(cols["comms"][t_local])
            ge = int(cols["grad_evals"][t_local])
            last_theta = int(cols["theta"][t_local])
            last_ref = int(cols["y_updated"][t_local])
        if code != 0:
            status = {1: "converged", 2: "diverged"}[code]
            break
        if t_local in snaps:
            stored.append((t_local, x.copy(), h.copy()))
    cols["iter"][: t_local + 1] = state.t + np.arange(t_local + 1)
    rows = t_local + 1
    if not have_ref:
        cols["dist_sq"][:] = np.nan
        cols["psi"][:] = np.nan
    est = EstimatorState(y, Gy, hy, sigma) if estimator.has_control else EstimatorState()
    new_state = SolverState(x, h, est, state.t + t_local, last_theta, bool(last_ref))
    return rows, status, new_state


def gd_reference_loop(problem, gamma: float, T: int, x0=None) -> np.ndarray:
    """Plain ``x <- x - gamma grad f(x)`` iterates, shape ``(T + 1, M, d)``."""
    x = np.zeros(problem.shape) if x0 is None else np.array(problem.f._check(x0), dtype=np.float64)
    out = np.empty((T + 1,) + x.shape)
    out[0] = x
    for t in range(T):
        x = x - gamma * problem.f.grad(x)
        out[t + 1] = x
    return out


def localgd_baseline(problem, steps_per_round: int, rounds: int, gamma: float, x0=None) -> RunTrace:
    """Local gradient descent: ``K`` local steps per block, then block averaging.

    Local steps use the per-block objectives ``phi_i`` with stepsize ``gamma``.
    One row is recorded per round; ``psi`` equals ``dist_sq`` (no shift).
    """
    if steps_per_round < 1 or rounds < 1:
        raise InvalidInputError("need at least one local step and one round")
    f = problem.f
    x = np.zeros(problem.shape) if x0 is None else np.array(f._check(x0), dtype=np.float64)
    x = problem.r.project(x)
    cols = _empty_columns(rounds + 1)
    have_ref = problem.has_reference
    f_star = problem.f_star() if have_ref else math.nan

    def fill(i):
        cols["iter"][i] = i * steps_per_round
        cols["comms"][i] = i
        cols["grad_evals"][i] = i * steps_per_round * problem.m
        cols["theta"][i] = 1 if i else 0
        if have_ref:
            dist = float(np.sum((x - problem.x_star) ** 2))
            cols["dist_sq"][i] = dist
            cols["psi"][i] = dist
            cols["fgap"][i] = problem.objective_gap(x)

    fill(0)
    status = "budget"
    for i in range(1, rounds + 1):
        for _ in range(steps_per_round):
            x = x - gamma * f.hub_grads(x)
        x = problem.r.project(x)
        if not np.all(np.isfinite(x)):
            status = "diverged"
            trace = RunTrace({k: v[:i] for k, v in cols.items()}, {"estimator": "localgd"}, status)
            raise DivergenceError(f"non-finite iterate in round {i}", trace=trace)
        fill(i)
    meta = {"estimator": f"localgd(K={steps_per_round})", "gamma": gamma, "K": steps_per_round, "rounds": rounds}
    return RunTrace(cols, meta, status, [], SolverState(x, np.zeros_like(x)))


def localgd_fixed_point(problem, steps_per_round: int, gamma: float) -> np.ndarray:
    """Closed-form limit of :func:`localgd_baseline` on a quadratic objective.

    With ``P_i = (I - gamma H_i)^K`` for hub Hessian ``H_i`` and hub center
    ``c_i``, one round maps ``z -> mean_i (P_i z + (I - P_i) c_i)``.
    """
    f = problem.f
    if f.kind != "quadratic":
        raise InvalidInputError("closed-form fixed point needs a quadratic objective")
    Hbar = f.H.mean(axis=1)
    centers = f.minimizer_blocks()
    d = f.d
    P = np.stack([np.linalg.matrix_power(np.eye(d) - gamma * Hi, steps_per_round) for Hi in Hbar])
    lhs = np.eye(d) - P.mean(axis=0)
    rhs = np.mean([(np.eye(d) - Pi) @ ci for Pi, ci in zip(P, centers)], axis=0)
    z = np.linalg.solve(lhs, rhs)
    return np.broadcast_to(z, f.shape).copy()


__all__ = [
    "COLUMNS", "GD", "HUB", "SGD", "RunTrace", "SolverConfig", "SolverState", "contraction_factor",
    "estimator_hyperparams", "gd_reference_loop", "initial_state", "localgd_baseline", "localgd_fixed_point",
    "lyapunov", "proxskip_vr_step", "run", "theoretical_bound", "theory_hyperparams",
]
