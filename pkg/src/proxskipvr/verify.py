"""Empirical certification of estimator bounds, prox facts and the linear rate.

Every check returns a :class:`CheckReport`. Each checked item has a margin
(bound minus observed value, so nonnegative is good) and a slack (statistical
allowance plus a small floating-point allowance); an item passes when
``margin >= -slack`` and the report records the worst item.

Statistical slack is 4 standard errors for means and 3 for second moments.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Rng, bregman
from .errors import InvalidInputError, InvalidStateError
from .estimators import SGD, Estimator, minibatch_smoothness
from .solver import SolverConfig, initial_state, proxskip_vr_step, run, theoretical_bound

CHUNK = 10_000
# relative floating-point allowance for quantities formed by cancellation
NUM_TOL = 1e-12


@dataclass
class CheckReport:
    name: str
    samples: int
    margin: float
    slack: float
    passed: bool
    first_violation: int | None = None
    items: list = field(default_factory=list)

    @classmethod
    def from_items(cls, name: str, samples: int, items) -> CheckReport:
        """Build from ``(index, margin, slack)`` triples."""
        items = [(int(i), float(m), float(s)) for i, m, s in items]
        if not items:
            raise InvalidInputError(f"check {name!r} has no items")
        worst = min(items, key=lambda it: it[1] + it[2])
        bad = [it[0] for it in items if not it[1] >= -it[2]]
        return cls(name, samples, worst[1], worst[2], not bad, bad[0] if bad else None, items)

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = "" if self.first_violation is None else f" first_violation={self.first_violation}"
        return f"{status} {self.name} samples={self.samples} margin={self.margin!r} slack={self.slack!r}{where}"


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "samples", "margin", "slack", "pass", "first_violation"])
    for r in reports:
        w.writerow([r.name, r.samples, repr(r.margin), repr(r.slack), int(r.passed),
                    "" if r.first_violation is None else r.first_violation])
    return buf.getvalue()


def reports_to_text(reports) -> str:
    return "\n".join(r.to_text() for r in reports) + "\n"


def _make_state(problem, estimator, point):
    if isinstance(point, tuple):
        x, y = point
    else:
        x, y = point, point
    x = np.array(problem.f._check(x), dtype=np.float64)
    state = estimator.init_state(problem, np.array(problem.f._check(y), dtype=np.float64))
    return x, state


def _moments(problem, estimator, x, state, N, rng, stat):
    """Mean and second moment of ``stat(g_batch)`` over ``N`` draws, chunked."""
    per = estimator.draws_per_call(problem)
    s1 = s2 = None
    done = 0
    while done < N:
        n = min(CHUNK, N - done)
        raw = rng.raw(n * per).reshape(n, per) if per else np.zeros((n, 0), dtype=np.uint64)
        v = stat(estimator.sample(problem, x, state, raw))
        a, b = v.sum(axis=0), (v * v).sum(axis=0)
        s1, s2 = (a, b) if s1 is None else (s1 + a, s2 + b)
        done += n
    mean = s1 / N
    var = np.maximum(s2 / N - mean**2, 0.0) * N / max(N - 1, 1)
    return mean, np.sqrt(var / N)


def check_unbiasedness(estimator: Estimator, problem, points, N: int = 100_000, seed: int = 0,
                       name: str | None = None) -> CheckReport:
    """Componentwise ``|mean(g) - grad f(x)| <= 4 stderr`` at every point.

    ``points`` holds iterates ``x`` or pairs ``(x, y)`` with ``y`` the control point.
    """
    if N < 1000:
        raise InvalidInputError("need at least 1000 samples")
    estimator.validate(problem)
    rng = Rng(seed)
    items = []
    for idx, pt in enumerate(points):
        x, state = _make_state(problem, estimator, pt)
        grad = problem.f.grad(x)
        tol = NUM_TOL * max(1.0, float(np.max(np.abs(grad))))
        if estimator.draws_per_call(problem) == 0:
            g = estimator.direction(problem, x, state, rng)
            items.append((idx, -float(np.max(np.abs(g - grad))), tol))
            continue
        mean, se = _moments(problem, estimator, x, state, N, rng, lambda g: g.reshape(len(g), -1))
        err = np.abs(mean - grad.ravel())
        # the worst component relative to its own allowance
        k = int(np.argmax(err - 4.0 * se))
        items.append((idx, -float(err[k]), float(4.0 * se[k]) + tol))
    return CheckReport.from_items(name or f"unbiasedness[{estimator.describe()}]", N, items)


def check_assumption4(estimator: Estimator, problem, states, N: int = 100_000, q: float | None = None,
                      seed: int = 0, name: str | None = None) -> CheckReport:
    """Second-moment bound by Monte Carlo and the sigma recursion analytically.

    Items ``2i`` and ``2i + 1`` are the two inequalities at state ``i``.
    """
    if not problem.has_reference:
        raise InvalidStateError("assumption checks need a cached minimizer")
    estimator.validate(problem)
    params = estimator.params(problem, q) if estimator.has_control else estimator.params(problem)
    rng = Rng(seed)
    hs = problem.h_star
    items = []
    for idx, pt in enumerate(states):
        x, state = _make_state(problem, estimator, pt)
        Df = bregman(problem, x, problem.x_star)
        fscale = max(1.0, abs(problem.f.value(x)))
        sigma = estimator.sigma(problem, state) if estimator.has_control else 0.0
        bound = 2 * params.A * Df + params.B * sigma + params.C
        tol = 2 * params.A * NUM_TOL * fscale + NUM_TOL * bound
        if estimator.draws_per_call(problem) == 0:
            g = estimator.direction(problem, x, state, rng)
            items.append((2 * idx, bound - float(np.sum((g - hs) ** 2)), tol))
        else:
            def stat(g):
                return np.sum((g - hs) ** 2, axis=tuple(range(1, g.ndim)))

            mean, se = _moments(problem, estimator, x, state, N, rng, stat)
            items.append((2 * idx, bound - float(mean), 3.0 * float(se) + tol))
        if estimator.has_control:
            sig_next = (1 - q) * sigma + q * estimator.sigma_at(problem, x)
        else:
            sig_next = 0.0
        bound2 = 2 * params.A_t * Df + params.B_t * sigma + params.C_t
        tol2 = 2 * params.A_t * NUM_TOL * fscale + NUM_TOL * max(bound2, sig_next)
        items.append((2 * idx + 1, bound2 - sig_next, tol2))
    return CheckReport.from_items(name or f"assumption4[{estimator.describe()}]", N, items)


def check_minibatch_lemma(problem, tau: int, points, N: int = 100_000, seed: int = 0) -> CheckReport:
    """``E|g(x) - g(x*)|^2 <= 2 L(tau) D_f(x, x*)`` with a shared subset."""
    if not problem.has_reference:
        raise InvalidStateError("the lemma check needs a cached minimizer")
    est = SGD(tau)
    est.validate(problem)
    c = problem.constants()
    Lt = minibatch_smoothness(tau, problem.m, c.L, c.L_max)
    rng = Rng(seed)
    per = est.draws_per_call(problem)
    xs = problem.x_star
    items = []
    for idx, x in enumerate(points):
        x = np.array(problem.f._check(x), dtype=np.float64)
        Df = bregman(problem, x, xs)
        bound = 2 * Lt * Df
        tol = 2 * Lt * NUM_TOL * max(1.0, abs(problem.f.value(x))) + NUM_TOL * bound
        if per == 0:
            diff = est.direction(problem, x, None, rng) - est.direction(problem, xs, None, rng)
            items.append((idx, bound - float(np.sum(diff**2)), tol))
            continue
        s1 = s2 = 0.0
        done = 0
        while done < N:
            n = min(CHUNK, N - done)
            raw = rng.raw(n * per).reshape(n, per)
            d = est.sample(problem, x, None, raw) - est.sample(problem, xs, None, raw)
            v = np.sum(d**2, axis=(1, 2))
            s1 += float(v.sum())
            s2 += float((v * v).sum())
            done += n
        mean = s1 / N
        se = math.sqrt(max(s2 / N - mean**2, 0.0) / (N - 1))
        items.append((idx, bound - mean, 3.0 * se + tol))
    return CheckReport.from_items(f"minibatch_lemma[tau={tau}]", N, items)


def log_checkpoints(T: int, count: int = 12) -> list[int]:
    """Roughly log-spaced distinct iteration indices in ``[1, T]``, always including ``T``."""
    pts = np.unique(np.round(np.logspace(0, math.log10(T), count)).astype(int))
    return sorted(set(int(v) for v in pts if 1 <= v <= T) | {T})


def theorem1_summary(problem, estimator: Estimator, config: SolverConfig, seeds, checkpoints=None, x0=None,
                     backend: str = "auto"):
    """Mean and standard deviation of psi over seeds at each checkpoint, with the bound.

    Returns:
        dict with ``checkpoints``, ``mean``, ``std``, ``bound`` arrays.
    """
    seeds = list(seeds)
    cps = log_checkpoints(config.T) if checkpoints is None else sorted(checkpoints)
    psis = np.empty((len(seeds), len(cps)))
    psi0 = None
    for s_idx, seed in enumerate(seeds):
        cfg = SolverConfig(config.gamma, config.p, config.T, seed, config.q, None)
        tr = run(problem, estimator, cfg, x0=x0, backend=backend, track_fgap=False)
        psis[s_idx] = tr["psi"][cps]
        psi0 = tr["psi"][0]
    params = estimator.params(problem, config.q) if estimator.has_control else estimator.params(problem)
    mu = problem.constants().mu
    bounds = np.array([
        theoretical_bound(psi0, config.gamma, mu, config.p, params.beta, params.C, params.C_t, params.W, T)
        for T in cps
    ])
    return {
        "checkpoints": np.array(cps),
        "mean": psis.mean(axis=0),
        "std": psis.std(axis=0, ddof=1) if len(seeds) > 1 else np.zeros(len(cps)),
        "bound": bounds,
        "psi0": psi0,
        "params": params,
        "seeds": len(seeds),
    }


def check_theorem1(problem, estimator: Estimator, config: SolverConfig, seeds, checkpoints=None, x0=None,
                   backend: str = "auto", min_seeds: int = 100) -> CheckReport:
    """Mean psi over seeds against the theoretical bound at log-spaced checkpoints.

    Margins are relative to the bound; slack is ``4 std / (sqrt(S) bound) + 0.05``.
    """
    seeds = list(seeds)
    if len(seeds) < min_seeds:
        raise InvalidInputError(f"need at least {min_seeds} seeds, got {len(seeds)}")
    s = theorem1_summary(problem, estimator, config, seeds, checkpoints, x0, backend)
    S = len(seeds)
    items = []
    for i, (mean, std, bound) in enumerate(zip(s["mean"], s["std"], s["bound"])):
        items.append((i, (bound - mean) / bound, 4.0 * std / (math.sqrt(S) * bound) + 0.05))
    return CheckReport.from_items(f"theorem1[{estimator.describe()}]", S, items)


def check_neighborhood(problem, estimator: Estimator, config: SolverConfig, seeds, tail: float = 0.5, x0=None,
                       backend: str = "auto") -> CheckReport:
    """Long-run mean psi (last ``tail`` fraction of the run, pooled over seeds) below the noise floor.

    The floor is ``(C + W C~) gamma^2 / min(gamma mu, p^2, 1 - beta)``.
    """
    seeds = list(seeds)
    params = estimator.params(problem, config.q) if estimator.has_control else estimator.params(problem)
    mu = problem.constants().mu
    floor = theoretical_bound(0.0, config.gamma, mu, config.p, params.beta, params.C, params.C_t, params.W, 1)
    start = int(config.T * (1 - tail))
    per_seed = []
    for seed in seeds:
        cfg = SolverConfig(config.gamma, config.p, config.T, seed, config.q, None)
        tr = run(problem, estimator, cfg, x0=x0, backend=backend, track_fgap=False)
        per_seed.append(float(np.mean(tr["psi"][start:])))
    per_seed = np.array(per_seed)
    mean = float(per_seed.mean())
    se = float(per_seed.std(ddof=1) / math.sqrt(len(seeds))) if len(seeds) > 1 else 0.0
    return CheckReport.from_items(f"neighborhood[{estimator.describe()}]", len(seeds),
                                  [(0, (floor - mean) / floor, 4.0 * se / floor + 0.05)])


def check_prox_facts(regularizer, trials: int = 10_000, shape=(3, 4), seed: int = 0, tol: float = 1e-9) -> CheckReport:
    """Firm nonexpansiveness of the prox, Young's and Jensen's inequalities at random inputs.

    Item ``3k`` is firm nonexpansiveness, ``3k+1`` Young and ``3k+2`` Jensen for trial ``k``.
    """
    if trials < 1:
        raise InvalidInputError("need at least one trial")
    rng = Rng(seed)
    items = []
    for k in range(trials):
        x = rng.normal(shape) * 3.0
        y = rng.normal(shape) * 3.0
        step = math.exp(4.0 * rng.uniform() - 2.0)
        Px, Py = regularizer.prox(x, step), regularizer.prox(y, step)
        lhs = float(np.sum((Px - Py) ** 2) + np.sum(((x - Px) - (y - Py)) ** 2))
        rhs = float(np.sum((x - y) ** 2))
        items.append((3 * k, rhs - lhs, tol * max(1.0, rhs)))
        a, b = x.ravel(), y.ravel()
        young = 2 * float(a @ a) + 2 * float(b @ b)
        items.append((3 * k + 1, young - float((a + b) @ (a + b)), tol * max(1.0, young)))
        rows = x.reshape(x.shape[0], -1)
        jensen = float(np.mean(np.sum(rows**2, axis=1)))
        mean_sq = float(np.sum(rows.mean(axis=0) ** 2))
        items.append((3 * k + 2, jensen - mean_sq, tol * max(1.0, jensen)))
    return CheckReport.from_items(f"prox_facts[{regularizer.kind}]", trials, items)


def trajectory_states(problem, estimator: Estimator, config: SolverConfig, count: int = 20, x0=None):
    """``count`` states ``(x_t, y_t)`` evenly spaced along one run of ``config.T`` steps."""
    at = set(int(v) for v in np.linspace(0, config.T, count).round())
    if len(at) < count:
        raise InvalidInputError(f"run of {config.T} steps is too short for {count} states")
    rng = Rng(config.seed)
    state = initial_state(problem, estimator, x0)
    out = []
    for t in range(config.T + 1):
        if t in at:
            y = state.est.y if estimator.has_control else state.x
            out.append((state.x.copy(), np.array(y, copy=True)))
        if t < config.T:
            state = proxskip_vr_step(state, problem, estimator, config, rng)
    return out


def random_states(problem, count: int, seed: int = 0, scale: float = 1.0):
    """Random ``(x, y)`` pairs around the minimizer (or the origin without one)."""
    rng = Rng(seed)
    center = problem.x_star if problem.has_reference else np.zeros(problem.shape)
    return [
        (center + scale * rng.normal(problem.shape), center + scale * rng.normal(problem.shape))
        for _ in range(count)
    ]
