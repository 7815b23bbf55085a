"""Total-cost accounting for communication versus local computation.

Communication rounds cost 1 each; one component-gradient evaluation costs
``delta`` (``delta_prime`` for the client-to-hub link of the hub method).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidInputError


@dataclass(frozen=True)
class CostParams:
    delta: float = 0.0
    delta_prime: float = 0.0
    m: int = 1
    tau: int = 1
    q: float = 1.0
    k: int = 1
    d: int = 1

    def __post_init__(self):
        if self.delta < 0 or self.delta_prime < 0:
            raise InvalidInputError("costs must be nonnegative")
        if not 1 <= self.tau <= self.m:
            raise InvalidInputError(f"need 1 <= tau <= m, got tau={self.tau}, m={self.m}")
        if not 1 <= self.k <= self.d:
            raise InvalidInputError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if not 0 <= self.q <= 1:
            raise InvalidInputError(f"need 0 <= q <= 1, got {self.q}")


def _nonneg(**kw):
    for name, v in kw.items():
        if v < 0:
            raise InvalidInputError(f"{name} must be nonnegative, got {v}")


def cost_proxskip(T_comm, T_iter, delta, m) -> float:
    """Full-gradient local steps: ``T_comm + delta m T_iter``."""
    _nonneg(T_comm=T_comm, T_iter=T_iter, delta=delta)
    return T_comm + delta * m * T_iter


def cost_proxskip_vr(T_comm, T_iter, delta, m, tau, q) -> float:
    """Refresh with probability ``q`` plus two minibatches otherwise."""
    _nonneg(T_comm=T_comm, T_iter=T_iter, delta=delta)
    return T_comm + delta * (q * m + (1 - q) * tau + tau) * T_iter


def cost_hub(T_comm, T_iter, delta_prime, m, tau, q, k, d) -> float:
    """Hub variant: compressed client messages shrink the minibatch term by ``k/d``."""
    _nonneg(T_comm=T_comm, T_iter=T_iter, delta_prime=delta_prime)
    if not 1 <= k <= d:
        raise InvalidInputError(f"need 1 <= k <= d, got k={k}, d={d}")
    return T_comm + delta_prime * (q * m + (k / d) * ((1 - q) * tau + tau)) * T_iter


def _check_constants(mu, L, L_tau):
    if not (mu > 0 and L > 0 and L_tau > 0):
        raise InvalidInputError("constants must be positive")


def cost_ratio(delta, mu, L, L_tau, m, tau) -> float:
    """Cost of the variance-reduced method relative to full-gradient local steps."""
    _check_constants(mu, L, L_tau)
    num = math.sqrt(mu * L) + m * L * delta
    den = math.sqrt(mu * L_tau) + (2 * m * mu + (2 * L_tau - 2 * mu) * tau) * delta
    return num / den


def cost_ratio_limits(mu, L, L_tau, m, tau) -> tuple[float, float]:
    """``(ratio at delta = 0, ratio as delta -> infinity)``."""
    _check_constants(mu, L, L_tau)
    return math.sqrt(L / L_tau), m * L / (2 * (m * mu + (L_tau - mu) * tau))


def crossover_delta(mu, L, L_tau, m, tau):
    """The ``delta`` at which the cost ratio equals 1, or None if it never does."""
    _check_constants(mu, L, L_tau)
    den = m * L - 2 * m * mu - (2 * L_tau - 2 * mu) * tau
    if den <= 0:
        return None
    return (math.sqrt(mu * L_tau) - math.sqrt(mu * L)) / den


def theoretical_complexities(mu, L, L_tau, tau, m):
    """Iteration and communication counts implied by the theory.

    Full-gradient local steps: ``T_iter = L/mu``, ``T_comm = sqrt(L/mu)``.
    Variance-reduced: ``T_iter = L(tau)/mu``, ``T_comm = sqrt(L(tau)/mu)`` with
    refresh probability ``q = 2 mu / L(tau)``. Logarithmic factors cancel in
    ratios and are omitted.
    """
    _check_constants(mu, L, L_tau)
    return {
        "proxskip": (math.sqrt(L / mu), L / mu),
        "vr": (math.sqrt(L_tau / mu), L_tau / mu, 2 * mu / L_tau),
    }


def cost_ratio_from_complexities(delta, mu, L, L_tau, m, tau) -> float:
    """Cost ratio computed by plugging the theoretical counts into the cost formulas."""
    cx = theoretical_complexities(mu, L, L_tau, tau, m)
    Tc, Ti = cx["proxskip"]
    Tc_vr, Ti_vr, q = cx["vr"]
    return cost_proxskip(Tc, Ti, delta, m) / cost_proxskip_vr(Tc_vr, Ti_vr, delta, m, tau, q)


def empirical_cost_ratio(delta, trace_proxskip, trace_vr) -> float:
    """Cost ratio from measured communication rounds and gradient evaluations.

    ``grad_evals`` counts evaluations per worker, so each run's cost is
    ``comms + delta * grad_evals``.
    """
    base = trace_proxskip.comms + delta * trace_proxskip.grad_evals
    vr = trace_vr.comms + delta * trace_vr.grad_evals
    return base / vr
