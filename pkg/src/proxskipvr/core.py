"""Numeric substrate: seeded randomness, Bregman divergence, smoothness constants.

Randomness
----------
All randomness flows through :class:`Rng`, a thin layer over numpy's PCG64 bit
generator. Only raw 64-bit draws are taken from the generator; every derived
quantity is decoded here with integer arithmetic so that the compiled kernels
can reproduce the stream exactly:

* ``uniform``: ``(u >> 11) * 2**-53``, a double in ``[0, 1)``.
* ``randbelow(n)``: high 64 bits of ``u * n`` (Lemire's multiply-shift, bias
  below ``n / 2**64``).
* ``bernoulli(p)``: ``uniform < p``; exactly one draw, including ``p`` in {0, 1}.
* ``sample_subset(m, tau)``: ``tau`` steps of a partial Fisher-Yates shuffle of
  ``0..m-1`` (one ``randbelow`` each), returned sorted. ``tau == m`` is
  deterministic and consumes nothing.
* ``normal``: Box-Muller on two uniforms, cosine branch only.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, InvalidProblemError

_INV_2_53 = 1.0 / 9007199254740992.0
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_SHIFT11 = np.uint64(11)


def mulhi(u, n):
    """High 64 bits of ``u * n`` for uint64 arrays ``u`` and bounds ``n < 2**32``.

    Exact: splitting ``u`` into 32-bit halves never overflows for such ``n``.
    """
    u = np.asarray(u, dtype=np.uint64)
    n = np.asarray(n, dtype=np.uint64)
    hi = u >> _SHIFT32
    lo = u & _MASK32
    return (hi * n + ((lo * n) >> _SHIFT32)) >> _SHIFT32


def uniform_from_raw(raw):
    return (np.asarray(raw, dtype=np.uint64) >> _SHIFT11).astype(np.float64) * _INV_2_53


def subsets_from_raw(raw, m, tau):
    """Decode partial Fisher-Yates draws into sorted index subsets.

    Args:
        raw: uint64 array of shape ``(..., tau)``; ignored when ``tau == m``.
        m: population size.
        tau: subset size.

    Returns:
        int64 array of shape ``(..., tau)`` with ascending, distinct entries.
    """
    raw = np.asarray(raw, dtype=np.uint64)
    lead = raw.shape[:-1]
    if tau == m:
        return np.broadcast_to(np.arange(m, dtype=np.int64), lead + (m,)).copy()
    pool = np.broadcast_to(np.arange(m, dtype=np.int64), lead + (m,)).copy()
    for i in range(tau):
        r = (i + mulhi(raw[..., i], m - i).astype(np.int64))[..., None]
        picked = np.take_along_axis(pool, r, axis=-1)
        np.put_along_axis(pool, r, pool[..., i : i + 1].copy(), axis=-1)
        pool[..., i] = picked[..., 0]
    return np.sort(pool[..., :tau], axis=-1)


class Rng:
    """Seeded PCG64 stream with an explicit, counted draw vocabulary.

    Args:
        seed: non-negative integer below ``2**64``.

    Attributes:
        seed: the seed the stream was created from.
        position: number of raw 64-bit draws consumed so far.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidInputError(f"seed must lie in [0, 2**64), got {seed}")
        self.seed = seed
        self.bit_generator = np.random.PCG64(seed)
        self.position = 0

    def raw(self, size=None):
        """Raw uint64 draws; a Python int when ``size`` is None."""
        if size is None:
            self.position += 1
            return int(self.bit_generator.random_raw())
        out = np.asarray(self.bit_generator.random_raw(size), dtype=np.uint64)
        self.position += out.size
        return out

    def advance_position(self, count: int) -> None:
        """Account for draws taken directly from ``bit_generator`` by a kernel."""
        self.position += int(count)

    def uniform(self, size=None):
        if size is None:
            return (self.raw() >> 11) * _INV_2_53
        return uniform_from_raw(self.raw(size))

    def randbelow(self, n: int) -> int:
        if not 1 <= n < 2**32:
            raise InvalidInputError(f"randbelow bound must lie in [1, 2**32), got {n}")
        return (self.raw() * int(n)) >> 64

    def bernoulli(self, p: float) -> int:
        if not 0.0 <= p <= 1.0:
            raise InvalidInputError(f"probability must lie in [0, 1], got {p}")
        return int((self.raw() >> 11) * _INV_2_53 < p)

    def sample_subset(self, m: int, tau: int) -> np.ndarray:
        """Uniform size-``tau`` subset of ``{0, ..., m-1}`` (0-based, sorted)."""
        if m < 1 or not 1 <= tau <= m:
            raise InvalidInputError(f"need 1 <= tau <= m, got tau={tau}, m={m}")
        if tau == m:
            return np.arange(m, dtype=np.int64)
        return subsets_from_raw(self.raw(tau), m, tau)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of ``0..n-1`` (full Fisher-Yates, ``n - 1`` draws)."""
        pool = np.arange(n, dtype=np.int64)
        if n < 2:
            return pool
        raw = self.raw(n - 1)
        for i in range(n - 1):
            j = i + ((int(raw[i]) * (n - i)) >> 64)
            pool[i], pool[j] = pool[j], pool[i]
        return pool

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller (two raw draws per value)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape))
        u = uniform_from_raw(self.raw(2 * count)).reshape(count, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return z.reshape(shape)

    def spawn(self, key: int) -> Rng:
        """Independent child stream derived from ``(seed, key)`` only."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))


class Constants(NamedTuple):
    """Smoothness constants of the smooth part ``f``."""

    L: float
    L_max: float
    mu: float


def bregman(problem, x, y) -> float:
    """Bregman divergence ``f(x) - f(y) - <grad f(y), x - y>`` of the smooth part.

    ``problem`` may be a :class:`~proxskipvr.problem.CompositeProblem` or any
    object exposing ``value`` and ``grad``.
    """
    f = getattr(problem, "f", problem)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(f.value(x) - f.value(y) - np.vdot(f.grad(y), x - y))


def power_iteration(matvec, dim: int, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD operator given by ``matvec``.

    Stops once the eigen-residual ``|A v - lam v|`` is at most ``tol * lam``,
    which bounds the distance from ``lam`` to the spectrum by the same amount.
    The start vector is a fixed pseudo-random draw, so results are reproducible.
    """
    v = Rng(0x5EED).normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam = float(np.dot(v, w))
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        if np.linalg.norm(w - lam * v) <= tol * abs(lam):
            return lam
        v = w / nrm
    return lam


def estimate_constants(problem) -> Constants:
    """Return ``(L, L_max, mu)`` of the smooth part, validating their ordering."""
    f = getattr(problem, "f", problem)
    consts = f.constants()
    if not consts.mu > 0:
        raise InvalidProblemError(f"smooth part is not strongly convex (mu={consts.mu})")
    if not consts.L_max >= consts.L >= consts.mu:
        raise InvalidProblemError(f"inconsistent constants {consts}")
    return consts


def check_finite(x, what: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{what} contains non-finite entries")
    return arr
