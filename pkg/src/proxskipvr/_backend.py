"""Selection between the compiled run loop and the pure-Python fallback.

The compiled extension is used when it imported and the run is one it
covers. Setting ``PROXSKIPVR_BACKEND=python`` disables it globally.
"""
from __future__ import annotations

import os

from .errors import InvalidInputError

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

_SUPPORTED_OBJECTIVES = ("logistic", "quadratic")
_SUPPORTED_REGULARIZERS = ("zero", "consensus")
_SUPPORTED_ESTIMATORS = ("gd", "sgd", "lsvrg", "hub")


def compiled_available() -> bool:
    return _kernels is not None and os.environ.get("PROXSKIPVR_BACKEND", "auto") != "python"


def kernels():
    if _kernels is None:
        raise InvalidInputError("compiled backend is not built")
    return _kernels


def supports(problem, estimator) -> bool:
    return (
        getattr(problem.f, "kind", None) in _SUPPORTED_OBJECTIVES
        and getattr(problem.r, "kind", None) in _SUPPORTED_REGULARIZERS
        and estimator.kind in _SUPPORTED_ESTIMATORS
        and type(estimator).direction is _canonical_direction(estimator)
    )


def _canonical_direction(estimator):
    # subclasses that override the direction cannot be mirrored by the kernel
    from . import estimators as E

    base = {"gd": E.GD, "sgd": E.SGD, "lsvrg": E.HUB, "hub": E.HUB}[estimator.kind]
    return base.direction


def select(backend: str, problem, estimator) -> str:
    """Resolve ``"auto"``, ``"python"`` or ``"compiled"`` to a concrete backend."""
    if backend not in ("auto", "python", "compiled"):
        raise InvalidInputError(f"unknown backend {backend!r}")
    if backend == "python":
        return "python"
    ok = compiled_available() and supports(problem, estimator)
    if backend == "compiled":
        if _kernels is None:
            raise InvalidInputError("compiled backend is not built")
        if not supports(problem, estimator):
            raise InvalidInputError("compiled backend does not cover this problem/estimator")
        return "compiled"
    return "compiled" if ok else "python"
