"""Experiment configuration with a flat ``key = value`` text form."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

ESTIMATORS = ("gd", "sgd", "lsvrg", "hub", "localgd")
SOURCES = ("synthetic", "quadratic")


@dataclass
class ExperimentConfig:
    """Everything needed to rebuild a run.

    ``source`` is ``synthetic`` (logistic on Gaussian data), ``quadratic``
    (shared-spectrum quadratics) or a path to a LibSVM/cache file. Exactly one of
    ``kappa`` and ``lam`` fixes the regularization of logistic problems; with
    neither, ``lam`` defaults to ``5e-4`` times the loss smoothness.
    """

    source: str = "synthetic"
    n: int = 200
    d: int = 10
    data_seed: int = 0
    kappa: float | None = 100.0
    lam: float | None = None
    M: int = 4
    regularizer: str = "consensus"
    estimator: str = "lsvrg"
    tau: int = 4
    compressor: str = "identity"
    local_steps: int = 5
    mode: str = "theory"
    gamma: float | None = None
    p: float | None = None
    q: float | None = None
    T: int = 10_000
    eps: float | None = 1e-6
    seed: int = 0
    backend: str = "auto"

    def validate(self) -> ExperimentConfig:
        if not self.source:
            raise ConfigError("source must be set")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.mode not in ("theory", "manual"):
            raise ConfigError(f"mode must be theory or manual, got {self.mode!r}")
        if self.regularizer not in ("consensus", "zero"):
            raise ConfigError(f"regularizer must be consensus or zero, got {self.regularizer!r}")
        if self.backend not in ("auto", "python", "compiled"):
            raise ConfigError(f"backend must be auto, python or compiled, got {self.backend!r}")
        if self.kappa is not None and self.lam is not None:
            raise ConfigError("set at most one of kappa and lam")
        for name in ("n", "d", "M", "tau", "T", "local_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.compressor != "identity" and not self.compressor.startswith("rand-k:"):
            raise ConfigError(f"compressor must be identity or rand-k:K, got {self.compressor!r}")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def items(self):
        return [(f.name, _format(getattr(self, f.name))) for f in fields(self)]

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in body.split("=", 1))
            cfg = cfg.updated({key: value})
        return cfg.validate()

    def updated(self, overrides: dict) -> ExperimentConfig:
        """Copy with string-valued ``overrides`` parsed to the field types."""
        types = {f.name: f for f in fields(self)}
        changes = {}
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(key, value, types[key].type)
        # kappa and lam are alternatives; setting one alone clears the other
        for a, b in (("lam", "kappa"), ("kappa", "lam")):
            if changes.get(a) is not None and b not in changes:
                changes[b] = None
        return dataclasses.replace(self, **changes)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, value, annotation):
    if not isinstance(value, str):
        return value
    if value.lower() == "none":
        if "None" not in str(annotation):
            raise ConfigError(f"{key} cannot be none")
        return None
    kind = str(annotation).split("|")[0].strip()
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value
