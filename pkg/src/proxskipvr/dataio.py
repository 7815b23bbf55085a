"""LibSVM parsing and serialization, synthetic data, and equal-shard partitioning."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Rng
from .errors import InvalidInputError, ParseError
from .problem import LogisticObjective


@dataclass
class Dataset:
    """Sparse rows with 0-based feature indices and labels in {-1, +1}.

    Attributes:
        rows: per row, a pair ``(indices, values)`` of int64/float64 arrays.
        labels: float64 array of -1.0/+1.0.
        d: dense dimension (at least one past the largest index).
    """

    rows: list
    labels: np.ndarray
    d: int

    @property
    def n(self) -> int:
        return len(self.rows)

    def dense(self) -> np.ndarray:
        X = np.zeros((self.n, self.d))
        for r, (idx, val) in enumerate(self.rows):
            X[r, idx] = val
        return X

    def __eq__(self, other):
        if not isinstance(other, Dataset) or self.n != other.n or self.d != other.d:
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        return all(
            np.array_equal(i1, i2) and np.array_equal(v1, v2)
            for (i1, v1), (i2, v2) in zip(self.rows, other.rows)
        )

    def subset(self, order) -> Dataset:
        order = list(order)
        return Dataset([self.rows[i] for i in order], self.labels[order].copy(), self.d)

    @classmethod
    def from_dense(cls, X, y) -> Dataset:
        X = np.asarray(X, dtype=np.float64)
        rows = []
        for r in X:
            idx = np.nonzero(r)[0].astype(np.int64)
            rows.append((idx, r[idx].copy()))
        return cls(rows, np.asarray(y, dtype=np.float64).copy(), X.shape[1])


def _parse_label(tok, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"non-numeric label {tok!r}", lineno) from None
    if v == 1.0:
        return 1.0
    if v in (-1.0, 0.0):
        return -1.0
    raise ParseError(f"label {tok!r} is not one of -1, 0, +1", lineno)


def parse_libsvm(stream, d: int | None = None) -> Dataset:
    """Parse LibSVM text ``label idx:val idx:val ...`` (1-based, increasing indices).

    Accepts a text stream or a string. Blank lines and ``#`` comments are
    skipped; labels ``0`` map to ``-1``.

    Raises:
        ParseError: on malformed tokens, non-increasing indices or empty input;
            the message and ``.line`` carry the 1-based line number.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows, labels = [], []
    max_idx = 0
    for lineno, line in enumerate(stream, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        toks = body.split()
        labels.append(_parse_label(toks[0], lineno))
        idx, val = [], []
        prev = 0
        for tok in toks[1:]:
            key, sep, value = tok.partition(":")
            if not sep:
                raise ParseError(f"expected idx:val, got {tok!r}", lineno)
            try:
                j = int(key)
                v = float(value)
            except ValueError:
                raise ParseError(f"non-numeric token {tok!r}", lineno) from None
            if j < 1:
                raise ParseError(f"feature index {j} is below 1", lineno)
            if j <= prev:
                raise ParseError(f"feature index {j} does not increase (previous {prev})", lineno)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {value!r}", lineno)
            prev = j
            idx.append(j - 1)
            val.append(v)
        max_idx = max(max_idx, prev)
        rows.append((np.array(idx, dtype=np.int64), np.array(val, dtype=np.float64)))
    if not rows:
        raise ParseError("empty input: no data rows", None)
    if d is None:
        d = max_idx
    elif d < max_idx:
        raise ParseError(f"feature index {max_idx} exceeds declared dimension {d}", None)
    return Dataset(rows, np.array(labels), max(d, 1))


def serialize_libsvm(ds: Dataset) -> str:
    """LibSVM text with shortest round-trip floats; inverse of :func:`parse_libsvm`."""
    out = []
    for (idx, val), lab in zip(ds.rows, ds.labels):
        feats = " ".join(f"{i + 1}:{float(v)!r}" for i, v in zip(idx, val))
        out.append(("+1" if lab > 0 else "-1") + (" " + feats if feats else ""))
    return "\n".join(out) + "\n"


def write_cache(ds: Dataset, path) -> None:
    """Cache format: a header line ``n d`` followed by LibSVM lines."""
    with open(path, "w") as fh:
        fh.write(f"{ds.n} {ds.d}\n")
        fh.write(serialize_libsvm(ds))


def read_cache(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError("cache header must be 'n d'", 1)
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError("cache header must be two integers", 1) from None
        body = fh.read()
    # keep line numbers aligned with the file by prefixing the consumed header
    ds = parse_libsvm(io.StringIO("#\n" + body), d=d)
    if ds.n != n:
        raise ParseError(f"cache declares {n} rows but holds {ds.n}", None)
    return ds


def load(path) -> Dataset:
    """Read a LibSVM file, or a cache file when its first line is an ``n d`` header."""
    with open(path) as fh:
        first = fh.readline().split()
    if len(first) == 2 and all(t.isdigit() for t in first):
        return read_cache(path)
    with open(path) as fh:
        return parse_libsvm(fh)


@dataclass
class LogisticInstance:
    """A dataset paired with its L2 regularization weight."""

    dataset: Dataset
    lam: float

    def objective(self, part: Partition | None = None) -> LogisticObjective:
        """Logistic objective over ``part``'s shards (one shard of all rows if None)."""
        if part is None:
            part = Partition(1, self.dataset.n, [np.arange(self.dataset.n)])
        return to_objective(self.dataset, part, self.lam)


def generate_synthetic(rng: Rng, n: int, d: int, kappa_target: float | None = None, flip: float = 0.1,
                       lam_fraction: float | None = None) -> LogisticInstance:
    """Gaussian rows, labels from a random hyperplane with a fraction ``flip`` flipped.

    The regularization is ``lambda = L0 / (kappa_target - 1)`` so that the flat
    problem has condition number ``kappa_target``, or ``lam_fraction * L0`` when
    that is given instead; ``L0`` is the logistic loss's smoothness bound.
    """
    if n < 1 or d < 1:
        raise InvalidInputError(f"need n, d >= 1, got n={n}, d={d}")
    if (kappa_target is None) == (lam_fraction is None):
        raise InvalidInputError("give exactly one of kappa_target and lam_fraction")
    X = rng.normal((n, d))
    w = rng.normal(d)
    y = np.where(X @ w >= 0, 1.0, -1.0)
    flips = rng.uniform(n) < flip
    y[flips] = -y[flips]
    L0 = loss_smoothness(X)
    if L0 == 0.0:
        lam = 1.0
    elif kappa_target is not None:
        if not kappa_target > 1:
            raise InvalidInputError(f"condition number must exceed 1, got {kappa_target}")
        lam = L0 / (kappa_target - 1.0)
    else:
        lam = lam_fraction * L0
    return LogisticInstance(Dataset.from_dense(X, y), lam)


def loss_smoothness(X) -> float:
    """``lambda_max(X^T X / (4n))``, the smoothness bound of the mean logistic loss."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.linalg.eigvalsh(X.T @ X / (4.0 * X.shape[0]))[-1])


def synthetic_instance(seed: int, n: int, d: int, kappa_target: float, M: int = 1):
    """Synthetic logistic objective with the given condition number, split over ``M`` shards.

    Returns:
        ``(objective, partition)``; the objective has ``M`` blocks.
    """
    rng = Rng(seed)
    inst = generate_synthetic(rng.spawn(0), n, d, kappa_target)
    part = partition(inst.dataset, M, rng.spawn(1))
    return inst.objective(part), part


@dataclass
class Partition:
    """Seeded shuffle split into ``M`` contiguous equal shards."""

    M: int
    m: int
    shards: list
    dropped: list = field(default_factory=list)


def partition(ds: Dataset, M: int, rng: Rng) -> Partition:
    """Shuffle rows, cut ``M`` shards of ``floor(n/M)``; leftover rows are dropped."""
    if not 1 <= M <= ds.n:
        raise InvalidInputError(f"cannot split {ds.n} rows into {M} shards")
    perm = rng.permutation(ds.n)
    m = ds.n // M
    shards = [perm[i * m : (i + 1) * m].copy() for i in range(M)]
    return Partition(M, m, shards, perm[M * m :].tolist())


def to_objective(ds: Dataset, part: Partition, lam: float) -> LogisticObjective:
    X = ds.dense()
    order = np.concatenate(part.shards)
    A = X[order].reshape(part.M, part.m, ds.d)
    b = ds.labels[order].reshape(part.M, part.m)
    return LogisticObjective(A, b, lam)
