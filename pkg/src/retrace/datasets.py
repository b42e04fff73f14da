"""Datasets: ordered example pools, CSV ingestion, and seeded synthetic generators.

The index of an example inside a dataset is an identity: attribution results
are reported per index, so the ordering is fixed at construction and never
changes afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TASK_REGRESSION = "regression"
TASK_CLASSIFICATION = "classification"
_TASKS = (TASK_REGRESSION, TASK_CLASSIFICATION)


@dataclass(frozen=True)
class Example:
    """A single training or test example: a feature vector and a scalar target.

    Classification targets are class indices stored as floats (0.0 or 1.0).
    """

    features: np.ndarray
    target: float

    def __post_init__(self):
        object.__setattr__(
            self, "features", np.asarray(self.features, dtype=np.float64)
        )
        object.__setattr__(self, "target", float(self.target))


@dataclass(frozen=True)
class Dataset:
    """An ordered pool of N examples with a fixed task kind.

    Internally column-major friendly: features as an (N, d) matrix and
    targets as an (N,) vector, both float64.
    """

    features: np.ndarray
    targets: np.ndarray
    task_kind: str
    source: str = field(default="arrays")

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        y = np.ascontiguousarray(np.asarray(self.targets, dtype=np.float64))
        if X.ndim != 2:
            raise ValueError("features must be a 2-d array of shape (N, d)")
        if y.shape != (X.shape[0],):
            raise ValueError("targets must be a 1-d array matching the row count")
        if X.shape[0] < 1:
            raise ValueError("a dataset needs at least one example")
        if self.task_kind not in _TASKS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == TASK_CLASSIFICATION:
            classes = np.unique(y)
            if not np.all(np.isin(classes, (0.0, 1.0))):
                raise ValueError(
                    "classification targets must be class indices 0 or 1"
                )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        return Example(self.features[i], float(self.targets[i]))

    @classmethod
    def from_examples(cls, examples, task_kind: str) -> "Dataset":
        X = np.stack([np.asarray(e.features, dtype=np.float64) for e in examples])
        y = np.array([e.target for e in examples], dtype=np.float64)
        return cls(X, y, task_kind)

    @classmethod
    def from_csv(cls, path, task_kind: str) -> "Dataset":
        """Load a dataset from CSV: header row, feature columns, target last."""
        rows = []
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise ConfigError(f"cannot open dataset CSV: {exc}") from None
        with fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ConfigError(f"{path}: empty CSV file") from None
            if len(header) < 2:
                raise ConfigError(f"{path}: need at least one feature column")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ConfigError(
                        f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                    )
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise ConfigError(f"{path}: no data rows")
        data = np.asarray(rows, dtype=np.float64)
        return cls(data[:, :-1], data[:, -1], task_kind, source=f"csv:{path}")


def _gen_blobs(rng: np.random.Generator, n: int, dim: int, *, separation: float = 3.0,
               noise: float = 1.0):
    """Two Gaussian clusters along a seeded random direction; binary labels."""
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    y = rng.integers(0, 2, size=n).astype(np.float64)
    signs = 2.0 * y - 1.0
    X = (separation / 2.0) * signs[:, None] * direction[None, :]
    X = X + noise * rng.normal(size=(n, dim))
    return X, y, TASK_CLASSIFICATION


def _gen_linear(rng: np.random.Generator, n: int, dim: int, *, noise: float = 0.1):
    """Linear-Gaussian regression targets with additive noise."""
    coef = rng.normal(size=dim) / np.sqrt(dim)
    X = rng.normal(size=(n, dim))
    y = X @ coef + noise * rng.normal(size=n)
    return X, y, TASK_REGRESSION


def _gen_curved(rng: np.random.Generator, n: int, dim: int, *, noise: float = 0.05):
    """Smooth nonlinear regression surface (tanh ridge plus interaction term)."""
    a = rng.normal(size=dim) / np.sqrt(dim)
    b = rng.normal(size=dim) / np.sqrt(dim)
    X = rng.normal(size=(n, dim))
    y = np.tanh(X @ a) + 0.5 * np.sin(X @ b) + noise * rng.normal(size=n)
    return X, y, TASK_REGRESSION


GENERATORS = {
    "blobs": _gen_blobs,
    "linear": _gen_linear,
    "curved": _gen_curved,
}


def synthetic(name: str, seed: int, n: int, dim: int, **params) -> Dataset:
    """Generate a synthetic dataset; (name, seed, n, dim, params) determine it fully."""
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ConfigError(
            f"unknown generator {name!r}; known: {sorted(GENERATORS)}"
        ) from None
    rng = np.random.default_rng(seed)
    try:
        X, y, task = gen(rng, n, dim, **params)
    except TypeError as exc:
        raise ConfigError(f"generator {name!r}: {exc}") from None
    return Dataset(X, y, task, source=f"synthetic:{name}:{seed}")


def synthetic_split(name: str, seed: int, n_train: int, n_test: int, dim: int,
                    **params) -> tuple[Dataset, Dataset]:
    """One generator stream split into (train, test); the split is part of the seed contract."""
    full = synthetic(name, seed, n_train + n_test, dim, **params)
    train = Dataset(full.features[:n_train], full.targets[:n_train], full.task_kind,
                    source=full.source + ":train")
    test = Dataset(full.features[n_train:], full.targets[n_train:], full.task_kind,
                   source=full.source + ":test")
    return train, test
