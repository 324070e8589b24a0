"""Datasets, one-class splits, standardization and seeded randomness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-12


class TadlabError(Exception):
    """Base class for all package errors."""


class ContractError(TadlabError, ValueError):
    """An operation was called outside its preconditions."""


class ParseError(TadlabError, ValueError):
    pass


class SchemaError(TadlabError, ValueError):
    pass


class ValidationError(TadlabError, ValueError):
    pass


class InsufficientDataError(TadlabError, ValueError):
    pass


class NumericError(TadlabError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based generator (Philox); same seed gives the same stream everywhere."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def split_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent 64-bit seeds, one per worker or stage."""
    children = np.random.SeedSequence(int(seed) % 2**64).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


@dataclass(frozen=True)
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    provenance: str = ""
    checksum: str = ""

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y).astype(np.int64)
        if X.ndim != 2:
            raise ValidationError(f"X must be 2-D, got shape {X.shape}")
        n, d = X.shape
        if n < 2 or d < 1:
            raise ValidationError(f"dataset needs n >= 2 and d >= 1, got n={n}, d={d}")
        if y.shape != (n,):
            raise ValidationError(f"y has shape {y.shape}, expected ({n},)")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise ValidationError(f"non-finite value at row {r}, column {c}")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("labels must be 0 or 1")
        if not np.any(y == 0):
            raise ValidationError("dataset has no normal rows")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.checksum:
            object.__setattr__(self, "checksum", array_checksum(X, y))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_anomalies(self) -> int:
        return int(self.y.sum())


def array_checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def load_dataset(path, format: str = "csv", name: str | None = None) -> Dataset:
    """Read a CSV with a header row and a ``label`` column (0 normal, 1 anomaly).

    Every other column is parsed as a float feature; row order is kept.
    """
    if format != "csv":
        raise ContractError(f"unsupported format {format!r}")
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    reader = csv.reader(text.splitlines())
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path}: empty file") from None
    if "label" not in header:
        raise SchemaError(f"{path}: missing 'label' column")
    label_col = header.index("label")
    feature_cols = [i for i in range(len(header)) if i != label_col]

    rows, labels = [], []
    for lineno, record in enumerate(reader, start=1):
        if not record:
            continue
        if len(record) != len(header):
            raise ParseError(f"{path}: row {lineno} has {len(record)} cells, expected {len(header)}")
        values = []
        for c in feature_cols:
            cell = record[c].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric value {cell!r} at row {lineno}, column {header[c]!r}") from None
            if not math.isfinite(v):
                raise ValidationError(f"{path}: non-finite value at row {lineno}, column {header[c]!r}")
            values.append(v)
        lab = record[label_col].strip()
        if lab not in ("0", "1", "0.0", "1.0"):
            raise ParseError(f"{path}: label {lab!r} at row {lineno} is not 0/1")
        rows.append(values)
        labels.append(int(float(lab)))

    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feature_cols))
    return Dataset(
        name=name or path.stem,
        X=X,
        y=np.array(labels, dtype=np.int64),
        provenance=str(path),
        checksum=hashlib.sha256(raw).hexdigest(),
    )


def save_dataset(ds: Dataset, path, columns: list[str] | None = None) -> None:
    columns = columns or [f"x{i}" for i in range(ds.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*columns, "label"])
        for row, lab in zip(ds.X, ds.y):
            w.writerow([*(repr(float(v)) for v in row), int(lab)])


@dataclass(frozen=True)
class SplitBundle:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": int(self.seed),
                "train": [int(i) for i in self.train],
                "val": [int(i) for i in self.val],
                "test": [int(i) for i in self.test],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> SplitBundle:
        obj = json.loads(text)
        return cls(
            train=np.array(obj["train"], dtype=np.int64),
            val=np.array(obj["val"], dtype=np.int64),
            test=np.array(obj["test"], dtype=np.int64),
            seed=int(obj["seed"]),
        )


def one_class_split(ds: Dataset, seed: int) -> SplitBundle:
    """Half of the normal rows go to fitting (80% train, 20% val); the rest,
    plus every anomaly, form the test set."""
    normal = np.flatnonzero(ds.y == 0)
    if normal.size < 4:
        raise InsufficientDataError(f"need at least 4 normal rows, got {normal.size}")
    rng = make_rng(seed)
    perm = normal[rng.permutation(normal.size)]
    n_fit = normal.size // 2
    n_val = n_fit // 5
    fit = perm[:n_fit]
    val = np.sort(fit[:n_val])
    train = np.sort(fit[n_val:])
    test = np.sort(np.concatenate([perm[n_fit:], np.flatnonzero(ds.y == 1)]))
    return SplitBundle(train=train, val=val, test=test, seed=int(seed))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    constant_columns: tuple[int, ...] = field(default=())

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.shape[0]:
            raise ContractError(f"expected {self.mean.shape[0]} columns, got {X.shape[-1]}")
        return (X - self.mean) / self.std


def fit_standardizer(X: np.ndarray) -> Standardizer:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("standardizer needs a nonempty 2-D matrix")
    mean = X.mean(axis=0)
    exact = np.ptp(X, axis=0) == 0
    mean[exact] = X[0, exact]
    std = X.std(axis=0)
    std[exact] = 0.0
    const = tuple(int(i) for i in np.flatnonzero(std < STD_FLOOR))
    if const:
        warnings.warn(f"constant columns {list(const)}: std floored at {STD_FLOOR}", RuntimeWarning, stacklevel=2)
    std = np.maximum(std, STD_FLOOR)
    return Standardizer(mean=mean, std=std, constant_columns=const)


def standardize(fit_on: np.ndarray, apply_to: np.ndarray) -> tuple[Standardizer, np.ndarray]:
    """Fit mean/std on ``fit_on`` only and transform ``apply_to``."""
    st = fit_standardizer(fit_on)
    return st, st.transform(apply_to)
