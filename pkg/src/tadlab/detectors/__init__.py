"""Shallow one-class detectors sharing a fit/score contract (higher = more anomalous)."""

from __future__ import annotations

import csv

import numpy as np

from ..core import ContractError
from .iforest import IsolationForestDetector, average_path_length, iforest
from .neighbors import KNNDetector, LOFDetector, kneighbors, knn, lof
from .ocsvm import OneClassSVMDetector, ocsvm
from .residual import ResidualNormDetector, residual_norm

DETECTORS = {
    "knn": KNNDetector,
    "lof": LOFDetector,
    "iforest": IsolationForestDetector,
    "ocsvm": OneClassSVMDetector,
    "residual_norm": ResidualNormDetector,
}

# Hyperparameter grids swept on raw data.
DEFAULT_GRID = {
    "knn": [{"k": k} for k in (1, 2, 5, 10, 20, 50)],
    "lof": [{"k": k} for k in (1, 2, 5, 10, 20, 50)],
    "iforest": [{"n_trees": 100, "subsample": 256}],
    "ocsvm": [{"nu": 0.5, "gamma": "scale"}],
    "residual_norm": [{"keep_smallest_fraction": f / 10} for f in range(1, 10)],
}


def make_detector(kind: str, **params):
    try:
        cls = DETECTORS[kind]
    except KeyError:
        raise ContractError(f"unknown detector kind {kind!r}") from None
    return cls(**params)


def save_model(model, path) -> None:
    """Binary cache of a fitted detector (numpy .npz; scalars stored as 0-d arrays)."""
    state = {k: np.asarray(v) for k, v in model.state().items()}
    np.savez(path, __kind__=np.asarray(model.kind), **state)


def load_model_state(path) -> tuple[str, dict]:
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["__kind__"])
        return kind, {k: z[k] for k in z.files if k != "__kind__"}


def write_scores(path, scores, row_ids=None) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    row_ids = range(len(scores)) if row_ids is None else row_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "score"])
        for r, s in zip(row_ids, scores):
            w.writerow([int(r), repr(float(s))])


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return (
        np.array([int(r["row_id"]) for r in rows], dtype=np.int64),
        np.array([float(r["score"]) for r in rows]),
    )


__all__ = [
    "DETECTORS",
    "DEFAULT_GRID",
    "IsolationForestDetector",
    "KNNDetector",
    "LOFDetector",
    "OneClassSVMDetector",
    "ResidualNormDetector",
    "average_path_length",
    "iforest",
    "kneighbors",
    "knn",
    "lof",
    "make_detector",
    "ocsvm",
    "residual_norm",
    "save_model",
    "load_model_state",
    "read_scores",
    "write_scores",
]
