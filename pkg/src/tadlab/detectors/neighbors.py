"""Exact nearest-neighbour search plus the k-NN and LOF detectors."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..core import ContractError, make_rng

KDTREE_MAX_DIM = 16
DEFAULT_MAX_TRAIN = 50_000
LRD_FLOOR = 1e-12


def _sort_neighbors(dist: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # ties among equidistant neighbours: lowest row index first
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)


def _exact_dist(train: np.ndarray, queries: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = train[idx] - queries[:, None, :]
    return np.sqrt(np.einsum("qkd,qkd->qk", diff, diff))


def kneighbors(
    train: np.ndarray,
    queries: np.ndarray,
    k: int,
    exclude: np.ndarray | None = None,
    chunk: int = 2048,
    tree: cKDTree | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Distances and indices of the k nearest train rows for each query.

    ``exclude[i]`` (if given and >= 0) is a train index that query i may not
    return, used for leave-one-out scoring of training rows. Distances are
    recomputed from coordinate differences so exact matches come out as 0.
    """
    n, d = train.shape
    m = queries.shape[0]
    extra = 0 if exclude is None else 1
    kk = min(k + extra, n)
    if d <= KDTREE_MAX_DIM:
        tree = tree if tree is not None else cKDTree(train)
        _, idx = tree.query(queries, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(m, kk)
    else:
        idx = np.empty((m, kk), dtype=np.int64)
        sq_train = np.einsum("ij,ij->i", train, train)
        for lo in range(0, m, chunk):
            q = queries[lo : lo + chunk]
            d2 = sq_train[None, :] - 2.0 * q @ train.T + np.einsum("ij,ij->i", q, q)[:, None]
            if kk < n:
                part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
            else:
                part = np.broadcast_to(np.arange(n), (q.shape[0], n)).copy()
            idx[lo : lo + chunk] = part
    dist = _exact_dist(train, queries, idx)
    dist, idx = _sort_neighbors(dist, idx)
    if exclude is not None:
        keep = idx != np.asarray(exclude)[:, None]
        # drop at most one column per row: the excluded index, else the last one
        drop_last = keep.all(axis=1)
        keep[drop_last, -1] = False
        dist = dist[keep].reshape(m, kk - 1)
        idx = idx[keep].reshape(m, kk - 1)
    return dist[:, :k], idx[:, :k]


def _self_matches(train: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """For each query, index of a bit-identical train row, or -1."""
    lookup = {}
    for i, row in enumerate(train):
        lookup.setdefault(row.tobytes(), i)
    return np.array([lookup.get(q.tobytes(), -1) for q in queries], dtype=np.int64)


def _cap_train(train: np.ndarray, max_train: int | None, seed: int) -> np.ndarray:
    if max_train is None or train.shape[0] <= max_train:
        return train
    rows = np.sort(make_rng(seed).choice(train.shape[0], size=max_train, replace=False))
    return train[rows]


class KNNDetector:
    """Mean (or k-th) Euclidean distance to the k nearest training rows."""

    kind = "knn"

    def __init__(
        self,
        k: int = 5,
        aggregate: str = "mean",
        leave_one_out: bool = False,
        max_train: int | None = DEFAULT_MAX_TRAIN,
        seed: int = 0,
    ):
        if aggregate not in ("mean", "kth"):
            raise ContractError(f"unknown aggregate {aggregate!r}")
        self.k = int(k)
        self.aggregate = aggregate
        self.leave_one_out = leave_one_out
        self.max_train = max_train
        self.seed = seed

    def fit(self, X):
        X = _cap_train(np.asarray(X, dtype=np.float64), self.max_train, self.seed)
        # without leave-one-out every training row is a valid neighbour, so k = n is allowed
        limit = X.shape[0] - 1 if self.leave_one_out else X.shape[0]
        if not 1 <= self.k <= limit:
            raise ContractError(f"k must satisfy 1 <= k <= {limit} for n_train={X.shape[0]}, got {self.k}")
        self.train_ = X
        self.subsampled_ = self.max_train is not None and X.shape[0] == self.max_train
        self.tree_ = cKDTree(X) if X.shape[1] <= KDTREE_MAX_DIM else None
        return self

    def score(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        exclude = _self_matches(self.train_, Q) if self.leave_one_out else None
        dist, _ = kneighbors(self.train_, Q, self.k, exclude=exclude, tree=self.tree_)
        return dist.mean(axis=1) if self.aggregate == "mean" else dist[:, -1]

    def state(self) -> dict:
        return {"k": self.k, "aggregate": self.aggregate, "leave_one_out": self.leave_one_out, "train": self.train_}


class LOFDetector:
    """Local outlier factor of queries relative to the training rows.

    Training-row neighbourhoods exclude the row itself (by index); a query's
    neighbourhood is taken among all training rows.
    """

    kind = "lof"

    def __init__(
        self,
        k: int = 20,
        leave_one_out: bool = False,
        max_train: int | None = DEFAULT_MAX_TRAIN,
        seed: int = 0,
    ):
        self.k = int(k)
        self.leave_one_out = leave_one_out
        self.max_train = max_train
        self.seed = seed

    def fit(self, X):
        X = _cap_train(np.asarray(X, dtype=np.float64), self.max_train, self.seed)
        n = X.shape[0]
        if not 1 <= self.k < n:
            raise ContractError(f"k must satisfy 1 <= k < n_train={n}, got {self.k}")
        self.train_ = X
        self.tree_ = cKDTree(X) if X.shape[1] <= KDTREE_MAX_DIM else None
        dist, idx = kneighbors(X, X, self.k, exclude=np.arange(n), tree=self.tree_)
        self.k_distance_ = dist[:, -1]
        reach = np.maximum(dist, self.k_distance_[idx])
        self.lrd_, self.degenerate_ = self._lrd(reach)
        return self

    @staticmethod
    def _lrd(reach: np.ndarray) -> tuple[np.ndarray, bool]:
        mean_reach = reach.mean(axis=1)
        degenerate = bool(np.any(mean_reach < LRD_FLOOR))
        return 1.0 / np.maximum(mean_reach, LRD_FLOOR), degenerate

    def score(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        exclude = _self_matches(self.train_, Q) if self.leave_one_out else None
        dist, idx = kneighbors(self.train_, Q, self.k, exclude=exclude, tree=self.tree_)
        reach = np.maximum(dist, self.k_distance_[idx])
        lrd_q, degenerate = self._lrd(reach)
        self.degenerate_ = self.degenerate_ or degenerate
        return self.lrd_[idx].mean(axis=1) / lrd_q

    def state(self) -> dict:
        return {"k": self.k, "leave_one_out": self.leave_one_out, "train": self.train_}


def knn(train, queries, k: int, **kwargs) -> np.ndarray:
    return KNNDetector(k=k, **kwargs).fit(train).score(queries)


def lof(train, queries, k: int, **kwargs) -> np.ndarray:
    return LOFDetector(k=k, **kwargs).fit(train).score(queries)
