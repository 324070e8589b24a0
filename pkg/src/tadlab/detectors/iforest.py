"""Isolation forest with array-backed trees."""

from __future__ import annotations

import math

import numpy as np

from ..core import ContractError, make_rng, split_seeds

EULER_GAMMA = 0.5772156649


def average_path_length(n) -> np.ndarray:
    """c(n): mean unsuccessful-search depth in a binary search tree of n keys.

    c(n) = 2 H(n-1) - 2 (n-1)/n with H(i) ~ ln i + Euler's constant;
    c(1) = 0 and c(2) = 1 by convention.
    """
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    out[n == 2] = 1.0
    return out


class IsolationTree:
    """Flat arrays: feature (-1 at leaves), threshold, left, right, size, depth."""

    def __init__(self, X: np.ndarray, max_depth: int, rng: np.random.Generator):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.size: list[int] = []
        self.depth: list[int] = []
        self._grow(X, 0, max_depth, rng)
        self.feature = np.array(self.feature, dtype=np.int64)
        self.threshold = np.array(self.threshold, dtype=np.float64)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.size = np.array(self.size, dtype=np.int64)
        self.depth = np.array(self.depth, dtype=np.int64)

    def _new_node(self, size: int, depth: int) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.size.append(size)
        self.depth.append(depth)
        return len(self.feature) - 1

    def _grow(self, X: np.ndarray, depth: int, max_depth: int, rng: np.random.Generator) -> int:
        node = self._new_node(X.shape[0], depth)
        if X.shape[0] <= 1 or depth >= max_depth:
            return node
        lo, hi = X.min(axis=0), X.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            return node
        f = int(splittable[rng.integers(splittable.size)])
        thr = rng.uniform(lo[f], hi[f])
        while thr <= lo[f]:
            thr = rng.uniform(lo[f], hi[f])
        mask = X[:, f] < thr
        self.feature[node] = f
        self.threshold[node] = thr
        left = self._grow(X[mask], depth + 1, max_depth, rng)
        right = self._grow(X[~mask], depth + 1, max_depth, rng)
        self.left[node] = left
        self.right[node] = right
        return node

    def leaves(self, Q: np.ndarray) -> np.ndarray:
        node = np.zeros(Q.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            a = np.flatnonzero(active)
            cur = node[a]
            go_left = Q[a, self.feature[cur]] < self.threshold[cur]
            node[a] = np.where(go_left, self.left[cur], self.right[cur])
            active[a] = self.feature[node[a]] >= 0
        return node

    def path_length(self, Q: np.ndarray) -> np.ndarray:
        leaf = self.leaves(Q)
        return self.depth[leaf] + average_path_length(self.size[leaf])


class IsolationForestDetector:
    """Score 2^(-E[h(x)] / c(psi)), in (0, 1); higher means easier to isolate."""

    kind = "iforest"

    def __init__(self, n_trees: int = 100, subsample: int = 256, seed: int = 0):
        if n_trees < 1:
            raise ContractError(f"n_trees must be >= 1, got {n_trees}")
        if subsample < 2:
            raise ContractError(f"subsample must be >= 2, got {subsample}")
        self.n_trees = int(n_trees)
        self.subsample = int(subsample)
        self.seed = seed

    def draw_subsamples(self, n: int) -> list[np.ndarray]:
        psi = min(self.subsample, n)
        rng = make_rng(split_seeds(self.seed, 2)[0])
        return [rng.choice(n, size=psi, replace=False) for _ in range(self.n_trees)]

    def fit(self, X, subsamples: list[np.ndarray] | None = None):
        """Build the forest. ``subsamples`` overrides the seeded per-tree row draws."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ContractError("isolation forest needs at least 2 training rows")
        if subsamples is None:
            subsamples = self.draw_subsamples(X.shape[0])
        if len(subsamples) != self.n_trees:
            raise ContractError(f"expected {self.n_trees} subsamples, got {len(subsamples)}")
        self.psi_ = len(subsamples[0])
        self.max_depth_ = math.ceil(math.log2(self.psi_))
        self.c_psi_ = float(average_path_length(self.psi_))
        tree_seeds = split_seeds(split_seeds(self.seed, 2)[1], self.n_trees)
        self.trees_ = [
            IsolationTree(X[rows], self.max_depth_, make_rng(s)) for rows, s in zip(subsamples, tree_seeds)
        ]
        return self

    def mean_path_length(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        total = np.zeros(Q.shape[0])
        for tree in self.trees_:
            total += tree.path_length(Q)
        return total / len(self.trees_)

    def score(self, Q) -> np.ndarray:
        return np.exp2(-self.mean_path_length(Q) / self.c_psi_)

    def state(self) -> dict:
        arrays = {"psi": self.psi_, "n_trees": self.n_trees}
        for i, t in enumerate(self.trees_):
            for name in ("feature", "threshold", "left", "right", "size", "depth"):
                arrays[f"tree{i}_{name}"] = getattr(t, name)
        return arrays


def iforest(train, queries, n_trees: int = 100, subsample: int = 256, seed: int = 0) -> np.ndarray:
    return IsolationForestDetector(n_trees, subsample, seed).fit(train).score(queries)
