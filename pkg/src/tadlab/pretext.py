"""Self-supervised pretext tasks: frozen task artifacts and per-batch constructions."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, make_rng

TASK_KINDS = (
    "rotation",
    "shuffle",
    "mask_class",
    "mask_columns",
    "autoencoder",
    "contrastive_rotation",
    "contrastive_shuffle",
    "contrastive_mask",
    "eicl",
)
CLASSIFICATION_TASKS = ("rotation", "shuffle", "mask_class")
CONTRASTIVE_TASKS = ("contrastive_rotation", "contrastive_shuffle", "contrastive_mask")

# loss kinds that may be paired with each task
TASK_LOSSES = {
    "rotation": ("cross_entropy", "arpl", "aam"),
    "shuffle": ("cross_entropy", "arpl", "aam"),
    "mask_class": ("cross_entropy", "arpl", "aam"),
    "mask_columns": ("bce_multilabel",),
    "autoencoder": ("mse", "mae"),
    "contrastive_rotation": ("infonce", "vicreg"),
    "contrastive_shuffle": ("infonce", "vicreg"),
    "contrastive_mask": ("infonce", "vicreg"),
    "eicl": ("infonce", "vicreg"),
}

DEFAULT_CLASSES = 4
DEFAULT_MASK_RATE = 0.3


def n_masked(rate: float, d: int) -> int:
    return max(1, math.ceil(round(rate * d, 9)))


def default_window(d: int) -> int:
    return min(max(2, d // 4), d - 1)


@dataclass
class PretextTask:
    kind: str
    d: int
    n_classes: int = 0
    mask_rate: float = DEFAULT_MASK_RATE
    window: int = 0
    seed: int = 0
    rotations: list[np.ndarray] = field(default_factory=list)
    permutations: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    @property
    def n_mask(self) -> int:
        return n_masked(self.mask_rate, self.d)

    @property
    def is_classification(self) -> bool:
        return self.kind in CLASSIFICATION_TASKS

    @property
    def is_pair(self) -> bool:
        return self.kind in CONTRASTIVE_TASKS or self.kind == "eicl"

    def default_d_out(self) -> int:
        if self.is_classification:
            return self.n_classes
        if self.kind in ("mask_columns", "autoencoder"):
            return self.d
        return 128

    @property
    def n_windows(self) -> int:
        return self.d - self.window + 1

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "n_classes": self.n_classes,
            "mask_rate": self.mask_rate,
            "window": self.window,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        """Permutations, masks and seeds; rotations go to :meth:`save_rotations`."""
        obj = self.describe()
        obj["permutations"] = [p.tolist() for p in self.permutations]
        obj["masks"] = [m.astype(int).tolist() for m in self.masks]
        return json.dumps(obj)

    def save_rotations(self, path) -> None:
        if self.rotations:
            np.stack(self.rotations).astype("<f8").tofile(path)

    @classmethod
    def from_json(cls, text: str, rotations_path=None) -> PretextTask:
        obj = json.loads(text)
        task = cls(
            kind=obj["kind"],
            d=obj["d"],
            n_classes=obj["n_classes"],
            mask_rate=obj["mask_rate"],
            window=obj["window"],
            seed=obj["seed"],
            permutations=[np.array(p, dtype=np.int64) for p in obj["permutations"]],
            masks=[np.array(m, dtype=bool) for m in obj["masks"]],
        )
        if rotations_path is not None:
            flat = np.fromfile(rotations_path, dtype="<f8")
            task.rotations = list(flat.reshape(-1, task.d, task.d))
        return task


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal matrix from the QR factor of a Gaussian matrix, with R's
    diagonal made positive so the factorisation is unique."""
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs


def build_task(kind: str, d: int, config: dict | None = None, seed: int = 0) -> PretextTask:
    config = dict(config or {})
    if kind not in TASK_KINDS:
        raise ContractError(f"unknown pretext task {kind!r}")
    if d < 1:
        raise ContractError("d must be >= 1")
    C = int(config.get("C", DEFAULT_CLASSES))
    r = float(config.get("r", DEFAULT_MASK_RATE))
    if not 0.0 < r < 1.0:
        raise ContractError(f"mask rate must lie in (0, 1), got {r}")
    rng = make_rng(seed)
    task = PretextTask(kind=kind, d=d, mask_rate=r, seed=seed)

    if kind in ("rotation", "contrastive_rotation"):
        if kind == "rotation" and C < 2:
            raise ContractError("rotation task needs C >= 2")
        task.n_classes = C
        task.rotations = [np.eye(d)] + [random_rotation(d, rng) for _ in range(C - 1)]
    elif kind in ("shuffle", "contrastive_shuffle"):
        if kind == "shuffle" and C < 2:
            raise ContractError("shuffle task needs C >= 2")
        if C > math.factorial(min(d, 20)):
            raise ContractError(f"cannot draw {C} distinct permutations of {d} attributes")
        task.n_classes = C
        perms = [np.arange(d)]
        seen = {tuple(range(d))}
        if d <= 8 and C > math.factorial(d) // 2:
            pool = [np.array(p) for p in itertools.permutations(range(d)) if p not in seen]
            pick = rng.choice(len(pool), size=C - 1, replace=False)
            perms += [pool[i] for i in pick]
        else:
            while len(perms) < C:
                p = rng.permutation(d)
                if tuple(p) not in seen:
                    seen.add(tuple(p))
                    perms.append(p)
        task.permutations = perms
    elif kind == "mask_class":
        if C < 2:
            raise ContractError("mask classification needs C >= 2")
        m = n_masked(r, d)
        if C > math.comb(d, m):
            raise ContractError(f"cannot draw {C} distinct masks with {m} of {d} attributes")
        task.n_classes = C
        masks, seen = [], set()
        if math.comb(d, m) <= 4 * C:
            combos = list(itertools.combinations(range(d), m))
            pick = rng.choice(len(combos), size=C, replace=False)
            chosen = [combos[i] for i in pick]
        else:
            chosen = []
            while len(chosen) < C:
                c = tuple(sorted(rng.choice(d, size=m, replace=False).tolist()))
                if c not in seen:
                    seen.add(c)
                    chosen.append(c)
        for c in chosen:
            mask = np.zeros(d, dtype=bool)
            mask[list(c)] = True
            masks.append(mask)
        task.masks = masks
    elif kind == "eicl":
        if d < 2:
            raise ContractError("EICL needs d >= 2")
        k_w = int(config.get("k_w", default_window(d)))
        if not 1 <= k_w < d:
            raise ContractError(f"window size must satisfy 1 <= k_w < d={d}, got {k_w}")
        task.window = k_w
    return task


@dataclass
class PretextBatch:
    inputs: np.ndarray
    targets: np.ndarray | None = None
    views: np.ndarray | None = None


def swap_corrupt(X: np.ndarray, masks: np.ndarray, pool: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Replace masked attributes of each row with those of one random pool row."""
    donors = pool[rng.integers(pool.shape[0], size=X.shape[0])]
    return np.where(masks, donors, X)


def random_masks(n: int, d: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """n boolean rows with exactly m True entries each, uniformly placed."""
    order = np.argsort(rng.random((n, d)), axis=1)
    masks = np.zeros((n, d), dtype=bool)
    np.put_along_axis(masks, order[:, :m], True, axis=1)
    return masks


def _rotate(X, task, classes):
    R = np.stack(task.rotations)
    return np.einsum("bi,bij->bj", X, R[classes])


def _shuffle(X, task, classes):
    P = np.stack(task.permutations)
    return np.take_along_axis(X, P[classes], axis=1)


def _augment(task: PretextTask, X: np.ndarray, pool: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One contrastive view."""
    if task.kind == "contrastive_rotation":
        return _rotate(X, task, rng.integers(task.n_classes, size=X.shape[0]))
    if task.kind == "contrastive_shuffle":
        return _shuffle(X, task, rng.integers(task.n_classes, size=X.shape[0]))
    return swap_corrupt(X, random_masks(X.shape[0], task.d, task.n_mask, rng), pool, rng)


def eicl_split(X: np.ndarray, window: int, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous windows X[:, s:s+window] and their complements."""
    d = X.shape[1]
    cols = starts[:, None] + np.arange(window)[None, :]
    a = np.take_along_axis(X, cols, axis=1)
    inside = np.zeros((X.shape[0], d), dtype=bool)
    np.put_along_axis(inside, cols, True, axis=1)
    b = X[~inside].reshape(X.shape[0], d - window)
    return a, b


def all_windows(X: np.ndarray, window: int) -> np.ndarray:
    """(n, d - window + 1, window) tensor of every contiguous window."""
    d = X.shape[1]
    idx = np.arange(d - window + 1)[:, None] + np.arange(window)[None, :]
    return X[:, idx]


def make_batch(task: PretextTask, X_batch, train_pool, rng: np.random.Generator) -> PretextBatch:
    X = np.asarray(X_batch, dtype=np.float64)
    pool = np.asarray(train_pool, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("batch is empty")
    if X.shape[1] != task.d:
        raise ContractError(f"batch width {X.shape[1]} != task width {task.d}")
    if pool.shape[0] == 0:
        raise ContractError("train_pool is empty")
    B = X.shape[0]
    k = task.kind
    if k == "rotation":
        c = rng.integers(task.n_classes, size=B)
        return PretextBatch(_rotate(X, task, c), c)
    if k == "shuffle":
        c = rng.integers(task.n_classes, size=B)
        return PretextBatch(_shuffle(X, task, c), c)
    if k == "mask_class":
        c = rng.integers(task.n_classes, size=B)
        masks = np.stack(task.masks)[c]
        return PretextBatch(swap_corrupt(X, masks, pool, rng), c)
    if k == "mask_columns":
        masks = random_masks(B, task.d, task.n_mask, rng)
        return PretextBatch(swap_corrupt(X, masks, pool, rng), masks.astype(np.float64))
    if k == "autoencoder":
        masks = rng.random((B, task.d)) < task.mask_rate
        return PretextBatch(swap_corrupt(X, masks, pool, rng), X.copy())
    if k in CONTRASTIVE_TASKS:
        return PretextBatch(_augment(task, X, pool, rng), None, _augment(task, X, pool, rng))
    # eicl: inputs hold every window, views the complement of the positive window
    starts = rng.integers(task.n_windows, size=B)
    _, b = eicl_split(X, task.window, starts)
    return PretextBatch(all_windows(X, task.window), starts, b)
