"""Synthetic anomalies, feature corruptions with forest importance, and 2-D toy datasets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import ContractError, Dataset, NumericError, make_rng, split_seeds

COV_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 200
IQR_TO_SIGMA = 1.349

ANOMALY_KINDS = ("local", "cluster", "global", "dependency")
CORRUPTIONS = ("add_uninformative", "missing_values", "remove_important", "select_important")
TOY_NAMES = ("curve", "flower", "gaussians", "multi_gaussians", "moons", "ring", "pinched_ring", "spiral")


# Gaussian mixtures -------------------------------------------------------------


@dataclass
class GMM:
    weights: np.ndarray
    means: np.ndarray  # K x d
    covariances: np.ndarray  # K x d x d
    log_likelihood: float = float("nan")  # total over the fitting rows
    bic: float = float("nan")
    history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def log_prob_components(self, X: np.ndarray) -> np.ndarray:
        """n x K matrix of log(pi_k N(x | mu_k, Sigma_k))."""
        n, d = X.shape
        out = np.empty((n, self.K))
        for k in range(self.K):
            L = np.linalg.cholesky(self.covariances[k])
            z = np.linalg.solve(L, (X - self.means[k]).T)
            logdet = 2.0 * np.log(np.diag(L)).sum()
            out[:, k] = np.log(self.weights[k]) - 0.5 * (d * math.log(2 * math.pi) + logdet + (z * z).sum(axis=0))
        return out

    def score(self, X) -> float:
        return float(logsumexp(self.log_prob_components(np.asarray(X, dtype=np.float64)), axis=1).sum())

    def sample(self, n: int, rng: np.random.Generator, mean_scale: float = 1.0, cov_scale: float = 1.0) -> np.ndarray:
        """Draw n rows from the mixture with means times ``mean_scale`` and
        covariances times ``cov_scale``."""
        comp = rng.choice(self.K, size=n, p=self.weights)
        out = np.empty((n, self.d))
        for k in range(self.K):
            idx = np.flatnonzero(comp == k)
            if idx.size:
                L = np.linalg.cholesky(cov_scale * self.covariances[k])
                out[idx] = mean_scale * self.means[k] + rng.normal(size=(idx.size, self.d)) @ L.T
        return out


def _floor_covariance(S: np.ndarray) -> tuple[np.ndarray, bool]:
    S = 0.5 * (S + S.T)
    lam, V = np.linalg.eigh(S)
    if lam.min() >= COV_FLOOR:
        return S, False
    S = (V * np.maximum(lam, COV_FLOOR)) @ V.T
    return 0.5 * (S + S.T), True


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        i = rng.choice(X.shape[0], p=d2 / total) if total > 0 else rng.integers(X.shape[0])
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(X: np.ndarray, resp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    n, d = X.shape
    nk = resp.sum(axis=0)
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    floored = False
    for k in range(resp.shape[1]):
        D = X - means[k]
        covs[k], f = _floor_covariance((resp[:, k, None] * D).T @ D / nk[k])
        floored |= f
    return nk / n, means, covs, floored


def _em(X: np.ndarray, K: int, rng: np.random.Generator) -> GMM:
    n, d = X.shape
    centers = _kmeans_pp(X, K, rng)
    labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(K)[labels]
    reseeded = False
    history: list[float] = []
    floored_any = False
    gmm = None
    for it in range(EM_MAX_ITER):
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-8 * n + 1e-12)
        if empty.size:
            if reseeded:
                raise NumericError(f"GMM component(s) {empty.tolist()} empty again after reseeding (K={K})")
            reseeded = True
            # move each empty component onto the worst-explained rows
            worst = np.argsort(resp.max(axis=1))[: empty.size] if gmm is None else np.argsort(
                logsumexp(gmm.log_prob_components(X), axis=1)
            )[: empty.size]
            resp[worst] = 0.0
            resp[worst, empty] = 1.0
            history = []
        w, mu, cov, floored = _m_step(X, resp)
        floored_any |= floored
        gmm = GMM(w, mu, cov)
        logp = gmm.log_prob_components(X)
        ll = float(logsumexp(logp, axis=1).sum())
        if history and ll < history[-1] - 1e-8 * max(1.0, abs(history[-1])) and not floored:
            raise NumericError(f"EM log-likelihood decreased from {history[-1]} to {ll} (K={K}, iter {it})")
        history.append(ll)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        if len(history) >= 2 and history[-1] - history[-2] < EM_TOL:
            break
    if floored_any:
        warnings.warn(f"GMM covariance eigenvalues floored at {COV_FLOOR} (K={K})", RuntimeWarning, stacklevel=3)
    n_params = (K - 1) + K * d + K * d * (d + 1) / 2
    gmm.log_likelihood = history[-1]
    gmm.bic = -2.0 * history[-1] + n_params * math.log(n)
    gmm.history = history
    return gmm


def fit_gmm(X, K_range=(1, 2, 3, 4, 5), seed: int = 0) -> GMM:
    """Full-covariance GMM by EM for each K, selecting the lowest BIC."""
    X = np.asarray(X, dtype=np.float64)
    K_range = sorted(set(int(k) for k in K_range))
    if not K_range or K_range[0] < 1:
        raise ContractError("K_range must hold positive integers")
    if X.ndim != 2 or X.shape[0] < 2 * K_range[-1]:
        raise ContractError(f"need n >= 2 * max(K) = {2 * K_range[-1]} rows, got {X.shape[0]}")
    best = None
    for K, s in zip(K_range, split_seeds(seed, len(K_range))):
        g = _em(X, K, make_rng(s))
        if best is None or g.bic < best.bic:
            best = g
    return best


# anomaly synthesis -------------------------------------------------------------


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 min(std, IQR/1.34) n^(-1/5); falls back to std when the IQR is 0."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.size ** (-0.2)


def synthesize_anomalies(
    kind: str,
    X_train,
    n: int,
    params: dict | None = None,
    seed: int = 0,
    gmm: GMM | None = None,
) -> np.ndarray:
    """Generate n synthetic anomalies of the given type from normal training rows.

    params: alpha (local covariance factor, 2), beta (cluster mean factor, 2),
    delta (global range factor, 0.01). ``gmm`` must be a fitted mixture for
    the local and cluster types.
    """
    p = {"alpha": 2.0, "beta": 2.0, "delta": 0.01, **(params or {})}
    if kind not in ANOMALY_KINDS:
        raise ContractError(f"unknown anomaly type {kind!r}")
    if n < 1:
        raise ContractError("n must be >= 1")
    X = np.asarray(X_train, dtype=np.float64)
    rng = make_rng(seed)
    if kind in ("local", "cluster"):
        if gmm is None or gmm.K < 1:
            raise ContractError(f"{kind} anomalies need a fitted GMM")
        if gmm.d != X.shape[1]:
            raise ContractError("GMM dimension does not match the data")
        if kind == "local":
            return gmm.sample(n, rng, cov_scale=p["alpha"])
        return gmm.sample(n, rng, mean_scale=p["beta"])
    if kind == "global":
        lo, hi = p["delta"] * X.min(axis=0), p["delta"] * X.max(axis=0)
        return lo + (hi - lo) * rng.random((n, X.shape[1]))
    # dependency: independent per-column KDE draws keep marginals, drop dependence
    out = np.empty((n, X.shape[1]))
    for j in range(X.shape[1]):
        col = X[:, j]
        out[:, j] = col[rng.integers(col.size, size=n)] + silverman_bandwidth(col) * rng.normal(size=n)
    return out


# random-forest importance ------------------------------------------------------


@dataclass
class ImportanceRanking:
    importance: np.ndarray
    order: np.ndarray  # feature indices, most important first


def _gini(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1)
    safe = np.where(tot > 0, tot, 1)
    p = counts / safe[..., None]
    return 1.0 - (p * p).sum(axis=-1)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features: np.ndarray):
    """Best (gain, feature, threshold) over ``features`` by Gini decrease."""
    n = y.size
    parent = _gini(np.bincount(y, minlength=n_classes).astype(float))
    best = (0.0, -1, 0.0)
    onehot = np.eye(n_classes)[y]
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = np.flatnonzero(xs[1:] > xs[:-1])  # split between positions i and i+1
        if valid.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[valid]
        right = left[-1:] * 0 + np.bincount(y, minlength=n_classes) - left
        nl = (valid + 1).astype(float)
        child = (nl * _gini(left) + (n - nl) * _gini(right)) / n
        i = int(np.argmin(child))
        gain = parent - child[i]
        if gain > best[0] + 1e-15:
            best = (float(gain), int(f), 0.5 * (xs[valid[i]] + xs[valid[i] + 1]))
    return best


def _grow_importance(X, y, n_classes, depth, max_depth, m_features, rng, imp, n_total):
    if depth >= max_depth or y.size < 2 or np.all(y == y[0]):
        return
    features = rng.choice(X.shape[1], size=m_features, replace=False)
    gain, f, thr = _best_split(X, y, n_classes, features)
    if f < 0:
        return
    imp[f] += y.size / n_total * gain
    mask = X[:, f] <= thr
    _grow_importance(X[mask], y[mask], n_classes, depth + 1, max_depth, m_features, rng, imp, n_total)
    _grow_importance(X[~mask], y[~mask], n_classes, depth + 1, max_depth, m_features, rng, imp, n_total)


def forest_importance(
    X, y, n_trees: int = 100, max_depth: int = 8, features_per_split: int | None = None, seed: int = 0
) -> ImportanceRanking:
    """Mean decrease in Gini impurity over a bagged forest of randomised trees.

    Each tree's importances are normalised to sum 1 before averaging.
    """
    X = np.asarray(X, dtype=np.float64)
    classes, y = np.unique(np.asarray(y), return_inverse=True)
    if classes.size < 2:
        raise ContractError("forest importance needs at least two classes")
    n, d = X.shape
    m = features_per_split or math.ceil(math.sqrt(d))
    m = min(max(1, m), d)
    total = np.zeros(d)
    for s in split_seeds(seed, n_trees):
        rng = make_rng(s)
        rows = rng.integers(n, size=n)
        imp = np.zeros(d)
        _grow_importance(X[rows], y[rows], classes.size, 0, max_depth, m, rng, imp, n)
        if imp.sum() > 0:
            total += imp / imp.sum()
    if total.sum() == 0:
        total = np.ones(d)
    total /= total.sum()
    return ImportanceRanking(total, np.argsort(-total, kind="stable"))


# corruptions -------------------------------------------------------------------


def corrupt(
    kind: str,
    splits: dict[str, np.ndarray],
    proportion: float,
    ranking: ImportanceRanking | None = None,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Apply one corruption to every matrix in ``splits`` (keys e.g. train/val/test).

    Statistics (templates, imputation means) come from ``splits["train"]`` only.
    """
    if kind not in CORRUPTIONS:
        raise ContractError(f"unknown corruption {kind!r}")
    if not 0.0 < proportion <= 1.0:
        raise ContractError(f"proportion must lie in (0, 1], got {proportion}")
    if "train" not in splits:
        raise ContractError("splits must contain 'train'")
    splits = {k: np.asarray(v, dtype=np.float64) for k, v in splits.items()}
    train = splits["train"]
    d = train.shape[1]
    rng = make_rng(seed)

    if kind == "add_uninformative":
        n_add = math.floor(round(proportion * d, 9))
        templates = rng.integers(d, size=n_add)
        mean = train.mean(axis=0)[templates]
        q75, q25 = np.percentile(train, [75, 25], axis=0)
        sigma = ((q75 - q25) / IQR_TO_SIGMA)[templates]
        return {
            k: np.hstack([v, mean + sigma * rng.normal(size=(v.shape[0], n_add))]) for k, v in sorted(splits.items())
        }

    if kind == "missing_values":
        masks = {}
        for k, v in sorted(splits.items()):
            n_miss = round(proportion * v.size)
            flat = np.zeros(v.size, dtype=bool)
            flat[rng.choice(v.size, size=n_miss, replace=False)] = True
            masks[k] = flat.reshape(v.shape)
        observed = ~masks["train"]
        counts = observed.sum(axis=0)
        sums = np.where(observed, train, 0.0).sum(axis=0)
        fill = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        return {k: np.where(masks[k], fill, v) for k, v in splits.items()}

    if ranking is None:
        raise ContractError(f"{kind} needs a feature ranking")
    if ranking.order.size != d:
        raise ContractError("ranking length does not match the number of columns")
    if kind == "remove_important":
        n_drop = math.floor(round(proportion * d, 9))
        keep = np.sort(ranking.order[: d - n_drop])
    else:
        keep = ranking.order[: math.ceil(round(proportion * d, 9))]
    if keep.size == 0:
        raise ContractError("corruption would leave no columns")
    return {k: v[:, keep] for k, v in splits.items()}


# toy datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    name: str
    n_normal: int = 500
    n_anomaly: int | None = None  # default 5% of n_normal
    noise: float = 0.05
    seed: int = 0

    @property
    def anomalies(self) -> int:
        return self.n_anomaly if self.n_anomaly is not None else max(1, round(0.05 * self.n_normal))


RING_RADIUS = 1.0


def _far_from(points: np.ndarray, reference: np.ndarray, min_dist: float) -> np.ndarray:
    d2 = ((points[:, None, :] - reference[None, :, :]) ** 2).sum(-1)
    return d2.min(axis=1) >= min_dist**2


def _scatter(rng, m, box, reference, min_dist):
    """m uniform points in ``box`` at least ``min_dist`` from every reference point."""
    out = []
    while sum(len(o) for o in out) < m:
        cand = box[0] + (box[1] - box[0]) * rng.random((4 * m, 2))
        out.append(cand[_far_from(cand, reference, min_dist)])
    return np.concatenate(out)[:m]


def _curve_points(name: str, t: np.ndarray) -> np.ndarray:
    if name == "curve":
        x = 4 * t - 2
        return np.c_[x, np.sin(1.5 * x)]
    if name == "spiral":
        a = 3 * np.pi * t
        r = 0.3 + 1.7 * t
        return np.c_[r * np.cos(a), r * np.sin(a)]
    # flower: rose curve with 5 petals
    a = 2 * np.pi * t
    r = np.abs(np.cos(2.5 * a)) * 1.8 + 0.2
    return np.c_[r * np.cos(a), r * np.sin(a)]


def make_toy(spec: ToySpec) -> Dataset:
    """2-D toy with normals first, then anomalies (label 1)."""
    if spec.name not in TOY_NAMES:
        raise ContractError(f"unknown toy {spec.name!r}; choose from {TOY_NAMES}")
    if spec.n_normal < 50:
        raise ContractError("toy datasets need n_normal >= 50")
    rng = make_rng(spec.seed)
    n, m, s = spec.n_normal, spec.anomalies, spec.noise
    name = spec.name

    if name == "gaussians":
        normal = rng.normal(size=(n, 2)) * 0.5
        anom = np.array([3.0, 3.0]) + rng.normal(size=(m, 2)) * 0.2
    elif name == "multi_gaussians":
        centers = np.array([[-2.0, -1.5], [2.0, -1.5], [0.0, 2.0]])
        normal = centers[rng.integers(3, size=n)] + rng.normal(size=(n, 2)) * 0.4
        anom = _scatter(rng, m, (np.array([-3.5, -3.0]), np.array([3.5, 3.5])), centers, 1.6)
    elif name == "moons":
        t = np.pi * rng.random(n)
        upper = rng.random(n) < 0.5
        normal = np.where(
            upper[:, None],
            np.c_[np.cos(t), np.sin(t)],
            np.c_[1 - np.cos(t), 0.5 - np.sin(t)],
        ) + rng.normal(size=(n, 2)) * s
        dense = np.r_[
            np.c_[np.cos(np.linspace(0, np.pi, 400)), np.sin(np.linspace(0, np.pi, 400))],
            np.c_[1 - np.cos(np.linspace(0, np.pi, 400)), 0.5 - np.sin(np.linspace(0, np.pi, 400))],
        ]
        anom = _scatter(rng, m, (np.array([-1.5, -1.0]), np.array([2.5, 1.5])), dense, 0.35)
    elif name in ("ring", "pinched_ring"):
        theta = 2 * np.pi * rng.random(n)
        r = RING_RADIUS * (0.8 + 0.4 * rng.random(n))
        if name == "pinched_ring":
            r = r * (0.5 + 0.5 * np.abs(np.cos(theta)))
        normal = np.c_[r * np.cos(theta), r * np.sin(theta)]
        phi = 2 * np.pi * rng.random(m)
        rho = 0.3 * RING_RADIUS * np.sqrt(rng.random(m)) * (1 - 1e-9)
        anom = np.c_[rho * np.cos(phi), rho * np.sin(phi)]
        if name == "pinched_ring":
            anom = anom * 0.5
    else:
        normal = _curve_points(name, rng.random(n)) + rng.normal(size=(n, 2)) * s
        dense = _curve_points(name, np.linspace(0, 1, 2000))
        lo, hi = dense.min(axis=0) - 0.5, dense.max(axis=0) + 0.5
        anom = _scatter(rng, m, (lo, hi), dense, 0.4)

    X = np.vstack([normal, anom])
    y = np.r_[np.zeros(n, dtype=np.int64), np.ones(m, dtype=np.int64)]
    return Dataset(name=f"toy_{name}", X=X, y=y, provenance=f"toy:{name}:seed={spec.seed}")
