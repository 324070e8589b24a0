"""One-class SVM with an RBF kernel, solved by SMO on the dual."""

from __future__ import annotations

import numpy as np

from ..core import ContractError, NumericError

FULL_KERNEL_MAX_ROWS = 6000


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (
        np.einsum("ij,ij->i", A, A)[:, None]
        + np.einsum("ij,ij->i", B, B)[None, :]
        - 2.0 * A @ B.T
    )
    return np.exp(-gamma * np.maximum(d2, 0.0))


def scale_gamma(X: np.ndarray) -> float:
    var = float(X.var())
    return 1.0 / (X.shape[1] * var) if var > 0 else 1.0


class _KernelRows:
    """Rows of the training kernel matrix; precomputed when it fits in memory."""

    def __init__(self, X: np.ndarray, gamma: float, cache_rows: int = 2048):
        self.X, self.gamma = X, gamma
        n = X.shape[0]
        self.full = rbf_kernel(X, X, gamma) if n <= FULL_KERNEL_MAX_ROWS else None
        self.cache: dict[int, np.ndarray] = {}
        self.cache_rows = cache_rows
        self.sq = np.einsum("ij,ij->i", X, X)

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self.cache.get(i)
        if r is None:
            d2 = self.sq + self.sq[i] - 2.0 * self.X @ self.X[i]
            r = np.exp(-self.gamma * np.maximum(d2, 0.0))
            if len(self.cache) >= self.cache_rows:
                self.cache.pop(next(iter(self.cache)))
            self.cache[i] = r
        return r

    def diag(self) -> np.ndarray:
        return np.ones(self.X.shape[0])


def smo_one_class(K: _KernelRows, n: int, nu: float, tol: float, max_iter: int):
    """Solve min 1/2 a'Qa s.t. 0 <= a_i <= 1, sum a = nu*n (libsvm scaling).

    Working pairs use maximal violation for the first index and second-order
    gain for the second. Returns (alpha, rho, iterations).
    """
    total = nu * n
    alpha = np.zeros(n)
    m = int(total)
    alpha[:m] = 1.0
    if m < n:
        alpha[m] = total - m
    G = np.zeros(n)
    for i in np.flatnonzero(alpha):
        G += alpha[i] * K.row(i)
    QD = K.diag()

    it = 0
    while True:
        up = alpha < 1.0
        low = alpha > 0.0
        minus_g = -G
        cand_i = np.flatnonzero(up)
        i = cand_i[np.argmax(minus_g[cand_i])]
        gmax = minus_g[i]
        low_idx = np.flatnonzero(low)
        gmin = minus_g[low_idx].min() if low_idx.size else np.inf
        if gmax - gmin < tol:
            break
        if it >= max_iter:
            raise NumericError(f"SMO did not converge in {max_iter} iterations; KKT gap {gmax - gmin:.3e}")
        Qi = K.row(i)
        b = gmax - minus_g[low_idx]
        viol = b > 0
        jc = low_idx[viol]
        a = QD[i] + QD[jc] - 2.0 * Qi[jc]
        a = np.where(a > 0, a, 1e-12)
        j = jc[np.argmin(-(b[viol] ** 2) / a)]
        Qj = K.row(j)
        quad = QD[i] + QD[j] - 2.0 * Qi[j]
        quad = quad if quad > 0 else 1e-12
        t = (G[j] - G[i]) / quad
        t = min(t, 1.0 - alpha[i], alpha[j])
        alpha[i] += t
        alpha[j] -= t
        G += t * (Qi - Qj)
        it += 1

    free = (alpha > 0.0) & (alpha < 1.0)
    if free.any():
        rho = float(G[free].mean())
    else:
        ub = G[alpha <= 0.0].min(initial=np.inf)
        lb = G[alpha >= 1.0].max(initial=-np.inf)
        rho = 0.5 * (ub + lb)
    return alpha, rho, it


class OneClassSVMDetector:
    """Schölkopf one-class SVM; score = rho - sum_i alpha_i k(x_i, q).

    ``alpha_`` and ``rho_`` are stored in the normalisation sum(alpha) = 1,
    0 <= alpha_i <= 1/(nu n).
    """

    kind = "ocsvm"

    def __init__(self, nu: float = 0.5, gamma="scale", tol: float = 1e-3, max_iter: int | None = None):
        if not 0.0 < nu <= 1.0:
            raise ContractError(f"nu must lie in (0, 1], got {nu}")
        self.nu = float(nu)
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if n < 2:
            raise ContractError("one-class SVM needs at least 2 training rows")
        if self.nu * n < 1.0:
            raise ContractError(f"nu * n_train = {self.nu * n:.3g} < 1")
        self.gamma_ = scale_gamma(X) if self.gamma == "scale" else float(self.gamma)
        K = _KernelRows(X, self.gamma_)
        max_iter = self.max_iter if self.max_iter is not None else max(10_000_000, 100 * n)
        alpha, rho, self.n_iter_ = smo_one_class(K, n, self.nu, self.tol, max_iter)
        sv = alpha > 0
        scale = self.nu * n
        self.support_ = X[sv]
        self.support_index_ = np.flatnonzero(sv)
        self.alpha_ = alpha[sv] / scale
        self.rho_ = rho / scale
        return self

    def decision(self, Q) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        out = np.empty(Q.shape[0])
        for lo in range(0, Q.shape[0], 4096):
            out[lo : lo + 4096] = rbf_kernel(Q[lo : lo + 4096], self.support_, self.gamma_) @ self.alpha_
        return out

    def score(self, Q) -> np.ndarray:
        return self.rho_ - self.decision(Q)

    def state(self) -> dict:
        return {"nu": self.nu, "gamma": self.gamma_, "rho": self.rho_, "alpha": self.alpha_, "support": self.support_}


def ocsvm(train, queries, nu: float = 0.5, gamma="scale", **kwargs) -> np.ndarray:
    return OneClassSVMDetector(nu=nu, gamma=gamma, **kwargs).fit(train).score(queries)
