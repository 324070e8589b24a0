"""Symmetric eigendecomposition and principal/residual subspaces of X^T X."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ContractError, NumericError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 64


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray  # descending
    vectors: np.ndarray  # column i pairs with values[i]
    sweeps: int = 0


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint pairs covering every pair once."""
    players = list(range(n))
    if n % 2:
        players.append(-1)
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= 0 and q >= 0:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def sym_eig(S, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic Jacobi eigensolver for a dense symmetric matrix.

    Each sweep visits all index pairs in a fixed round-robin order; the pairs
    of one round are disjoint, so their rotations are applied together.
    Iteration stops once the off-diagonal Frobenius mass falls below
    ``tol * ||S||_F``. Eigenvalues are returned in descending order and each
    eigenvector is signed so its largest-magnitude component is positive.
    """
    A = np.array(S, dtype=np.float64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError("matrix has non-finite entries")
    n = A.shape[0]
    scale = np.abs(A).max() if A.size else 0.0
    if np.abs(A - A.T).max(initial=0.0) > 1e-9 * max(scale, 1e-300):
        raise ContractError("matrix is not symmetric within 1e-9 relative tolerance")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    total = np.linalg.norm(A)
    sweeps = 0
    if n > 1 and total > 0:
        rounds = [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)]

        def off(M):
            return math.sqrt(np.sum(np.triu(M, 1) ** 2) * 2.0)

        while off(A) > tol * total:
            if sweeps >= max_sweeps:
                raise NumericError(
                    f"Jacobi did not converge in {max_sweeps} sweeps; off-diagonal residual {off(A):.3e}"
                )
            for P, Q in rounds:
                apq = A[P, Q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                P, Q, apq = P[active], Q[active], apq[active]
                theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
                big = np.abs(theta) > 1e150
                safe = np.where(big, 1.0, theta)
                t = np.where(
                    big,
                    0.5 / np.where(big, theta, 1.0),
                    np.sign(safe) / (np.abs(safe) + np.sqrt(1.0 + safe * safe)),
                )
                t[theta == 0] = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J, with J acting on (p, q) as [[c, s], [-s, c]]
                Ap, Aq = A[P, :].copy(), A[Q, :].copy()
                A[P, :] = c[:, None] * Ap - s[:, None] * Aq
                A[Q, :] = s[:, None] * Ap + c[:, None] * Aq
                Ap, Aq = A[:, P].copy(), A[:, Q].copy()
                A[:, P] = Ap * c - Aq * s
                A[:, Q] = Ap * s + Aq * c
                Vp, Vq = V[:, P].copy(), V[:, Q].copy()
                V[:, P] = Vp * c - Vq * s
                V[:, Q] = Vp * s + Vq * c
            sweeps += 1

    values = np.diag(A).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    V = V[:, order]
    lead = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[lead, np.arange(n)] < 0, -1.0, 1.0)
    V = V * signs
    return EigenDecomposition(values=values, vectors=V, sweeps=sweeps)


@dataclass(frozen=True)
class PrincipalBasis:
    decomposition: EigenDecomposition
    d: int
    source_rows: int
    mean: np.ndarray | None = None  # set only when built with centered=True

    def save(self, path) -> None:
        """Little-endian float64 blob: d, n, eigenvalues, row-major eigenvectors[, mean]."""
        parts = [
            np.array([self.d, self.source_rows, 0.0 if self.mean is None else 1.0]),
            self.decomposition.values,
            self.decomposition.vectors.ravel(order="C"),
        ]
        if self.mean is not None:
            parts.append(self.mean)
        np.concatenate(parts).astype("<f8").tofile(path)

    @classmethod
    def load(cls, path) -> PrincipalBasis:
        blob = np.fromfile(path, dtype="<f8")
        d, n, centered = int(blob[0]), int(blob[1]), bool(blob[2])
        values = blob[3 : 3 + d].copy()
        vectors = blob[3 + d : 3 + d + d * d].reshape(d, d).copy()
        mean = blob[3 + d + d * d : 3 + 2 * d + d * d].copy() if centered else None
        return cls(EigenDecomposition(values, vectors), d=d, source_rows=n, mean=mean)


def principal_basis(X_train, centered: bool = False) -> PrincipalBasis:
    """Eigendecomposition of the (uncentered by default) Gram matrix X^T X."""
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ContractError(f"need a nonempty 2-D matrix, got shape {X.shape}")
    mean = None
    if centered:
        mean = X.mean(axis=0)
        X = X - mean
    G = X.T @ X
    G = 0.5 * (G + G.T)
    return PrincipalBasis(sym_eig(G), d=X.shape[1], source_rows=X.shape[0], mean=mean)


def n_smallest(fraction: float, d: int) -> int:
    """ceil(fraction * d), at least 1; guards float noise like 0.3 * 10."""
    if not (0.0 < fraction <= 1.0):
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    return max(1, math.ceil(round(fraction * d, 9)))


def residual_project(basis: PrincipalBasis, X, keep_smallest_fraction: float) -> np.ndarray:
    """Coordinates of X in the span of the smallest-eigenvalue directions."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != basis.d:
        raise ContractError(f"expected {basis.d} columns, got {X.shape[1]}")
    m = n_smallest(keep_smallest_fraction, basis.d)
    W_perp = basis.decomposition.vectors[:, basis.d - m :]
    if basis.mean is not None:
        X = X - basis.mean
    return X @ W_perp
