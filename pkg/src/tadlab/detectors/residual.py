"""Residual-norm detector: norm of the projection onto the smallest-eigenvalue directions."""

from __future__ import annotations

import numpy as np

from ..linalg import PrincipalBasis, n_smallest, principal_basis, residual_project


class ResidualNormDetector:
    kind = "residual_norm"

    def __init__(self, keep_smallest_fraction: float = 0.5, centered: bool = False):
        n_smallest(keep_smallest_fraction, 1)  # validates the range
        self.keep_smallest_fraction = float(keep_smallest_fraction)
        self.centered = centered

    def fit(self, X):
        self.basis_: PrincipalBasis = principal_basis(X, centered=self.centered)
        return self

    def score(self, Q) -> np.ndarray:
        R = residual_project(self.basis_, Q, self.keep_smallest_fraction)
        return np.linalg.norm(R, axis=1)

    def state(self) -> dict:
        dec = self.basis_.decomposition
        return {"fraction": self.keep_smallest_fraction, "values": dec.values, "vectors": dec.vectors}


def residual_norm(train, queries, keep_smallest_fraction: float, **kwargs) -> np.ndarray:
    return ResidualNormDetector(keep_smallest_fraction, **kwargs).fit(train).score(queries)
