"""Least-squares projection onto polynomials of the current state.

The conditional expectation E[. | X_n] in the backward sweeps is replaced by
the empirical least-squares projection onto monomials of total degree <= p
in the standardised coordinates u = (x - mean) / std. Coordinates whose
spread has collapsed (for instance at t = 0 where every particle sits at
x0) are dropped, so a point cloud is projected onto constants.
"""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .errors import RegressionError

__all__ = ["Projector", "monomials"]

MAX_DEGREE = 3


def monomials(u: np.ndarray, degree: int) -> np.ndarray:
    """Design matrix [1, u_i, u_i u_j, ...] of total degree <= ``degree``."""
    n, d = u.shape
    cols = [np.ones(n)]
    for p in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), p):
            col = u[:, combo[0]].copy()
            for j in combo[1:]:
                col *= u[:, j]
            cols.append(col)
    return np.stack(cols, axis=1)


class Projector:
    """Projection onto the polynomial span of one particle cloud.

    ``project(T)`` returns the fitted values of every column of T (any
    trailing shape), ``coef(T)`` the coefficients.
    """

    def __init__(self, X: np.ndarray, degree: int = 1, collapse_tol: float = 1e-12):
        if not 0 <= degree <= MAX_DEGREE:
            raise ValueError(f"basis degree must be in 0..{MAX_DEGREE}, got {degree}")
        X = np.asarray(X, dtype=float)
        self.degree = degree
        self.center = X.mean(axis=0)
        self.scale = X.std(axis=0)
        floor = collapse_tol * (1.0 + np.abs(self.center))
        self.active = np.flatnonzero(self.scale > floor)
        self.collapsed = self.active.size < X.shape[1]
        self.features = self._design(X)
        M, P = self.features.shape
        if M < P:
            raise RegressionError(f"{M} particles cannot fit {P} basis functions")
        gram = self.features.T @ self.features
        try:
            self._chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise RegressionError("singular regression matrix (degenerate basis or cloud)") from None

    def _design(self, X):
        u = (X[:, self.active] - self.center[self.active]) / self.scale[self.active]
        return monomials(u, self.degree if self.active.size else 0)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def coef(self, T: np.ndarray) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        flat = T.reshape(T.shape[0], -1)
        rhs = self.features.T @ flat
        w = np.linalg.solve(self._chol, rhs)
        c = np.linalg.solve(self._chol.T, w)
        return c.reshape((c.shape[0],) + T.shape[1:])

    def project(self, T: np.ndarray) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        c = self.coef(T).reshape(self.n_features, -1)
        return (self.features @ c).reshape(T.shape)

    def evaluate(self, coef: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Apply fitted coefficients at new points x (n, d)."""
        F = self._design(np.asarray(x, dtype=float))
        c = np.asarray(coef).reshape(self.n_features, -1)
        return (F @ c).reshape((F.shape[0],) + np.asarray(coef).shape[1:])
