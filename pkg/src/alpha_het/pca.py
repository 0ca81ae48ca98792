"""Factor removal by principal components on the ``n x n`` Gram matrix."""

from __future__ import annotations

import numpy as np

from .data_model import FactorFit
from .errors import ValidationError

SYMMETRY_RTOL = 1e-8


def fix_signs(V):
    """Flip each column so its largest-magnitude entry is positive."""
    V = np.array(V, dtype=float, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def top_eigenpairs(S, k: int):
    """Leading ``k`` eigenpairs of a symmetric matrix.

    Eigenvalues come back in descending order and each eigenvector has its
    largest-magnitude entry made positive.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {S.shape}")
    n = S.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must satisfy 1 <= k <= {n}, got {k}")
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > SYMMETRY_RTOL * scale:
        raise ValidationError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(w)[::-1][:k]
    return w[order], fix_signs(V[:, order])


def residual(X, F) -> np.ndarray:
    """Least-squares residual ``X (I - F F'/n)`` for factors with ``F'F/n = I``."""
    X = np.asarray(X, dtype=float)
    F = np.asarray(F, dtype=float).reshape(X.shape[1], -1)
    n, K = F.shape
    if K == 0:
        return X.copy()
    if np.max(np.abs(F.T @ F / n - np.eye(K))) > 1e-6:
        raise ValidationError("factors violate the normalisation F'F/n = I")
    return X - (X @ F) @ F.T / n


def _factor_fit(method, X, M, K, batch_id, evals_all):
    n = X.shape[1]
    if K == 0:
        return FactorFit(method, 0, np.zeros((n, 0)), np.zeros((X.shape[0], 0)),
                         X.copy(), evals_all, batch_id)
    vals, V = top_eigenpairs(M, K)
    F = np.sqrt(n) * V
    Lam = X @ F / n
    U = X - Lam @ F.T
    return FactorFit(method, K, F, Lam, U, evals_all, batch_id)


def gram_eigenvalues(M):
    """All eigenvalues of a symmetric matrix, descending."""
    return np.sort(np.linalg.eigvalsh(0.5 * (M + M.T)))[::-1]


def fit_pca(X, K: int, batch_id: str = "") -> FactorFit:
    """Remove ``K`` factors estimated as the top eigenvectors of ``X'X / (np)``.

    ``F / sqrt(n)`` holds the eigenvectors, loadings are ``X F / n`` and the
    residual is ``X - Lambda F'``.
    """
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    if not 0 <= K <= min(p, n) - 1:
        raise ValidationError(f"K must lie in [0, {min(p, n) - 1}], got {K}")
    M = X.T @ X / (n * p)
    return _factor_fit("PCA", X, M, K, batch_id, gram_eigenvalues(M))
