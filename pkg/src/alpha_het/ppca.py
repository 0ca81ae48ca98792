"""Projected-PCA: factors from the covariate-smoothed data ``P X``."""

from __future__ import annotations

import numpy as np

from .data_model import FactorFit
from .errors import ValidationError
from .pca import _factor_fit, gram_eigenvalues
from .sieve import ProjectionContext


def projected_gram(X, ctx: ProjectionContext):
    """``X' P X / (n p)`` computed as ``M'M`` with ``M = Q'X``, so it is exactly symmetric PSD."""
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    if ctx.p != p:
        raise ValidationError(f"projection built for p={ctx.p}, data has p={p}")
    M = ctx.Q.T @ X
    return M.T @ M / (n * p)


def fit_ppca(X, ctx: ProjectionContext, K: int, batch_id: str = "") -> FactorFit:
    """Remove ``K`` factors estimated from the top eigenvectors of ``X'PX``."""
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    G = projected_gram(X, ctx)
    upper = min(ctx.rank, n) - 1
    if not 0 <= K <= upper:
        raise ValidationError(f"K must lie in [0, {upper}] for rank(Phi)={ctx.rank}, n={n}; got {K}")
    return _factor_fit("PPCA", X, G, K, batch_id, gram_eigenvalues(G))


def decompose_loadings(fit: FactorFit, ctx: ProjectionContext, X):
    """Split PPCA loadings into a covariate part ``Phi B`` and a remainder ``Gamma``.

    Returns
    -------
    B : ndarray, shape (Jd, K)
        ``n^{-1} (Phi'Phi)^{-1} Phi' X F``.  Rows for basis columns dropped by
        rank filtering are zero.
    Gamma : ndarray, shape (p, K)
        ``n^{-1} (I - P) X F``.
    """
    if fit.method != "PPCA":
        raise ValidationError("loading decomposition needs a PPCA fit")
    X = np.asarray(X, dtype=float)
    if X.shape != fit.U.shape or ctx.p != X.shape[0]:
        raise ValidationError("X, fit and projection disagree on dimensions")
    n = X.shape[1]
    XF = X @ fit.F / n
    B = np.zeros((ctx.Phi.shape[1], fit.K))
    if fit.K:
        B[list(ctx.kept)] = ctx.coefficients(XF)
    Gamma = ctx.apply_complement(XF)
    return B, Gamma
