"""Sieve bases on variable-level covariates and the projection onto their span."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import RankDeficientBasisError, ValidationError

# P is stored densely up to this many variables; beyond that only Q is kept.
DENSE_P_LIMIT = 4096
# Columns whose pivoted-QR diagonal satisfies R_kk^2 < RANK_RTOL * R_00^2 are dropped.
RANK_RTOL = 1e-12

_KINDS = ("indicator", "polynomial", "bspline")


@dataclass(frozen=True)
class BasisSpec:
    """Which sieve basis to evaluate on each covariate column.

    ``support`` is a list of category labels for ``indicator`` (shared by all
    covariate columns) or a ``(low, high)`` range for the continuous kinds.
    With no support given, indicators default to labels ``1..J`` and
    continuous kinds use the observed range of each column.
    """

    kind: str = "indicator"
    J: int = 10
    support: Optional[Sequence] = None
    degree: int = 3

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"basis kind must be one of {_KINDS}, got {self.kind!r}")
        if int(self.J) < 1:
            raise ValidationError("J must be >= 1")
        if self.kind == "indicator" and self.support is not None and len(self.support) != self.J:
            raise ValidationError("indicator basis needs exactly J category labels")
        if self.kind == "bspline":
            if self.degree < 1:
                raise ValidationError("bspline degree must be >= 1")
            if self.J < self.degree + 1:
                raise ValidationError(f"bspline needs J >= degree + 1 = {self.degree + 1}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "J": int(self.J)}
        if self.support is not None:
            out["support"] = list(self.support)
        if self.kind == "bspline":
            out["degree"] = int(self.degree)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        d = dict(d)
        unknown = set(d) - {"kind", "J", "support", "degree"}
        if unknown:
            raise ValidationError(f"unknown basis fields {sorted(unknown)}")
        if d.get("support") is not None:
            d["support"] = tuple(d["support"])
        return cls(**d)


def _indicator_block(w, labels, col):
    labels = np.asarray(labels, dtype=float)
    hit = np.abs(w[:, None] - labels[None, :]) < 1e-9
    missing = np.flatnonzero(~hit.any(axis=1))
    if len(missing):
        j = int(missing[0])
        raise ValidationError(
            f"unknown category {w[j]!r} for variable {j} in covariate dimension {col}"
        )
    return hit.astype(float)


def _range(w, support, col):
    lo, hi = (float(w.min()), float(w.max())) if support is None else map(float, support)
    if not hi > lo:
        raise ValidationError(f"degenerate support [{lo}, {hi}] in covariate dimension {col}")
    out = np.flatnonzero((w < lo) | (w > hi))
    if len(out):
        j = int(out[0])
        raise ValidationError(
            f"value {w[j]!r} of variable {j} outside support [{lo}, {hi}] in dimension {col}"
        )
    return lo, hi


def bspline_knots(lo, hi, J, degree):
    """Clamped knot vector with uniform interior knots giving ``J`` basis functions."""
    interior = np.linspace(lo, hi, J - degree + 1)[1:-1]
    return np.r_[[lo] * (degree + 1), interior, [hi] * (degree + 1)]


def build_basis(W, spec: BasisSpec) -> np.ndarray:
    """Evaluate the sieve basis on every covariate column.

    Returns the ``p x (J*d)`` matrix whose column block ``l*J:(l+1)*J`` holds
    ``phi_1..phi_J`` evaluated on covariate column ``l``.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    blocks = []
    for col in range(W.shape[1]):
        w = W[:, col]
        if spec.kind == "indicator":
            labels = spec.support if spec.support is not None else range(1, spec.J + 1)
            blocks.append(_indicator_block(w, labels, col))
        elif spec.kind == "polynomial":
            if spec.support is not None:
                _range(w, spec.support, col)
            blocks.append(np.vander(w, spec.J, increasing=True))
        else:
            lo, hi = _range(w, spec.support, col)
            t = bspline_knots(lo, hi, spec.J, spec.degree)
            blocks.append(BSpline.design_matrix(w, t, spec.degree).toarray())
    return np.hstack(blocks)


@dataclass(frozen=True)
class ProjectionContext:
    """Projection onto the column space of a sieve basis.

    ``Q`` is an orthonormal basis of ``span(Phi)`` so ``P = Q Q'``; ``P`` is
    only materialised when ``p <= DENSE_P_LIMIT``, otherwise it is ``None``
    and callers go through :meth:`apply`.
    """

    Phi: np.ndarray
    Q: np.ndarray
    P: Optional[np.ndarray]
    gram_condition: float
    kept: tuple
    dropped: tuple
    d: int = 1
    J: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.Phi.shape[0]

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    @property
    def Phi_kept(self) -> np.ndarray:
        return self.Phi[:, list(self.kept)]

    def apply(self, x):
        """Return ``P @ x`` without forming ``P``."""
        return self.Q @ (self.Q.T @ x)

    def apply_complement(self, x):
        return x - self.apply(x)

    def coefficients(self, x):
        """Least-squares coefficients ``(Phi'Phi)^{-1} Phi' x`` on the kept columns."""
        return linalg.lstsq(self.Phi_kept, x, lapack_driver="gelsy")[0]


def build_projection(Phi, J: Optional[int] = None, d: int = 1) -> ProjectionContext:
    """Build ``P = Phi (Phi'Phi)^{-1} Phi'`` after dropping collinear columns.

    Columns are first scaled to unit norm (``P`` does not depend on column
    scaling) and then ranked by a column-pivoted QR; trailing columns whose
    pivot is negligible relative to the first are dropped and reported in
    ``dropped``.
    """
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim != 2:
        raise ValidationError("Phi must be 2-D")
    p, r0 = Phi.shape
    norms = np.linalg.norm(Phi, axis=0)
    live = np.flatnonzero(norms > 0)
    if len(live) == 0:
        raise RankDeficientBasisError(range(r0))
    scaled = Phi[:, live] / norms[live]
    Qf, R, piv = linalg.qr(scaled, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag**2 >= RANK_RTOL * diag[0] ** 2))
    if rank == 0:
        raise RankDeficientBasisError(range(r0))
    kept = tuple(sorted(int(c) for c in live[piv[:rank]]))
    dropped = tuple(sorted(set(range(r0)) - set(kept)))
    Q = np.ascontiguousarray(Qf[:, :rank])
    s = np.linalg.svd(Phi[:, list(kept)], compute_uv=False)
    cond = float((s[0] / s[-1]) ** 2)
    P = None
    if p <= DENSE_P_LIMIT:
        P = Q @ Q.T
        P = 0.5 * (P + P.T)
    for a in (Phi, Q, P):
        if a is not None:
            a.setflags(write=False)
    return ProjectionContext(
        Phi=Phi,
        Q=Q,
        P=P,
        gram_condition=cond,
        kept=kept,
        dropped=dropped,
        d=int(d),
        J=int(J if J is not None else r0 // max(d, 1)),
    )


def projection_from_covariates(W, spec: BasisSpec) -> ProjectionContext:
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    return build_projection(build_basis(W, spec), J=spec.J, d=W.shape[1])
