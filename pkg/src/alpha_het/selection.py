"""Per-batch model selection: number of factors, covariate specification test, FDR routing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .data_model import Dataset
from .errors import NumericalError, ValidationError
from .pca import fit_pca, gram_eigenvalues
from .ppca import projected_gram
from .sieve import BasisSpec, ProjectionContext, projection_from_covariates

EIGEN_FLOOR = 1e-12


def estimate_k_ratio(eigenvalues, K_max: int) -> int:
    """``argmax_{k <= K_max} lambda_k / lambda_{k+1}``; ties go to the smaller ``k``.

    Eigenvalues are floored at ``1e-12 * lambda_1`` so exactly low-rank
    spectra do not produce ``0/0``.
    """
    ev = np.asarray(eigenvalues, dtype=float)
    if K_max < 1:
        raise ValidationError("K_max must be >= 1")
    if len(ev) < K_max + 1:
        raise ValidationError(f"need at least K_max + 1 = {K_max + 1} eigenvalues, got {len(ev)}")
    ev = np.sort(ev)[::-1][: K_max + 1]
    if not ev[0] > 0:
        raise NumericalError("leading eigenvalue must be positive")
    ev = np.maximum(ev, EIGEN_FLOOR * ev[0])
    ratios = ev[:-1] / ev[1:]
    return int(np.argmax(ratios)) + 1


def estimate_k(X, ctx: Optional[ProjectionContext] = None, K_max: int = 5) -> int:
    """Eigenvalue-ratio estimate on ``X'X`` or, with a projection, ``X'PX``."""
    X = np.asarray(X, dtype=float)
    p, n = X.shape
    if ctx is None:
        ev = gram_eigenvalues(X.T @ X / (n * p))
    else:
        if K_max > ctx.rank - 1:
            raise ValidationError(f"K_max={K_max} exceeds rank(Phi) - 1 = {ctx.rank - 1}")
        ev = gram_eigenvalues(projected_gram(X, ctx))
    return estimate_k_ratio(ev, K_max)


def default_projected_kmax(ctx: ProjectionContext, n: int) -> int:
    """``Jd / 2``, capped so enough eigenvalues exist."""
    return max(1, min(ctx.rank // 2, ctx.rank - 1, n - 1))


@dataclass(frozen=True)
class SpecTestResult:
    S: float
    z: float
    p_value: float
    J: int
    d: int
    K: int
    dof: int = 0  # rank of the basis actually used; equals J*d unless columns were dropped

    def to_dict(self) -> dict:
        return {"S": self.S, "z": self.z, "p_value": self.p_value,
                "J": self.J, "d": self.d, "K": self.K, "dof": self.dof}


def spec_statistic(Lambda, ctx: ProjectionContext) -> float:
    """``S = tr((Lambda'Lambda)^{-1} Lambda' P Lambda)``, i.e. ``p^{-1} tr(Xi Lambda' P Lambda)``."""
    L = np.asarray(Lambda, dtype=float)
    G = L.T @ L
    QL = ctx.Q.T @ L
    try:
        c = np.linalg.cond(G)
        if not np.isfinite(c) or c > 1e14:
            raise np.linalg.LinAlgError
        return float(np.trace(np.linalg.solve(G, QL.T @ QL)))
    except np.linalg.LinAlgError:
        raise NumericalError("loadings are singular; specification test undefined") from None


def spec_test(X, ctx: ProjectionContext, K: int) -> SpecTestResult:
    """Test whether covariates explain the PCA loadings.

    Uses the upper tail of ``z = (pS - JdK) / sqrt(2JdK)``, which is
    asymptotically standard normal when the loadings do not depend on the
    covariates.
    """
    X = np.asarray(X, dtype=float)
    if K < 1:
        raise ValidationError("specification test needs K >= 1")
    p = X.shape[0]
    fit = fit_pca(X, K)
    S = spec_statistic(fit.Lambda, ctx)
    dof = ctx.rank
    z = (p * S - dof * K) / math.sqrt(2.0 * dof * K)
    d = ctx.d
    J = dof // d if dof % d == 0 else ctx.J
    return SpecTestResult(S=S, z=z, p_value=float(norm.sf(z)), J=J, d=d, K=K, dof=dof)


def bh_fdr(p_values: Sequence[float], q: float) -> set:
    """Benjamini-Hochberg step-up; returns the set of rejected indices."""
    pv = np.asarray(p_values, dtype=float)
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    if pv.size == 0:
        return set()
    if np.any((pv < 0) | (pv > 1)) or np.any(np.isnan(pv)):
        raise ValidationError("p-values must lie in [0, 1]")
    m = pv.size
    order = np.argsort(pv, kind="stable")
    passed = np.flatnonzero(pv[order] <= q * np.arange(1, m + 1) / m)
    if passed.size == 0:
        return set()
    return {int(i) for i in order[: passed[-1] + 1]}


# ---------------------------------------------------------------- routing


@dataclass(frozen=True)
class SelectionConfig:
    basis: BasisSpec = field(default_factory=BasisSpec)
    q: float = 0.01
    K_max: int = 5
    K_max_projected: Optional[int] = None  # None -> Jd/2
    force_regime: Mapping[str, str] = field(default_factory=dict)
    fixed_K: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class RegimeAssignment:
    batch_id: str
    regime: str  # "M1" | "M2"
    K: int
    p_value: Optional[float]
    K_hat: int = 0
    test: Optional[SpecTestResult] = None
    note: str = ""

    def to_dict(self) -> dict:
        out = {"batch_id": self.batch_id, "regime": self.regime, "K": self.K,
               "K_hat": self.K_hat, "p_value": self.p_value, "note": self.note,
               "S": None, "z": None}
        if self.test is not None:
            out["S"], out["z"] = self.test.S, self.test.z
        return out


def batch_projection(batch, basis: BasisSpec, cache=None) -> Optional[ProjectionContext]:
    if batch.W is None:
        return None
    key = (batch.W.tobytes(), batch.W.shape)
    if cache is not None and key in cache:
        return cache[key]
    ctx = projection_from_covariates(batch.W, basis)
    if cache is not None:
        cache[key] = ctx
    return ctx


def _k_max_for(n, K_max):
    return max(1, min(K_max, n - 1))


def assign_regimes(dataset: Dataset, config: SelectionConfig, projections=None, executor=None):
    """Route each batch to PCA (M1) or Projected-PCA (M2).

    Per batch: estimate ``K`` from ``X'X``, run the specification test at
    that ``K``, then apply Benjamini-Hochberg at level ``q`` across tested
    batches.  Rejected batches go to M2 with ``K`` re-estimated from
    ``X'PX``.  Batches without covariates, with ``K = 0`` fixed, or with a
    singular loading matrix stay in M1.
    """
    if projections is None:
        cache = {}
        projections = [batch_projection(b, config.basis, cache) for b in dataset]

    def first_pass(i):
        b = dataset.batches[i]
        ctx = projections[i]
        if b.id in config.fixed_K:
            K_hat = int(config.fixed_K[b.id])
        else:
            K_hat = estimate_k(b.X, None, _k_max_for(b.n, config.K_max))
        if ctx is None or K_hat == 0:
            return K_hat, None, "no covariates" if ctx is None else "K fixed at 0"
        try:
            return K_hat, spec_test(b.X, ctx, K_hat), ""
        except NumericalError as exc:
            return K_hat, None, f"test undefined: {exc}"

    idx = range(dataset.m)
    results = list(executor.map(first_pass, idx)) if executor else [first_pass(i) for i in idx]

    tested = [i for i, (_, t, _) in enumerate(results) if t is not None]
    rejected_local = bh_fdr([results[i][1].p_value for i in tested], config.q)
    rejected = {tested[k] for k in rejected_local}

    out = []
    for i, b in enumerate(dataset.batches):
        K_hat, test, note = results[i]
        regime = "M2" if i in rejected else "M1"
        forced = config.force_regime.get(b.id)
        if forced is not None:
            if forced not in ("M1", "M2"):
                raise ValidationError(f"force_regime for {b.id} must be M1 or M2")
            if forced == "M2" and projections[i] is None:
                raise ValidationError(f"batch {b.id} forced to M2 but has no covariates")
            regime = forced
            note = (note + "; " if note else "") + "regime forced"
        K = K_hat
        if regime == "M2" and b.id not in config.fixed_K:
            ctx = projections[i]
            kmax = config.K_max_projected or default_projected_kmax(ctx, b.n)
            kmax = max(1, min(kmax, ctx.rank - 1, b.n - 1))
            K = estimate_k(b.X, ctx, kmax)
        p_val = None if test is None else test.p_value
        out.append(RegimeAssignment(b.id, regime, int(K), p_val, int(K_hat), test, note))
    return out
