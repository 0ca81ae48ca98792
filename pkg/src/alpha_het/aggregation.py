"""Pooling adjusted residuals into one covariance estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import FactorFit
from .errors import ValidationError


@dataclass(frozen=True)
class AggregateEstimate:
    Sigma_hat: np.ndarray
    N: int
    K_total: int
    per_batch: tuple  # (batch_id, n_i, K_i, regime)

    @property
    def divisor(self) -> int:
        return self.N - self.K_total

    def ledger(self) -> list:
        return [
            {"batch_id": b, "n": int(n), "K": int(k), "regime": r}
            for b, n, k, r in self.per_batch
        ]


def aggregate_sigma(fits: Sequence[FactorFit]) -> AggregateEstimate:
    """``(N - sum K_i)^{-1} sum_i U_i U_i'`` over the adjusted batches."""
    fits = list(fits)
    if not fits:
        raise ValidationError("nothing to aggregate")
    p = fits[0].p
    if any(f.p != p for f in fits):
        raise ValidationError("all fits must share p")
    N = sum(f.n for f in fits)
    K_tot = sum(f.K for f in fits)
    if N - K_tot <= 0:
        raise ValidationError(
            f"degrees of freedom N - sum K = {N} - {K_tot} must be positive"
        )
    S = np.zeros((p, p))
    for f in fits:
        S += f.U @ f.U.T
    S /= N - K_tot
    S = 0.5 * (S + S.T)
    S.setflags(write=False)
    per = tuple((f.batch_id, f.n, f.K, f.regime) for f in fits)
    return AggregateEstimate(S, N, K_tot, per)


def pooled_covariance(mats, dof_correction=0) -> np.ndarray:
    """``sum_i M_i M_i' / (sum n_i - dof_correction)`` for raw matrices."""
    mats = list(mats)
    N = sum(m.shape[1] for m in mats)
    S = sum(m @ m.T for m in mats) / (N - dof_correction)
    return 0.5 * (S + S.T)


def max_norm_diff(A, B) -> float:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValidationError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.max(np.abs(A - B))) if A.size else 0.0
