"""Sparse precision estimation by column-wise constrained L1 minimisation (CLIME).

Each column solves

    minimise ||w||_1  subject to  ||Sigma w - e_j||_inf <= lambda

as a linear program in ``w = u - v`` (``u, v >= 0``) with a dense-tableau
two-phase primal simplex.  The raw solution is then symmetrised by keeping,
for every pair ``(i, j)``, whichever of the two entries has the smaller
magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ClimeColumnError, ValidationError

FEAS_TOL = 1e-8


@dataclass(frozen=True)
class ColumnStatus:
    iterations: int
    feasibility_gap: float  # max(|Sigma w - e_j| - lambda), <= 0 when feasible
    objective: float
    rule: str


class _Tableau:
    """Dense simplex tableau; last row holds reduced costs, last column the RHS."""

    def __init__(self, T, basis, tol):
        self.T = T
        self.basis = basis
        self.tol = tol
        self.iterations = 0

    def pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        nz = np.flatnonzero(col)
        if nz.size:
            T[nz] -= np.outer(col[nz], T[r])
        self.basis[r] = q
        self.iterations += 1

    def run(self, allowed, max_iter, rule="dantzig"):
        """Iterate until optimal.  Returns the rule in force at the end.

        ``dantzig`` picks the most negative reduced cost and switches to
        Bland's rule for good after a long run of degenerate pivots, so the
        method cannot cycle.
        """
        T = self.T
        nrow = T.shape[0] - 1
        tol = self.tol
        streak = 0
        bland = rule == "bland"
        limit = max(50, nrow)
        while True:
            if self.iterations >= max_iter:
                raise RuntimeError("iteration limit reached")
            rc = T[-1, :-1]
            cand = np.flatnonzero((rc < -tol) & allowed)
            if cand.size == 0:
                return "bland" if bland else rule
            q = int(cand[0]) if bland else int(cand[np.argmin(rc[cand])])
            colq = T[:nrow, q]
            rows = np.flatnonzero(colq > tol)
            if rows.size == 0:
                raise RuntimeError("unbounded")
            ratios = T[rows, -1] / colq[rows]
            best = ratios.min()
            ties = rows[ratios <= best + tol * max(1.0, abs(best))]
            # Bland tie-break: leave the basic variable with the smallest index
            r = int(ties[np.argmin(self.basis[ties])])
            if best <= tol:
                streak += 1
                if streak > limit:
                    bland = True
            else:
                streak = 0
            self.pivot(r, q)


def _solve_column_lp(Sigma, j, lam, max_iter, rule):
    p = Sigma.shape[0]
    scale = max(1.0, float(np.max(np.abs(Sigma))))
    tol = 1e-11 * scale
    nvar = 4 * p + 1  # u, v, s_upper, s_lower, artificial
    art = 4 * p
    T = np.zeros((2 * p + 1, nvar + 1))
    e = np.zeros(p)
    e[j] = 1.0
    T[:p, :p] = Sigma
    T[:p, p:2 * p] = -Sigma
    T[:p, 2 * p:3 * p] = np.eye(p)
    T[:p, -1] = lam + e
    T[p:2 * p, :p] = -Sigma
    T[p:2 * p, p:2 * p] = Sigma
    T[p:2 * p, 3 * p:4 * p] = np.eye(p)
    T[p:2 * p, -1] = lam - e
    basis = np.r_[np.arange(2 * p, 3 * p), np.arange(3 * p, 4 * p)]
    A0 = T[:2 * p, :-1].copy()
    b0 = T[:2 * p, -1].copy()

    tab = _Tableau(T, basis, tol)
    allowed = np.ones(nvar, dtype=bool)
    special = p + j
    if T[special, -1] < 0:
        # row reads Sigma_j.(u - v) - s >= 1 - lam; give it an artificial variable
        T[special] *= -1.0
        T[special, art] = 1.0
        A0[special] *= -1.0
        A0[special, art] = 1.0
        b0[special] *= -1.0
        basis[special] = art
        T[-1, :] = -T[special]
        T[-1, art] = 0.0
        tab.run(allowed, max_iter, rule)
        if -T[-1, -1] > 1e-9 * scale:
            raise ClimeColumnError(j, f"infeasible (phase-1 residual {-T[-1, -1]:.3g})")
        if art in basis:
            r = int(np.flatnonzero(basis == art)[0])
            nz = np.flatnonzero(np.abs(T[r, :art]) > tol)
            if nz.size:
                tab.pivot(r, int(nz[0]))
    allowed[art] = False
    T[:, art] = 0.0

    cost = np.zeros(nvar)
    cost[:2 * p] = 1.0
    T[-1, :-1] = cost
    T[-1, -1] = 0.0
    T[-1] -= cost[basis] @ T[:-1]
    final_rule = tab.run(allowed, max_iter, rule)

    x = np.zeros(nvar)
    x[basis] = T[:-1, -1]
    # recompute basic values from the original data to shed accumulated round-off
    try:
        xb = np.linalg.solve(A0[:, basis], b0)
        if np.all(xb >= -1e-9 * scale):
            x[basis] = xb
    except np.linalg.LinAlgError:
        pass
    x = np.maximum(x, 0.0)
    w = x[:p] - x[p:2 * p]
    return w, tab.iterations, final_rule


def clime_column(Sigma, j: int, lam: float, max_iter: Optional[int] = None,
                 rule: str = "dantzig", return_status: bool = False):
    """Solve one CLIME column.

    Parameters
    ----------
    Sigma : (p, p) symmetric array
    j : int
        Column index (0-based).
    lam : float
        Half-width of the feasibility band, ``> 0``.
    rule : {"dantzig", "bland"}
        Entering-variable rule.  ``"bland"`` uses Bland's rule throughout.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    if Sigma.ndim != 2 or Sigma.shape[1] != p:
        raise ValidationError("Sigma must be square")
    if not 0 <= j < p:
        raise ValidationError(f"column index {j} out of range")
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    if rule not in ("dantzig", "bland"):
        raise ValidationError(f"unknown pivot rule {rule!r}")
    if lam >= 1.0:
        w, its, used = np.zeros(p), 0, rule  # w = 0 is feasible and has zero norm
    else:
        try:
            w, its, used = _solve_column_lp(Sigma, j, lam, max_iter or 200 * p + 1000, rule)
        except RuntimeError as exc:
            raise ClimeColumnError(j, str(exc)) from None
    r = Sigma @ w
    r[j] -= 1.0
    gap = float(np.max(np.abs(r)) - lam)
    if gap > FEAS_TOL:
        raise ClimeColumnError(j, f"solution violates the band by {gap:.3g}")
    status = ColumnStatus(its, gap, float(np.abs(w).sum()), used)
    return (w, status) if return_status else w


def symmetrize_min(raw) -> np.ndarray:
    """Keep the smaller-magnitude entry of each ``(i, j)``/``(j, i)`` pair, sign included."""
    raw = np.asarray(raw, dtype=float)
    take = np.abs(raw) <= np.abs(raw.T)
    out = np.where(take, raw, raw.T)
    # exact symmetry even when magnitudes tie with opposite signs
    iu = np.triu_indices_from(out, 1)
    out.T[iu] = out[iu]
    return out


@dataclass(frozen=True)
class ClimeSolution:
    Omega_raw: np.ndarray
    Omega: np.ndarray
    lam: float
    column_status: tuple

    def feasibility(self, Sigma) -> float:
        """``||Sigma Omega_raw - I||_max``."""
        return float(np.max(np.abs(np.asarray(Sigma) @ self.Omega_raw - np.eye(len(Sigma)))))


def clime_solve(Sigma, lam: float, n_jobs: int = 1, rule: str = "dantzig") -> ClimeSolution:
    """Solve every column, then symmetrise by minimum magnitude."""
    Sigma = np.asarray(Sigma, dtype=float)
    p = Sigma.shape[0]
    if np.max(np.abs(Sigma - Sigma.T), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(Sigma))):
        raise ValidationError("Sigma must be symmetric")

    def one(j):
        return clime_column(Sigma, j, lam, rule=rule, return_status=True)

    if n_jobs != 1 and p > 1:
        from joblib import Parallel, delayed

        cols = Parallel(n_jobs=n_jobs, prefer="processes")(delayed(one)(j) for j in range(p))
    else:
        cols = [one(j) for j in range(p)]
    raw = np.column_stack([c[0] for c in cols])
    return ClimeSolution(raw, symmetrize_min(raw), float(lam), tuple(c[1] for c in cols))


# -------------------------------------------------------------------- edges


@dataclass(frozen=True)
class EdgeSet:
    p: int
    edges: tuple  # sorted (i, j) with i < j
    weights: tuple

    @property
    def sparsity(self) -> float:
        total = self.p * (self.p - 1) / 2
        return len(self.edges) / total if total else 0.0

    def __len__(self):
        return len(self.edges)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("i,j,omega_ij\n")
            for (i, j), w in zip(self.edges, self.weights):
                fh.write(f"{i},{j},{w:.17g}\n")


def extract_edges(Omega, mode: str = "nonzero", tol: float = 1e-8,
                  level: Optional[float] = None) -> EdgeSet:
    """Edges of the graph encoded by a symmetric precision matrix.

    ``mode="nonzero"`` keeps pairs with ``|Omega_ij| > tol``;
    ``mode="top_sparsity"`` keeps the ``ceil(level * p(p-1)/2)`` largest
    off-diagonal magnitudes, ties broken by ``(i, j)`` order.
    """
    Omega = np.asarray(Omega, dtype=float)
    p = Omega.shape[0]
    iu, ju = np.triu_indices(p, 1)
    vals = Omega[iu, ju]
    if mode == "nonzero":
        keep = np.flatnonzero(np.abs(vals) > tol)
    elif mode == "top_sparsity":
        if level is None or not 0 < level <= 1:
            raise ValidationError("sparsity level must lie in (0, 1]")
        k = math.ceil(level * p * (p - 1) / 2 - 1e-9)
        order = np.lexsort((ju, iu, -np.abs(vals)))
        keep = np.sort(order[:k])
    else:
        raise ValidationError(f"unknown edge mode {mode!r}")
    edges = tuple((int(iu[k]), int(ju[k])) for k in keep)
    return EdgeSet(p, edges, tuple(float(vals[k]) for k in keep))


# ------------------------------------------------------------------ tuning


def _pd_clip(Omega, floor=1e-8):
    w, V = np.linalg.eigh(0.5 * (Omega + Omega.T))
    return (V * np.maximum(w, floor)) @ V.T, np.sum(np.log(np.maximum(w, floor)))


def likelihood_score(Omega, Sigma_val) -> float:
    """``tr(Sigma_val Omega) - logdet(Omega)`` after clipping eigenvalues at 1e-8."""
    Om, logdet = _pd_clip(Omega)
    return float(np.sum(np.asarray(Sigma_val) * Om) - logdet)


def select_lambda(Sigma, grid: Sequence[float], validation, n_jobs: int = 1,
                  return_scores: bool = False):
    """Pick the grid value whose CLIME estimate on ``Sigma`` best fits ``validation``.

    ``validation`` is a held-out covariance estimate.  The first minimiser
    in ascending-grid order wins.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValidationError("lambda grid is empty")
    scores = {}
    for lam in grid:
        try:
            sol = clime_solve(Sigma, lam, n_jobs=n_jobs)
        except ClimeColumnError:
            continue
        scores[lam] = likelihood_score(sol.Omega, validation)
    if not scores:
        raise ClimeColumnError(-1, "every lambda on the grid failed")
    best = min(scores, key=lambda k: (scores[k], k))
    return (best, scores) if return_scores else best
