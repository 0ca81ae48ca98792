"""Synthetic multi-batch factor data and the benchmark that scores adjustments on it.

Each batch follows ``X = Lambda F' + U`` with a shared categorical
covariate per variable, loadings ``Phi(W) B + Gamma`` (or ``Gamma`` alone
when the covariates carry no information), VAR(1) factors and Gaussian
noise with a sparse precision matrix.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import kstest, norm

from .aggregation import aggregate_sigma, max_norm_diff, pooled_covariance
from .clime import clime_solve
from .data_model import BatchPanel, Dataset
from .errors import NumericalError, ValidationError
from .pca import fit_pca
from .ppca import fit_ppca
from .selection import spec_test
from .sieve import BasisSpec, projection_from_covariates

# Cluster frequencies of a 264-node, 10-cluster layout.
CLUSTER_PROBS = np.array([34, 30, 28, 27, 26, 25, 25, 24, 23, 22]) / 264.0

# Factor strengths (weighted RMS of cluster loadings) of the shipped loading
# models; each batch draws one at random, giving a mix of weakly and
# strongly confounded batches.
LOADING_STRENGTHS = (0.2, 1.5)


def loading_models(strengths=LOADING_STRENGTHS, K: int = 3, probs=None,
                   seed: int = 3) -> np.ndarray:
    """Stack of cluster-level loading matrices, shape ``(len(strengths), J, K)``.

    One base matrix has columns orthogonal under the cluster weights with
    unit weighted root-mean-square; model ``s`` is the base scaled by
    ``strengths[s]``.  Deterministic in ``seed``.
    """
    probs = CLUSTER_PROBS if probs is None else np.asarray(probs, dtype=float)
    if K > probs.size:
        raise ValidationError(f"K={K} exceeds the number of clusters {probs.size}")
    rng = np.random.default_rng(seed)
    root = np.sqrt(probs)[:, None]
    Q, _ = np.linalg.qr(root * rng.standard_normal((probs.size, K)))
    base = Q / root
    return np.array([float(s) * base for s in np.atleast_1d(strengths)])


DEFAULT_A = 0.3 * np.eye(3)
# Innovation covariance giving unit stationary factor variance.
DEFAULT_VAR_NOISE = np.eye(3) - DEFAULT_A @ DEFAULT_A.T

DEFAULT_GAMMA_SD = {"covariate_driven": 0.05, "pure_gamma": 0.3}

REGIMES = ("covariate_driven", "pure_gamma")
METHODS = ("PPCA", "PCA", "no-adjust", "oracle")
SETTINGS = ("case1", "case2", "case3", "case4")


# ------------------------------------------------------------ precision


def block_precision(p0: int = 100, seed: int = 7, degree: float = 2.0,
                    weight: float = 0.3) -> np.ndarray:
    """Sparse ``p0 x p0`` precision: a chain plus random edges of size ``weight``.

    The diagonal is made strictly dominant and the result rescaled so the
    implied covariance has unit diagonal.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng(seed)
    Om = np.zeros((p0, p0))
    for i in range(p0 - 1):
        Om[i, i + 1] = weight * rng.choice([-1.0, 1.0])
    extra = int(degree * p0 / 2) - (p0 - 1)
    added = 0
    while added < extra:
        i, j = sorted(rng.choice(p0, 2, replace=False))
        if Om[i, j] == 0:
            Om[i, j] = weight * rng.choice([-1.0, 1.0])
            added += 1
    Om = Om + Om.T
    Om += np.diag(np.abs(Om).sum(axis=1) + 0.25)
    sd = np.sqrt(np.diag(np.linalg.inv(Om)))
    return Om * np.outer(sd, sd)


def tile_precision(block, p: int) -> np.ndarray:
    """Block-diagonal ``p x p`` matrix built from copies of ``block``; the last copy is truncated."""
    block = np.asarray(block, dtype=float)
    p0 = block.shape[0]
    out = np.zeros((p, p))
    for s in range(0, p, p0):
        e = min(p, s + p0)
        out[s:e, s:e] = block[: e - s, : e - s]
    return out


def default_precision(p: int) -> np.ndarray:
    return tile_precision(block_precision(), p)


# ----------------------------------------------------------------- spec


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic design.

    ``None`` for ``var_coef``, ``var_noise``, ``B``, ``gamma_sd`` or
    ``Omega_true`` selects the shipped default (truncated to ``K`` factors
    and ``p`` variables).  ``B`` is either one ``J x K`` matrix or a stack
    of them; each batch uses one model drawn uniformly from the stack.
    ``noise_scale`` multiplies the noise covariance.
    """

    m: int = 100
    n_i: object = 10
    p: int = 100
    K: int = 3
    regime: str = "covariate_driven"
    covariate_probs: np.ndarray = field(default_factory=lambda: CLUSTER_PROBS.copy())
    var_coef: Optional[np.ndarray] = None
    var_noise: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    gamma_sd: Optional[float] = None
    Omega_true: Optional[np.ndarray] = None
    seed: int = 0
    noise_scale: float = 1.0
    orthonormalize_factors: bool = False
    burn_in: int = 200

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.m < 1 or self.p < 1 or self.K < 0:
            raise ValidationError("need m >= 1, p >= 1 and K >= 0")
        n = self.sample_sizes()
        if min(n) < 1:
            raise ValidationError("every n_i must be positive")
        probs = np.asarray(self.covariate_probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-10:
            raise ValidationError("covariate_probs must be a probability vector")
        J = probs.size
        A, Se, B = self.var_coef_, self.var_noise_, self.B_
        if A.shape != (self.K, self.K) or Se.shape != (self.K, self.K):
            raise ValidationError(f"VAR parameters must be {self.K} x {self.K}")
        if self.K and np.max(np.abs(np.linalg.eigvals(A))) >= 1:
            raise ValidationError("var_coef must have spectral radius < 1")
        if self.K and np.min(np.linalg.eigvalsh(0.5 * (Se + Se.T))) < -1e-12:
            raise ValidationError("var_noise must be positive semidefinite")
        if B.shape[1:] != (J, self.K) or B.shape[0] < 1:
            raise ValidationError(f"B must be {J} x {self.K} or a stack of such matrices, got {B.shape}")
        if self.gamma_sd_ < 0 or self.noise_scale <= 0:
            raise ValidationError("gamma_sd must be >= 0 and noise_scale > 0")
        if self.burn_in < 0:
            raise ValidationError("burn_in must be >= 0")
        if self.Omega_true is not None:
            Om = np.asarray(self.Omega_true, dtype=float)
            if Om.shape != (self.p, self.p) or np.max(np.abs(Om - Om.T)) > 1e-12:
                raise ValidationError(f"Omega_true must be a symmetric {self.p} x {self.p} matrix")
            if np.min(np.linalg.eigvalsh(Om)) < 1e-10:
                raise ValidationError("Omega_true must be positive definite")

    def _default(self, given, full):
        if given is not None:
            return np.asarray(given, dtype=float)
        if self.K > full.shape[1]:
            raise ValidationError(f"shipped defaults cover K <= {full.shape[1]}")
        return full[: full.shape[0] if full.shape[0] != full.shape[1] else self.K, : self.K]

    @property
    def var_coef_(self) -> np.ndarray:
        return self._default(self.var_coef, DEFAULT_A)

    @property
    def var_noise_(self) -> np.ndarray:
        return self._default(self.var_noise, DEFAULT_VAR_NOISE)

    @property
    def B_(self) -> np.ndarray:
        """Loading models as a ``(models, J, K)`` stack."""
        if self.B is None:
            return loading_models(K=self.K, probs=self.covariate_probs)
        B = np.asarray(self.B, dtype=float)
        return B[None] if B.ndim == 2 else B

    @property
    def gamma_sd_(self) -> float:
        return DEFAULT_GAMMA_SD[self.regime] if self.gamma_sd is None else float(self.gamma_sd)

    @property
    def Omega_(self) -> np.ndarray:
        if self.Omega_true is not None:
            return np.asarray(self.Omega_true, dtype=float)
        return default_precision(self.p)

    @property
    def J(self) -> int:
        return int(np.asarray(self.covariate_probs).size)

    def sample_sizes(self) -> list:
        if np.ndim(self.n_i) == 0:
            return [int(self.n_i)] * self.m
        n = [int(v) for v in self.n_i]
        if len(n) != self.m:
            raise ValidationError(f"n_i has {len(n)} entries for m={self.m} batches")
        return n

    def replace(self, **changes) -> "SyntheticSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth behind a generated dataset."""

    W: np.ndarray
    Omega: np.ndarray
    Sigma: np.ndarray
    loadings: tuple
    factors: tuple
    signal: tuple  # Lambda F' per batch
    U: tuple


# ----------------------------------------------------------- generation


def fit_var1(F):
    """Least-squares VAR(1) fit ``f_t = A f_{t-1} + e_t`` on demeaned factors.

    Returns ``(A, Sigma_eps)`` where ``Sigma_eps`` is the residual
    covariance with divisor ``n - 1 - K``.  A nonstationary estimate is
    shrunk to spectral radius 0.98.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    n, K = F.shape
    if n < K + 2:
        raise ValidationError(f"need n >= K + 2 = {K + 2} observations, got {n}")
    F = F - F.mean(axis=0)
    Z, Y = F[:-1], F[1:]
    G = Z.T @ Z
    scale = np.trace(G)
    if scale <= 0 or np.linalg.cond(G) > 1e12:
        raise NumericalError("lagged factor Gram matrix is singular")
    A = np.linalg.solve(G, Z.T @ Y).T
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1:
        A = A * (0.98 / rho)
    R = Y - Z @ A.T
    return A, R.T @ R / (n - 1 - K)


def simulate_var1(A, Sigma_eps, n: int, rng, burn_in: int = 200) -> np.ndarray:
    """``n x K`` draw from a zero-started VAR(1) after ``burn_in`` discarded steps."""
    A = np.asarray(A, dtype=float)
    K = A.shape[0]
    if K == 0:
        return np.zeros((n, 0))
    w, V = np.linalg.eigh(0.5 * (Sigma_eps + np.transpose(Sigma_eps)))
    root = V * np.sqrt(np.clip(w, 0, None))
    eps = rng.standard_normal((burn_in + n, K)) @ root.T
    f = np.zeros(K)
    out = np.empty((n, K))
    for t in range(burn_in + n):
        f = A @ f + eps[t]
        if t >= burn_in:
            out[t - burn_in] = f
    return out


def _orthonormalize(F):
    n = F.shape[0]
    if F.shape[1] == 0:
        return F
    Q, R = np.linalg.qr(F)
    Q = Q * np.sign(np.diag(R))
    return np.sqrt(n) * Q


def indicator_design(W, J: int) -> np.ndarray:
    labels = np.asarray(W, dtype=float).reshape(-1)
    return (labels[:, None] == np.arange(1, J + 1)[None, :]).astype(float)


def generate(spec: SyntheticSpec, rng=None):
    """Draw a dataset from ``spec``.

    The covariate labels (``1..J``) are drawn once and shared by every
    batch.  Returns ``(dataset, truth)``; identical specs give bitwise
    identical output.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    p, K, J = spec.p, spec.K, spec.J
    Omega = spec.Omega_
    Sigma = spec.noise_scale * np.linalg.inv(Omega)
    Sigma = 0.5 * (Sigma + Sigma.T)
    L = np.linalg.cholesky(Sigma)

    W = rng.choice(np.arange(1, J + 1), size=p, p=spec.covariate_probs).astype(float)[:, None]
    Phi = indicator_design(W, J)
    models = spec.B_
    A, Se = spec.var_coef_, spec.var_noise_

    batches, lams, facs, sigs, Us = [], [], [], [], []
    for i, n in enumerate(spec.sample_sizes()):
        B = models[rng.integers(len(models))] if len(models) > 1 else models[0]
        Gamma = spec.gamma_sd_ * rng.standard_normal((p, K))
        Lam = Phi @ B + Gamma if spec.regime == "covariate_driven" else Gamma
        F = simulate_var1(A, Se, n, rng, spec.burn_in)
        if spec.orthonormalize_factors:
            F = _orthonormalize(F)
        U = L @ rng.standard_normal((p, n))
        signal = Lam @ F.T
        batches.append(BatchPanel(f"b{i + 1:04d}", signal + U, W))
        lams.append(Lam)
        facs.append(F)
        sigs.append(signal)
        Us.append(U)
    truth = SyntheticTruth(W, Omega, Sigma, tuple(lams), tuple(facs), tuple(sigs), tuple(Us))
    return Dataset(batches), truth


# ------------------------------------------------------------------ ROC


def _offdiag_support(M, tol):
    iu = np.triu_indices(M.shape[0], 1)
    return np.abs(np.asarray(M)[iu]) > tol


def roc_curve(path, Omega_true, tol: float = 1e-8) -> list:
    """``(fpr, tpr)`` points for a path of ``(lambda, Omega)`` estimates.

    Rates are computed on off-diagonal pairs.  Points are sorted by FPR and
    the TPR is replaced by its running maximum, so the curve is monotone
    even when the path's supports are not nested.
    """
    path = list(path)
    if not path:
        raise ValidationError("path must not be empty")
    truth = _offdiag_support(Omega_true, tol)
    pos, neg = truth.sum(), (~truth).sum()
    pts = []
    for _, Om in path:
        est = _offdiag_support(Om, tol)
        tpr = (est & truth).sum() / pos if pos else 1.0
        fpr = (est & ~truth).sum() / neg if neg else 0.0
        pts.append((float(fpr), float(tpr)))
    pts.sort()
    out, best = [], 0.0
    for f, t in pts:
        best = max(best, t)
        if not out or out[-1] != (f, best):
            out.append((f, best))
    return out


def auc(points) -> float:
    """Trapezoidal area under a ROC curve anchored at ``(0, 0)`` and ``(1, 1)``."""
    pts = sorted([(0.0, 0.0), *[(float(f), float(t)) for f, t in points], (1.0, 1.0)])
    f = np.array([q[0] for q in pts])
    t = np.maximum.accumulate(np.array([q[1] for q in pts]))
    return float(np.sum(np.diff(f) * (t[1:] + t[:-1]) / 2))


# ------------------------------------------------------------ benchmark

_AXES = {"case1": "p", "case2": "m", "case3": "n_i", "case4": "m_n"}
DEFAULT_SWEEPS = {
    "case1": [100, 200, 300, 400, 500, 600],
    "case2": [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000],
    "case3": [10, 20, 30, 40, 50, 60, 70, 80, 90, 100],
    "case4": [20, 40, 60, 80, 100, 120, 140, 160, 180, 200],
}
_CASE_BASE = {
    "case1": dict(m=500, n_i=10, regime="covariate_driven"),
    "case2": dict(n_i=10, p=264, regime="covariate_driven"),
    "case3": dict(m=100, p=264, regime="covariate_driven"),
    "case4": dict(p=264, regime="pure_gamma"),
}


def setting_spec(spec: SyntheticSpec, setting: str, value, scaled: bool = False) -> SyntheticSpec:
    """Spec for one grid point of a setting.

    With ``scaled=True`` only the swept axis (and the regime) is changed,
    so ``m``, ``n_i`` and ``p`` are taken from ``spec``.
    """
    if setting not in SETTINGS:
        raise ValidationError(f"setting must be one of {SETTINGS}")
    changes = {"regime": _CASE_BASE[setting]["regime"]} if scaled else dict(_CASE_BASE[setting])
    axis = _AXES[setting]
    if axis == "m_n":
        changes.update(m=int(value), n_i=int(value))
    else:
        changes[axis] = int(value)
    return spec.replace(**changes)


def _sigma_estimates(dataset, truth, spec, methods):
    K = spec.K
    out = {}
    if "PPCA" in methods:
        ctx = projection_from_covariates(truth.W, BasisSpec("indicator", J=spec.J))
        out["PPCA"] = aggregate_sigma([fit_ppca(b.X, ctx, K, b.id) for b in dataset]).Sigma_hat
    if "PCA" in methods:
        out["PCA"] = aggregate_sigma([fit_pca(b.X, K, b.id) for b in dataset]).Sigma_hat
    if "no-adjust" in methods:
        out["no-adjust"] = pooled_covariance([b.X for b in dataset])
    if "oracle" in methods:
        out["oracle"] = pooled_covariance(truth.U)
    return out


def _omega_path(S, fractions):
    """CLIME estimates at ``lambda = f * max |S_ij|`` (off-diagonal) for each fraction."""
    off = np.abs(S - np.diag(np.diag(S)))
    lam_max = float(off.max()) if off.size else 1.0
    return [(f * lam_max, clime_solve(S, f * lam_max).Omega) for f in fractions]


def _one_replication(spec, setting, value, grid_idx, rep, methods, omega_lambda, roc_fractions):
    ss = np.random.SeedSequence([spec.seed, grid_idx, rep])
    sp = setting_spec(spec, setting, value, scaled=True)
    dataset, truth = generate(sp, np.random.default_rng(ss))
    Sigma_N = pooled_covariance(truth.U)
    res = {}
    for name, S in _sigma_estimates(dataset, truth, sp, methods).items():
        row = {
            "sigma_max_err": max_norm_diff(S, truth.Sigma),
            "sigma_vs_oracle_err": max_norm_diff(S, Sigma_N),
        }
        if omega_lambda is not None:
            Om = clime_solve(S, omega_lambda).Omega
            D = Om - truth.Omega
            row["omega_max_err"] = float(np.max(np.abs(D)))
            row["omega_l1_err"] = float(np.max(np.abs(D).sum(axis=0)))
        roc = None
        if roc_fractions is not None:
            roc = roc_curve(_omega_path(S, roc_fractions), truth.Omega)
            row["auc"] = auc(roc)
        res[name] = (row, roc)
    return res


@dataclass
class BenchResult:
    """Replication means (and raw values) per grid point and method."""

    setting: str
    axis: str
    grid: list
    reps: int
    metrics: dict  # grid value -> method -> metric -> mean
    raw: dict  # grid value -> method -> metric -> list over reps
    roc: dict  # grid value -> method -> list of per-rep curves

    def mean(self, value, method, metric) -> float:
        return self.metrics[value][method][metric]

    def curve(self, method, metric) -> list:
        return [self.metrics[v][method][metric] for v in self.grid]

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "axis": self.axis,
            "grid": list(self.grid),
            "reps": self.reps,
            "metrics": {str(v): self.metrics[v] for v in self.grid},
            "roc": {str(v): {m: [[list(pt) for pt in c] for c in cs]
                             for m, cs in self.roc.get(v, {}).items()} for v in self.grid},
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def tidy_rows(self) -> list:
        return [(v, meth, met, val)
                for v in self.grid
                for meth, mets in self.metrics[v].items()
                for met, val in mets.items()]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid_point", "method", "metric", "value"])
            for v, meth, met, val in self.tidy_rows():
                w.writerow([v, meth, met, repr(float(val))])


def run_benchmark(spec: SyntheticSpec, setting: str, sweep: Optional[Sequence] = None,
                  reps: int = 20, methods: Sequence[str] = METHODS,
                  omega_lambda: Optional[float] = None,
                  roc_fractions: Optional[Sequence[float]] = None,
                  n_jobs: int = 1) -> BenchResult:
    """Monte Carlo comparison of adjustment methods along one setting's axis.

    Every method is run with the true number of factors.  Replication
    ``r`` at grid index ``g`` is seeded by ``SeedSequence([seed, g, r])``,
    so results do not depend on ``n_jobs``.  With ``sweep=None`` the full
    default grid and base sizes of the setting are used; otherwise only the
    swept axis is overridden and the other sizes come from ``spec``.

    ``omega_lambda`` adds CLIME precision errors; ``roc_fractions`` adds a
    ROC curve over ``lambda = f * max|Sigma_hat_ij|`` for each fraction.
    """
    if setting not in SETTINGS:
        raise ValidationError(f"setting must be one of {SETTINGS}")
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValidationError(f"unknown methods {sorted(bad)}")
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    if sweep is None:
        spec = spec.replace(**{k: v for k, v in _CASE_BASE[setting].items() if k != "regime"})
        sweep = DEFAULT_SWEEPS[setting]
    grid = [int(v) for v in sweep]

    jobs = [(g, v, r) for g, v in enumerate(grid) for r in range(reps)]
    args = (tuple(methods), omega_lambda, None if roc_fractions is None else tuple(roc_fractions))
    if n_jobs != 1:
        from joblib import Parallel, delayed

        outs = Parallel(n_jobs=n_jobs)(
            delayed(_one_replication)(spec, setting, v, g, r, *args) for g, v, r in jobs)
    else:
        outs = [_one_replication(spec, setting, v, g, r, *args) for g, v, r in jobs]

    raw = {v: {m: {} for m in methods} for v in grid}
    roc = {v: {m: [] for m in methods} for v in grid} if roc_fractions is not None else {}
    for (g, v, r), res in zip(jobs, outs):
        for m, (row, curve) in res.items():
            for k, val in row.items():
                raw[v][m].setdefault(k, []).append(val)
            if curve is not None:
                roc[v][m].append(curve)
    metrics = {v: {m: {k: float(np.mean(vals)) for k, vals in raw[v][m].items()}
                   for m in methods} for v in grid}
    return BenchResult(setting, _AXES[setting], grid, reps, metrics, raw, roc)


# ------------------------------------------------ specification-test null


@dataclass(frozen=True)
class NullCalibration:
    z: np.ndarray
    size: float  # rejection rate at the nominal level
    level: float
    ks_statistic: float
    ks_pvalue: float

    def to_dict(self) -> dict:
        return {"reps": int(self.z.size), "level": self.level, "size": self.size,
                "ks_statistic": self.ks_statistic, "ks_pvalue": self.ks_pvalue,
                "z_mean": float(self.z.mean()), "z_sd": float(self.z.std(ddof=1))}


def null_calibration(reps: int = 500, p: int = 200, n: int = 50, K: int = 1,
                     level: float = 0.05, seed: int = 0, spec: Optional[SyntheticSpec] = None):
    """Specification-test z-scores on data whose loadings ignore the covariates.

    Each replication draws one pure-``Gamma`` batch and tests it at the true
    ``K`` against the indicator basis of its covariates.
    """
    base = spec if spec is not None else SyntheticSpec(seed=seed)
    base = base.replace(m=1, n_i=n, p=p, K=K, regime="pure_gamma")
    Om = base.Omega_
    base = base.replace(Omega_true=Om)
    z = np.empty(reps)
    for r in range(reps):
        ds, truth = generate(base, np.random.default_rng(np.random.SeedSequence([base.seed, r])))
        ctx = projection_from_covariates(truth.W, BasisSpec("indicator", J=base.J))
        z[r] = spec_test(ds.batches[0].X, ctx, K).z
    size = float(np.mean(norm.sf(z) < level))
    ks = kstest(z, "norm")
    return NullCalibration(z, size, level, float(ks.statistic), float(ks.pvalue))
