"""End-to-end runner: route, adjust, pool, estimate the precision matrix.

The run is split into three stages that communicate only through files in
the output directory, so running them one at a time gives the same bytes
as a single :func:`run_alpha` call:

``adjust``
    per-batch factor count, specification test, FDR routing and factor
    removal; writes ``U/<id>.bin`` and ``adjust.json``.
``aggregate``
    pooled covariance; writes ``sigma.bin`` and ``sigma.json``.
``graph``
    CLIME (with optional lambda selection) and edge extraction; writes
    ``omega.bin``, ``edges.csv`` and ``graph.json``.

Every stage rewrites ``report.json`` from the stage files present, so the
report always reflects the furthest completed stage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clime import clime_solve, extract_edges, select_lambda
from .data_model import BatchPanel, Dataset, load_manifest, load_matrix, save_matrix, validate_dataset
from .errors import AlphaError, ClimeColumnError, MatrixFileError, StageError, ValidationError
from .pca import fit_pca
from .ppca import fit_ppca
from .selection import SelectionConfig, assign_regimes, batch_projection
from .sieve import BasisSpec

FEASIBILITY_SLACK = 1e-8


@dataclass(frozen=True)
class PipelineConfig:
    """Run configuration; every field has a default."""

    basis: BasisSpec = field(default_factory=BasisSpec)
    q: float = 0.01
    K_max: int = 5
    K_max_projected: Optional[int] = None
    lam: Optional[float] = None
    lambda_grid: Optional[tuple] = None
    center: bool = False
    force_regime: dict = field(default_factory=dict)
    fixed_K: dict = field(default_factory=dict)
    edge_mode: str = "nonzero"
    edge_tol: float = 1e-8
    edge_level: Optional[float] = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValidationError("q must lie in (0, 1)")
        if self.K_max < 1:
            raise ValidationError("K_max must be >= 1")
        if self.lam is not None and self.lambda_grid is not None:
            raise ValidationError("give either lambda or lambda_grid, not both")
        if self.lam is not None and not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if self.lambda_grid is not None:
            if not self.lambda_grid or min(self.lambda_grid) <= 0:
                raise ValidationError("lambda_grid must be a non-empty list of positive values")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if self.edge_mode not in ("nonzero", "top_sparsity"):
            raise ValidationError("edge_mode must be 'nonzero' or 'top_sparsity'")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        basis = BasisSpec.from_dict(d.pop("basis", {}))
        if "J" in d:
            basis = dataclasses.replace(basis, J=int(d.pop("J")))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError(f"unknown config keys {unknown}")
        if d.get("lambda_grid") is not None:
            d["lambda_grid"] = tuple(float(v) for v in d["lambda_grid"])
        return cls(basis=basis, **d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["basis"] = self.basis.to_dict()
        out["lambda"] = out.pop("lam")
        if out["lambda_grid"] is not None:
            out["lambda_grid"] = list(out["lambda_grid"])
        return out

    def hash(self) -> str:
        """Digest of every setting that can change the outputs (``threads`` excluded)."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def selection(self) -> SelectionConfig:
        return SelectionConfig(self.basis, self.q, self.K_max, self.K_max_projected,
                               dict(self.force_regime), dict(self.fixed_K))


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise MatrixFileError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    return PipelineConfig.from_dict(raw)


# ---------------------------------------------------------------- helpers


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path, stage):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise StageError(stage, None, MatrixFileError(
            f"missing upstream artifact {os.path.basename(path)}; run the earlier stage first"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError(stage, None, MatrixFileError(f"cannot read {path}: {exc}"))


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _u_path(out, batch_id):
    return os.path.join(out, "U", f"{batch_id}.bin")


def _center(dataset: Dataset) -> Dataset:
    return Dataset([BatchPanel(b.id, b.X - b.X.mean(axis=1, keepdims=True), b.W) for b in dataset])


def write_report(out) -> dict:
    """Assemble ``report.json`` from whichever stage files exist."""
    report = {"status": "incomplete", "stages": []}
    for stage in ("adjust", "sigma", "graph"):
        path = os.path.join(out, f"{stage}.json")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                report[stage] = json.load(fh)
            report["stages"].append(stage)
    adj = report.get("adjust", {})
    for k in ("config", "config_hash", "seed"):
        if k in adj:
            report[k] = adj.pop(k)
    needs_graph = adj and (report.get("config", {}).get("lambda") is not None
                           or report.get("config", {}).get("lambda_grid") is not None)
    done = {"adjust", "sigma"} | ({"graph"} if needs_graph else set())
    if done <= set(report["stages"]):
        report["status"] = "complete"
    failure = os.path.join(out, "failure.json")
    if os.path.exists(failure):
        with open(failure, "r", encoding="utf-8") as fh:
            report["failure"] = json.load(fh)
        report["status"] = "incomplete"
    _write_json(os.path.join(out, "report.json"), report)
    return report


def _record_failure(out, err: StageError):
    _write_json(os.path.join(out, "failure.json"), {
        "stage": err.stage, "batch_id": err.batch_id,
        "error": str(err.cause), "exit_code": err.exit_code,
    })
    write_report(out)


def _guarded(stage, out, fn):
    failure = os.path.join(out, "failure.json")
    if os.path.exists(failure):
        os.remove(failure)
    try:
        return fn()
    except StageError as err:
        _record_failure(out, err)
        raise
    except AlphaError as exc:
        err = StageError(stage, None, exc)
        _record_failure(out, err)
        raise err from exc


# ----------------------------------------------------------------- stages


def adjust(manifest, config: PipelineConfig, out) -> dict:
    """Route each batch to PCA or Projected-PCA and write its adjusted residual."""
    os.makedirs(out, exist_ok=True)
    for stale in ("sigma.json", "graph.json"):
        if os.path.exists(os.path.join(out, stale)):
            os.remove(os.path.join(out, stale))
    return _guarded("adjust", out, lambda: _adjust(manifest, config, out))


def _adjust(manifest, config, out):
    dataset = load_manifest(manifest)
    problems = validate_dataset(dataset)
    if problems:
        raise ValidationError("invalid dataset: " + ", ".join(f"{d!r} {d.detail}" for d in problems))
    if config.center:
        dataset = _center(dataset)
    cache = {}
    projections = []
    for b in dataset:
        try:
            projections.append(batch_projection(b, config.basis, cache))
        except AlphaError as exc:
            raise StageError("adjust", b.id, exc) from exc
    try:
        with ThreadPoolExecutor(config.threads) as ex:
            regimes = assign_regimes(dataset, config.selection(), projections,
                                     ex if config.threads > 1 else None)
    except AlphaError as exc:
        raise StageError("adjust", None, exc) from exc

    def fit(i):
        b, r = dataset.batches[i], regimes[i]
        try:
            if r.regime == "M2":
                f = fit_ppca(b.X, projections[i], r.K, b.id)
            else:
                f = fit_pca(b.X, r.K, b.id)
        except AlphaError as exc:
            raise StageError("adjust", b.id, exc) from exc
        save_matrix(_u_path(out, b.id), f.U, "binary")
        return {"id": b.id, "n": b.n, "K": f.K, "regime": r.regime,
                "U": os.path.relpath(_u_path(out, b.id), out)}

    idx = range(dataset.m)
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            entries = list(ex.map(fit, idx))
    else:
        entries = [fit(i) for i in idx]

    info = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "manifest_sha256": _file_digest(manifest),
        "p": dataset.p,
        "m": dataset.m,
        "N": dataset.N,
        "regime_counts": {k: sum(r.regime == k for r in regimes) for k in ("M1", "M2")},
        "batches": [dict(r.to_dict(), **{"U": e["U"], "n": e["n"]})
                    for r, e in zip(regimes, entries)],
    }
    _write_json(os.path.join(out, "adjust.json"), info)
    write_report(out)
    return info


def _load_residuals(out, adj, stage, which=None):
    mats = []
    for k, b in enumerate(adj["batches"]):
        if which is not None and k not in which:
            continue
        try:
            mats.append((b, load_matrix(os.path.join(out, b["U"]), "binary")))
        except AlphaError as exc:
            raise StageError(stage, b["batch_id"], exc) from exc
    return mats


def _pool(mats):
    p = mats[0][1].shape[0]
    S = np.zeros((p, p))
    N = K = 0
    for b, U in mats:
        S += U @ U.T
        N += U.shape[1]
        K += b["K"]
    if N - K <= 0:
        raise ValidationError(f"degrees of freedom N - sum K = {N} - {K} must be positive")
    S /= N - K
    return 0.5 * (S + S.T), N, K


def aggregate(out) -> dict:
    """Pool the adjusted residuals written by :func:`adjust`."""
    return _guarded("aggregate", out, lambda: _aggregate(out))


def _aggregate(out):
    adj = _read_json(os.path.join(out, "adjust.json"), "aggregate")
    Sigma, N, K = _pool(_load_residuals(out, adj, "aggregate"))
    save_matrix(os.path.join(out, "sigma.bin"), Sigma, "binary")
    info = {
        "N": N, "K_total": K, "divisor": N - K,
        "per_batch": [{"batch_id": b["batch_id"], "n": b["n"], "K": b["K"], "regime": b["regime"]}
                      for b in adj["batches"]],
    }
    _write_json(os.path.join(out, "sigma.json"), info)
    write_report(out)
    return info


def graph(out, config: Optional[PipelineConfig] = None) -> dict:
    """Estimate the precision matrix and its edge set from ``sigma.bin``.

    With a lambda grid, even-position batches form the training estimate
    and odd-position batches the validation estimate.
    """
    return _guarded("graph", out, lambda: _graph(out, config))


def _graph(out, config):
    adj = _read_json(os.path.join(out, "adjust.json"), "graph")
    _read_json(os.path.join(out, "sigma.json"), "graph")
    if config is None:
        config = PipelineConfig.from_dict(adj["config"])
    elif config.hash() != adj["config_hash"]:
        raise ValidationError("config differs from the one used by the adjust stage")
    try:
        Sigma = load_matrix(os.path.join(out, "sigma.bin"), "binary")
    except AlphaError as exc:
        raise StageError("graph", None, exc) from exc

    scores = None
    if config.lambda_grid is not None:
        m = len(adj["batches"])
        if m < 2:
            raise ValidationError("lambda selection needs at least two batches")
        train, _, _ = _pool(_load_residuals(out, adj, "graph", set(range(0, m, 2))))
        val, _, _ = _pool(_load_residuals(out, adj, "graph", set(range(1, m, 2))))
        lam, scores = select_lambda(train, config.lambda_grid, val, n_jobs=config.threads,
                                    return_scores=True)
    elif config.lam is not None:
        lam = config.lam
    else:
        raise ValidationError("graph stage needs lambda or lambda_grid in the config")

    try:
        sol = clime_solve(Sigma, lam, n_jobs=config.threads)
    except ClimeColumnError as exc:
        raise StageError("graph", None, exc) from exc
    gap = sol.feasibility(Sigma)
    if gap > lam + FEASIBILITY_SLACK:
        raise StageError("graph", None, ClimeColumnError(-1, f"feasibility {gap} exceeds lambda"))
    save_matrix(os.path.join(out, "omega.bin"), sol.Omega, "binary")
    edges = extract_edges(sol.Omega, config.edge_mode, config.edge_tol, config.edge_level)
    edges.to_csv(os.path.join(out, "edges.csv"))
    info = {
        "lambda": lam,
        "lambda_scores": None if scores is None else {repr(k): v for k, v in sorted(scores.items())},
        "feasibility_max": gap,
        "n_edges": len(edges),
        "sparsity": edges.sparsity,
    }
    _write_json(os.path.join(out, "graph.json"), info)
    write_report(out)
    return info


def run_alpha(manifest, config: PipelineConfig, out) -> dict:
    """All stages in order; the graph stage runs only when lambda is configured."""
    adjust(manifest, config, out)
    aggregate(out)
    if config.lam is not None or config.lambda_grid is not None:
        graph(out, config)
    return write_report(out)
