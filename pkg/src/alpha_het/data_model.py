"""Core containers, validation and file I/O.

Matrices are plain 2-D ``float64`` numpy arrays.  Batches are stored
variables-by-samples (``p x n_i``), which is also the on-disk CSV layout:
one row per variable, one column per sample.

Binary layout: magic ``b"ALPH"``, ``u32`` rows, ``u32`` cols, then
``rows * cols`` little-endian ``f64`` values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    MatrixFileError,
    NonFiniteEntryError,
    NonNumericCellError,
    RaggedRowError,
    ValidationError,
)

MAGIC = b"ALPH"
_HEADER = struct.Struct("<4sII")


def as_matrix(values, name="matrix", allow_empty_cols=False) -> np.ndarray:
    """Return ``values`` as a read-only, finite, 2-D float64 array."""
    a = np.array(values, dtype=np.float64, copy=True)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or (a.shape[1] < 1 and not allow_empty_cols):
        raise ValidationError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        r, c = np.argwhere(~np.isfinite(a))[0]
        raise ValidationError(f"{name} has non-finite entry at ({r + 1}, {c + 1})")
    a.setflags(write=False)
    return a


def _frozen(a):
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BatchPanel:
    """One data source: observations ``X`` (p x n_i) and optional covariates ``W`` (p x d)."""

    id: str
    X: np.ndarray
    W: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "X", as_matrix(self.X, f"X[{self.id}]"))
        if self.W is not None:
            object.__setattr__(self, "W", as_matrix(self.W, f"W[{self.id}]"))

    @property
    def p(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> Optional[int]:
        return None if self.W is None else self.W.shape[1]


@dataclass(frozen=True)
class Dataset:
    batches: tuple

    def __init__(self, batches: Sequence[BatchPanel]):
        object.__setattr__(self, "batches", tuple(batches))
        if not self.batches:
            raise ValidationError("a dataset needs at least one batch")

    @property
    def m(self) -> int:
        return len(self.batches)

    @property
    def N(self) -> int:
        return sum(b.n for b in self.batches)

    @property
    def p(self) -> int:
        return self.batches[0].p

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


@dataclass(frozen=True)
class FactorFit:
    """Result of removing ``K`` latent factors from one batch.

    ``F`` is ``n x K`` with ``F'F / n = I``, ``Lambda`` is ``p x K`` and
    ``U = X - Lambda F'`` is the heterogeneity-adjusted residual.
    """

    method: str  # "PCA" or "PPCA"
    K: int
    F: np.ndarray
    Lambda: np.ndarray
    U: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    batch_id: str = ""

    def __post_init__(self):
        if self.method not in ("PCA", "PPCA"):
            raise ValidationError(f"unknown factor method {self.method!r}")
        for name in ("F", "Lambda", "U", "eigenvalues"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n = self.U.shape[1]
        if self.F.shape != (n, self.K) or self.Lambda.shape != (self.U.shape[0], self.K):
            raise ValidationError("F, Lambda and U shapes disagree with K")
        if self.K:
            if np.max(np.abs(self.F.T @ self.F / n - np.eye(self.K))) > 1e-8:
                raise ValidationError("factors violate F'F/n = I")
            scale = max(1.0, float(np.max(np.abs(self.U))) * n)
            if np.max(np.abs(self.U @ self.F)) > 1e-8 * scale:
                raise ValidationError("residual is not orthogonal to the factors")

    @property
    def n(self) -> int:
        return self.U.shape[1]

    @property
    def p(self) -> int:
        return self.U.shape[0]

    @property
    def regime(self) -> str:
        return "M1" if self.method == "PCA" else "M2"


# ---------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class Diagnostic:
    kind: str
    batch: int  # 1-based position in the dataset
    detail: str = ""

    def __repr__(self):
        return f"{self.kind}(batch={self.batch})"


def validate_dataset(d: Dataset) -> list:
    """Check shared dimensions and per-batch sample counts.

    Returns an empty list when every batch shares ``p`` (and ``d`` when
    covariates are present) and has at least two samples.
    """
    out = []
    p0 = d.batches[0].p
    d0 = next((b.d for b in d.batches if b.W is not None), None)
    for i, b in enumerate(d.batches, start=1):
        if b.p != p0:
            out.append(Diagnostic("DimensionMismatch", i, f"p={b.p}, expected {p0}"))
        if b.n < 2:
            out.append(Diagnostic("InsufficientSamples", i, f"n={b.n}"))
        if b.W is not None:
            if b.W.shape[0] != b.p:
                out.append(
                    Diagnostic("CovariateRowMismatch", i, f"W rows={b.W.shape[0]}, p={b.p}")
                )
            if b.d != d0:
                out.append(Diagnostic("CovariateDimensionMismatch", i, f"d={b.d}, expected {d0}"))
    return out


# ----------------------------------------------------------------------- I/O


def _format_from_path(path) -> str:
    return "binary" if str(path).endswith((".bin", ".alph")) else "csv"


def load_matrix(path, format: Optional[str] = None) -> np.ndarray:
    """Read a matrix from a header-free CSV file or the ``ALPH`` binary format."""
    fmt = format or _format_from_path(path)
    try:
        if fmt == "binary":
            return _load_binary(path)
        if fmt == "csv":
            with open(path, "r", encoding="utf-8") as fh:
                return _parse_csv(fh.read(), path)
    except OSError as exc:
        if isinstance(exc, MatrixFileError):
            raise
        raise MatrixFileError(f"cannot read {path}: {exc}") from exc
    raise ValidationError(f"unknown matrix format {fmt!r}")


def parse_csv(text: str) -> np.ndarray:
    return _parse_csv(text, None)


def _parse_csv(text, path):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MatrixFileError(f"empty matrix file {path or ''}".strip())
    rows = []
    width = None
    for r, line in enumerate(lines, start=1):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise RaggedRowError(r, width, len(cells), path)
        row = []
        for c, cell in enumerate(cells, start=1):
            try:
                v = float(cell.strip())
            except ValueError:
                raise NonNumericCellError(r, c, cell, path) from None
            if not np.isfinite(v):
                raise NonFiniteEntryError(r, c, path)
            row.append(v)
        rows.append(row)
    return as_matrix(rows)


def _load_binary(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise MatrixFileError(f"truncated header in {path}")
        magic, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise MatrixFileError(f"bad magic {magic!r} in {path}")
        payload = fh.read()
    if len(payload) != 8 * rows * cols:
        raise MatrixFileError(
            f"payload of {path} has {len(payload)} bytes, expected {8 * rows * cols}"
        )
    a = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    bad = np.argwhere(~np.isfinite(a))
    if len(bad):
        raise NonFiniteEntryError(int(bad[0][0]) + 1, int(bad[0][1]) + 1, path)
    return as_matrix(a)


def save_matrix(path, a, format: Optional[str] = None) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"can only save 2-D matrices, got shape {a.shape}")
    fmt = format or _format_from_path(path)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        if fmt == "binary":
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        elif fmt == "csv":
            # %.17g round-trips every double exactly
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for row in a:
                    fh.write(",".join("%.17g" % v for v in row) + "\n")
        else:
            raise ValidationError(f"unknown matrix format {fmt!r}")
    except OSError as exc:
        raise MatrixFileError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------------ manifest


def load_manifest(path) -> Dataset:
    """Build a :class:`Dataset` from a JSON manifest.

    The manifest looks like ``{"batches": [{"id": "s1", "X": "s1.csv",
    "W": "w.csv"}, ...]}``; relative paths resolve against the manifest's
    directory.  ``W`` is optional per batch.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise MatrixFileError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MatrixFileError(f"manifest {path} is not valid JSON: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    entries = spec.get("batches") if isinstance(spec, dict) else None
    if not entries:
        raise ValidationError(f"manifest {path} lists no batches")
    cache = {}

    def read(rel):
        full = rel if os.path.isabs(rel) else os.path.join(base, rel)
        if full not in cache:
            cache[full] = load_matrix(full)
        return cache[full]

    batches = []
    for k, e in enumerate(entries):
        if "X" not in e:
            raise ValidationError(f"manifest entry {k} has no X path")
        bid = str(e.get("id", f"batch{k + 1}"))
        W = read(e["W"]) if e.get("W") else None
        batches.append(BatchPanel(bid, read(e["X"]), W))
    ids = [b.id for b in batches]
    if len(set(ids)) != len(ids):
        raise ValidationError("manifest batch ids must be unique")
    return Dataset(batches)


def write_manifest(path, entries) -> None:
    """Write ``entries`` (dicts with id/X/W) as a manifest JSON file."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"batches": list(entries)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
