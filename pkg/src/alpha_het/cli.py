"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 file I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import pipeline
from .data_model import save_matrix, write_manifest
from .errors import AlphaError
from .synthetic import (
    DEFAULT_SWEEPS,
    METHODS,
    SETTINGS,
    SyntheticSpec,
    _CASE_BASE,
    generate,
    null_calibration,
    run_benchmark,
    setting_spec,
)

log = logging.getLogger("alpha_het")


def _config(args):
    cfg = pipeline.load_config(args.config)
    if getattr(args, "threads", None):
        cfg = pipeline.PipelineConfig.from_dict(dict(cfg.to_dict(), threads=args.threads))
    return cfg


def cmd_run(args):
    report = pipeline.run_alpha(args.manifest, _config(args), args.out)
    counts = report["adjust"]["regime_counts"]
    print(f"{report['status']}: M1={counts['M1']} M2={counts['M2']} -> {args.out}")


def cmd_adjust(args):
    info = pipeline.adjust(args.manifest, _config(args), args.out)
    c = info["regime_counts"]
    print(f"adjusted {info['m']} batches: M1={c['M1']} M2={c['M2']}")


def cmd_aggregate(args):
    info = pipeline.aggregate(args.out)
    print(f"pooled N={info['N']} with divisor {info['divisor']}")


def cmd_graph(args):
    cfg = _config(args) if args.config else None
    info = pipeline.graph(args.out, cfg)
    print(f"lambda={info['lambda']:.6g} edges={info['n_edges']} feasibility={info['feasibility_max']:.3g}")


def _case_spec(args):
    setting = f"case{args.case}"
    base = SyntheticSpec(seed=args.seed, orthonormalize_factors=args.orthonormalize)
    spec = setting_spec(base, setting, DEFAULT_SWEEPS[setting][0])
    over = {k: v for k, v in (("m", args.m), ("n_i", args.n), ("p", args.p), ("K", args.K)) if v is not None}
    return spec.replace(**over) if over else spec


def cmd_simulate(args):
    spec = _case_spec(args)
    dataset, truth = generate(spec)
    ext = "bin" if args.format == "binary" else "csv"
    out = args.out
    save_matrix(os.path.join(out, "W.csv"), truth.W, "csv")
    entries = []
    for b in dataset:
        rel = os.path.join("data", f"{b.id}.{ext}")
        save_matrix(os.path.join(out, rel), b.X, args.format)
        entries.append({"id": b.id, "X": rel, "W": "W.csv"})
    write_manifest(os.path.join(out, "manifest.json"), entries)
    save_matrix(os.path.join(out, "truth", "sigma_true.bin"), truth.Sigma, "binary")
    save_matrix(os.path.join(out, "truth", "omega_true.bin"), truth.Omega, "binary")
    meta = {"case": args.case, "m": spec.m, "n_i": spec.n_i, "p": spec.p, "K": spec.K,
            "regime": spec.regime, "gamma_sd": spec.gamma_sd_, "seed": spec.seed,
            "orthonormalize_factors": spec.orthonormalize_factors}
    with open(os.path.join(out, "truth", "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {spec.m} batches (p={spec.p}, regime={spec.regime}) to {out}")


def cmd_test(args):
    res = null_calibration(args.null_reps, p=args.p, n=args.n, K=args.K,
                           level=args.level, seed=args.seed)
    d = res.to_dict()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"reps={d['reps']} size@{args.level:g}={d['size']:.4f} "
          f"KS D={d['ks_statistic']:.4f} p={d['ks_pvalue']:.4f}")


def cmd_bench(args):
    setting = f"case{args.case}"
    spec = SyntheticSpec(seed=args.seed)
    over = {k: v for k, v in (("m", args.m), ("n_i", args.n), ("p", args.p)) if v is not None}
    if over:
        spec = spec.replace(**over)
    sweep = args.sweep
    if sweep is not None and not over:
        spec = spec.replace(**{k: v for k, v in _CASE_BASE[setting].items() if k != "regime"})
    res = run_benchmark(spec, setting, sweep, reps=args.reps, omega_lambda=args.omega_lambda,
                        roc_fractions=args.roc, n_jobs=args.threads)
    os.makedirs(args.out, exist_ok=True)
    res.to_json(os.path.join(args.out, f"{setting}.json"))
    res.to_csv(os.path.join(args.out, f"{setting}.csv"))
    for v in res.grid:
        cells = " ".join(f"{m}={res.mean(v, m, 'sigma_max_err'):.4f}" for m in METHODS)
        print(f"{res.axis}={v}: {cells}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alpha-het", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="JSON run configuration")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("run", help="all stages")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("adjust", help="routing and factor removal")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("aggregate", help="pool adjusted residuals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("graph", help="precision matrix and edges")
    p.add_argument("--out", required=True)
    with_config(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("simulate", help="write a synthetic dataset and manifest")
    p.add_argument("--case", type=int, choices=[1, 2, 3, 4], default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("--orthonormalize", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("test", help="null calibration of the specification test")
    p.add_argument("--null-reps", type=int, default=500)
    p.add_argument("--p", type=int, default=200)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("bench", help="Monte Carlo comparison of adjustment methods")
    p.add_argument("--case", type=int, choices=[1, 2, 3, 4], default=1)
    p.add_argument("--sweep", type=int, nargs="+")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--omega-lambda", type=float)
    p.add_argument("--roc", type=float, nargs="+", help="lambda fractions for ROC curves")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except AlphaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
