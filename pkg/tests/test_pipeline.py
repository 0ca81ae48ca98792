import json
import os

import numpy as np
import pytest

from alpha_het import pipeline
from alpha_het.cli import main
from alpha_het.data_model import load_matrix, save_matrix, write_manifest
from alpha_het.errors import StageError, ValidationError
from alpha_het.pipeline import PipelineConfig, load_config


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--case", "1", "--m", "20", "--n", "10", "--p", "100",
                 "--seed", "3", "--out", str(d)]) == 0
    return d


ARTIFACTS = ("sigma.bin", "omega.bin", "edges.csv", "report.json")


def test_simulate_layout(sim):
    man = json.loads((sim / "manifest.json").read_text())
    assert len(man["batches"]) == 20
    assert load_matrix(sim / man["batches"][0]["X"]).shape == (100, 10)
    assert (sim / "truth" / "omega_true.bin").exists()
    spec = json.loads((sim / "truth" / "spec.json").read_text())
    assert spec["p"] == 100 and spec["regime"] == "covariate_driven"


def test_run_equals_stagewise(sim, tmp_path):
    cfg = _write(tmp_path / "cfg.json", {"lambda": 0.2})
    man = str(sim / "manifest.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", man, "--out", str(a), "--config", cfg]) == 0
    assert main(["adjust", man, "--out", str(b), "--config", cfg]) == 0
    assert main(["aggregate", "--out", str(b)]) == 0
    assert main(["graph", "--out", str(b)]) == 0
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    report = json.loads((a / "report.json").read_text())
    assert report["status"] == "complete"
    assert report["config_hash"] == PipelineConfig(lam=0.2).hash()
    assert report["graph"]["feasibility_max"] <= 0.2 + 1e-8


def test_outputs_do_not_depend_on_threads(sim, tmp_path):
    man = str(sim / "manifest.json")
    cfg = _write(tmp_path / "cfg.json", {"lambda": 0.2})
    assert main(["run", man, "--out", str(tmp_path / "t1"), "--config", cfg]) == 0
    assert main(["run", man, "--out", str(tmp_path / "t3"), "--config", cfg, "--threads", "3"]) == 0
    for name in ("sigma.bin", "omega.bin", "edges.csv"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()


def test_covariate_driven_data_mostly_m2(sim, tmp_path):
    report = pipeline.run_alpha(sim / "manifest.json", PipelineConfig(), tmp_path / "o")
    counts = report["adjust"]["regime_counts"]
    assert counts["M2"] > counts["M1"]
    assert report["status"] == "complete" and "graph" not in report


def test_no_covariates_all_m1(sim, tmp_path):
    man = json.loads((sim / "manifest.json").read_text())
    entries = [{"id": b["id"], "X": str(sim / b["X"])} for b in man["batches"]]
    write_manifest(tmp_path / "m.json", entries)
    info = pipeline.adjust(tmp_path / "m.json", PipelineConfig(), tmp_path / "o")
    assert info["regime_counts"] == {"M1": 20, "M2": 0}
    assert all(b["p_value"] is None for b in info["batches"])


def test_lambda_grid_selection(sim, tmp_path):
    cfg = PipelineConfig(lambda_grid=(0.1, 0.3, 0.6))
    report = pipeline.run_alpha(sim / "manifest.json", cfg, tmp_path / "o")
    g = report["graph"]
    # the training half has N=100 = p, so small lambdas can be infeasible and are skipped
    scores = {float(k): v for k, v in g["lambda_scores"].items()}
    assert set(scores) <= {0.1, 0.3, 0.6}
    assert g["lambda"] == min(scores, key=scores.get)


def test_centering_changes_only_means(sim, tmp_path):
    pipeline.adjust(sim / "manifest.json", PipelineConfig(center=True), tmp_path / "o")
    U = load_matrix(tmp_path / "o" / "U" / "b0001.bin")
    assert np.max(np.abs(U.mean(axis=1))) <= 1e-10


def test_config_roundtrip_and_errors(tmp_path):
    cfg = PipelineConfig.from_dict({"lambda": 0.3, "J": 8, "q": 0.05})
    assert cfg.lam == 0.3 and cfg.basis.J == 8
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == PipelineConfig.from_dict(dict(cfg.to_dict(), threads=4)).hash()
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValidationError):
        PipelineConfig(lam=0.1, lambda_grid=(0.1,))
    with pytest.raises(ValidationError):
        PipelineConfig(q=1.5)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.json")


def test_exit_codes(sim, tmp_path):
    man = str(sim / "manifest.json")
    assert main(["run", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 4
    assert main(["aggregate", "--out", str(tmp_path / "nothing")]) == 4
    bad = _write(tmp_path / "bad.json", {"K_max": 0})
    assert main(["run", man, "--out", str(tmp_path / "o"), "--config", bad]) == 2
    assert main(["run", man, "--out", str(tmp_path / "o"), "--config", str(tmp_path / "x.json")]) == 4
    # graph without a lambda is a configuration problem
    assert main(["adjust", man, "--out", str(tmp_path / "g")]) == 0
    assert main(["aggregate", "--out", str(tmp_path / "g")]) == 0
    assert main(["graph", "--out", str(tmp_path / "g")]) == 2


def test_dimension_mismatch_is_reported(tmp_path):
    rng = np.random.default_rng(0)
    save_matrix(tmp_path / "a.csv", rng.standard_normal((5, 4)))
    save_matrix(tmp_path / "b.csv", rng.standard_normal((6, 4)))
    write_manifest(tmp_path / "m.json", [{"id": "a", "X": "a.csv"}, {"id": "b", "X": "b.csv"}])
    assert main(["adjust", str(tmp_path / "m.json"), "--out", str(tmp_path / "o")]) == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "incomplete"
    assert report["failure"]["stage"] == "adjust"
    assert "DimensionMismatch" in report["failure"]["error"]


def test_stage_error_names_batch(tmp_path):
    rng = np.random.default_rng(1)
    save_matrix(tmp_path / "x.csv", rng.standard_normal((6, 5)))
    save_matrix(tmp_path / "w.csv", np.array([[1, 2, 3, 11, 1, 2]], dtype=float).T)
    write_manifest(tmp_path / "m.json", [{"id": "s7", "X": "x.csv", "W": "w.csv"}])
    with pytest.raises(StageError) as info:
        pipeline.adjust(tmp_path / "m.json", PipelineConfig(), tmp_path / "o")
    assert info.value.stage == "adjust" and info.value.batch_id == "s7"
    failure = json.loads((tmp_path / "o" / "failure.json").read_text())
    assert failure["batch_id"] == "s7"


def test_graph_rejects_other_config(sim, tmp_path):
    out = tmp_path / "o"
    pipeline.adjust(sim / "manifest.json", PipelineConfig(lam=0.2), out)
    pipeline.aggregate(out)
    with pytest.raises(StageError):
        pipeline.graph(out, PipelineConfig(lam=0.3))


def test_rerun_drops_stale_downstream(sim, tmp_path):
    out = tmp_path / "o"
    pipeline.run_alpha(sim / "manifest.json", PipelineConfig(lam=0.2), out)
    pipeline.adjust(sim / "manifest.json", PipelineConfig(lam=0.2), out)
    assert not (out / "sigma.json").exists()
    assert json.loads((out / "report.json").read_text())["status"] == "incomplete"


def test_cli_null_calibration(tmp_path, capsys):
    out = tmp_path / "null.json"
    assert main(["test", "--null-reps", "20", "--p", "60", "--n", "20", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["reps"] == 20 and 0 <= d["size"] <= 1
    assert "size@0.05" in capsys.readouterr().out


def test_cli_bench(tmp_path):
    assert main(["bench", "--case", "3", "--sweep", "10", "20", "--reps", "2", "--m", "3",
                 "--p", "30", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "case3.json").read_text())
    assert res["grid"] == [10, 20]
    assert (tmp_path / "case3.csv").read_text().startswith("grid_point,method,metric,value")


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "alpha_het", "aggregate", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 4 and "missing upstream artifact" in r.stderr
