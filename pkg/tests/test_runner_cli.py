import csv
import json

import numpy as np
import pytest

from platform_collusion.cli import main
from platform_collusion.config import parse_config
from platform_collusion.qlearn import read_qtable
from platform_collusion.runner import read_records, run_sweep, strip_timing

TINY_LEARNING = {"M": 3, "T_steps": 5000, "K_report": 100, "tail_window": 300}


def tiny_doc(**extra):
    d = {"schema_version": 1, "base_seed": 11, "runs_per_point": 2,
         "market": {"phi": [[0, 0], [0, 0]]}, "learning": dict(TINY_LEARNING)}
    d.update(extra)
    return d


def write(tmp_path, d, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


def records_bytes(directory):
    return [json.dumps(strip_timing(r), sort_keys=True) for r in read_records(directory)]


def test_sweep_outputs_and_counts(tmp_path):
    cfg = parse_config(tiny_doc(save_qdumps=True, sweep={"axis": "delta", "values": [0.05, 0.5]}))
    out = run_sweep(cfg, outdir=tmp_path, workers=1)
    assert out.directory.name == cfg.config_hash()
    assert out.n_points == 2 == out.n_points_ok + out.n_points_rejected + out.n_points_skipped
    recs = read_records(out.directory)
    assert [(r["point_index"], r["run_index"]) for r in recs] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    rec = recs[0]
    assert rec["status"] == "ok" and rec["cycle"]["category"]
    assert "diagnostics" in rec and rec["diagnostics"]["q_loss_all"] >= 0
    q, meta = read_qtable(out.directory / rec["paths"]["qdump_0"])
    assert q.shape == (81, 9) and meta["platform"] == 0
    trace = np.load(out.directory / rec["paths"]["trace"])
    assert trace["delta_trace"].shape == (100, 2)
    with open(out.directory / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and float(rows[0]["ci_lo"]) <= float(rows[0]["mean"]) <= float(rows[0]["ci_hi"])
    manifest = json.loads((out.directory / "manifest.json").read_text())
    assert manifest["n_points"] == 2 and manifest["preset"] == "desk"


def test_common_seed_gives_identical_runs_at_identical_points(tmp_path):
    cfg = parse_config(tiny_doc(runs_per_point=1, sweep={"axis": "beta", "values": [1.0, 1.0]}))
    recs = read_records(run_sweep(cfg, outdir=tmp_path, workers=1).directory)
    assert recs[0]["delta_tilde"] == recs[1]["delta_tilde"]


def test_rerun_and_worker_count_give_identical_records(tmp_path):
    d = tiny_doc(runs_per_point=3, sweep={"axis": "phi-grid", "entries": {"bb": [0.0, 0.5]}})
    cfg = parse_config(d)
    a = records_bytes(run_sweep(cfg, outdir=tmp_path / "a", workers=1).directory)
    b = records_bytes(run_sweep(cfg, outdir=tmp_path / "b", workers=1).directory)
    c = records_bytes(run_sweep(cfg, outdir=tmp_path / "c", workers=3).directory)
    assert a == b == c


def test_unsolvable_point_is_skipped_with_reason(tmp_path):
    # identical competitive and collusive prices cannot span a grid
    cfg = parse_config(tiny_doc(runs_per_point=1, sweep={"axis": "beta", "values": [1.0, 1e-9]}))
    out = run_sweep(cfg, outdir=tmp_path, workers=1)
    recs = read_records(out.directory)
    assert out.n_points == out.n_points_ok + out.n_points_rejected + out.n_points_skipped
    skipped = [r for r in recs if r["status"] == "skipped"]
    assert skipped and all(r["reason"] for r in skipped)


def test_cli_solve_eq(capsys):
    assert main(["solve-eq", "--phi", "0", "0", "0", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    # frozen from the dense-grid oracle in oracles.py
    assert out["p_star_b"] == pytest.approx(1.5989, abs=1e-3)
    assert out["p_coll_s"] == pytest.approx(2.3748, abs=1e-3)
    assert out["pi_coll"] >= out["pi_star"]


def test_cli_missing_field_exits_2(tmp_path, capsys):
    d = tiny_doc()
    del d["market"]["phi"]
    assert main(["run", "--config", write(tmp_path, d), "--quiet"]) == 2
    assert "market.phi" in capsys.readouterr().err


def test_cli_io_errors_exit_4(tmp_path):
    assert main(["analyze", str(tmp_path)]) == 4
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 4


def test_cli_bad_workers_exit_2(tmp_path):
    assert main(["run", "--config", write(tmp_path, tiny_doc()), "--workers", "0"]) == 2


def test_cli_sweep_without_sweep_block_exits_2(tmp_path):
    assert main(["sweep", "--config", write(tmp_path, tiny_doc()), "--quiet"]) == 2


def test_cli_all_points_failed_exits_3(tmp_path):
    d = tiny_doc(runs_per_point=1, sweep={"axis": "beta", "values": [1e-9]})
    assert main(["sweep", "--config", write(tmp_path, d), "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_cli_pipeline(tmp_path, capsys):
    d = tiny_doc(runs_per_point=1, sweep={"axis": "phi-random", "n_samples": 12, "seed": 3})
    d["learning"]["T_steps"] = 2000
    cfg_path = write(tmp_path, d)
    assert main(["sweep", "--config", cfg_path, "--out", str(tmp_path / "res"), "--quiet"]) == 0
    result_dir = capsys.readouterr().out.strip()
    assert main(["analyze", result_dir]) == 0
    capsys.readouterr()
    report = (tmp_path / "res").glob("*/report_p00000.csv")
    assert next(report).read_text().startswith("metric,OneSym")
    assert main(["fit-additive", result_dir, "--bivariate-perms", "2", "--univariate-perms", "2",
                 "--cv-folds", "0"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_samples"] == 12
    assert main(["report", result_dir, "--out", str(tmp_path / "all.csv")]) == 0
    with open(tmp_path / "all.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 and rows[0]["sweep_axis"] == "phi-random"
