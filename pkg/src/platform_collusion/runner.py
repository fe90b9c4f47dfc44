"""Seeded sweeps over market parameters, with results persisted to disk.

Layout under ``<output_dir>/<config hash>/``:

* ``records.jsonl``: one record per (point, run), plus one per skipped point
* ``summary.csv``: per point mean collusive level and bootstrap interval
* ``manifest.json``: resolved configuration and point counts
* ``traces/``: tail actions and collusive-level traces per run (``.npz``)
* ``qdumps/``: final Q-tables per run, when enabled

Every job is deterministic in ``(point, run index)``, so results do not
depend on the number of workers or on scheduling order.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .analysis import analyze_run, classify_cycle
from .config import ExperimentConfig, apply_point
from .errors import CollusionLabError
from .market import solve_equilibria
from .metrics import bootstrap_ci
from .qlearn import build_tables, make_price_grid, run_simulation, write_qtable

TIMING_KEY = "timing"
SUMMARY_FIELDS = ("point_index", "coordinates", "status", "reason", "n_runs", "n_ok", "n_rejected",
                  "mean", "ci_lo", "ci_hi", "p_star_b", "p_star_s", "p_coll_b", "p_coll_s",
                  "pi_star", "pi_coll")


@dataclass
class SweepOutcome:
    directory: Path
    n_points: int
    n_points_ok: int
    n_points_rejected: int
    n_points_skipped: int

    @property
    def all_failed(self) -> bool:
        return self.n_points_ok == 0


def _coords_label(point: dict) -> str:
    return ";".join(f"{k}={v!r}" for k, v in point.items())


def _prepare_point(config: ExperimentConfig, index: int, point: dict):
    """Solve equilibria and build profit tables, or return a skip reason."""
    try:
        params, lcfg = apply_point(config.market, config.learning, point)
        eq = solve_equilibria(params)
        tables = build_tables(params, make_price_grid(eq, lcfg.M, lcfg.epsilon))
    except CollusionLabError as exc:
        return None, exc.reason, str(exc)
    except ValueError as exc:
        return None, "invalid_parameters", str(exc)
    return (params, lcfg, eq, tables), None, None


def _run_job(job):
    """Worker body: one simulation and its record; files go to fixed paths."""
    (config, point_index, point, run_index, prepared, outdir) = job
    params, lcfg, eq, tables = prepared
    record = {
        "point_index": point_index,
        "point": point,
        "run_index": run_index,
        "seed": config.base_seed,
        "update_target": lcfg.update_target,
        "preset": config.preset,
    }
    start = time.perf_counter()
    try:
        run = run_simulation(params, eq, lcfg, run_index=run_index, tables=tables)
    except CollusionLabError as exc:
        record.update(status="rejected", reason=exc.reason, message=str(exc))
        record[TIMING_KEY] = {"wall_time": time.perf_counter() - start}
        return record
    cycle = classify_cycle(run.tail_actions, lcfg.M, window=len(run.tail_actions))
    run.cycle = cycle
    per = run.per_platform_delta
    record.update(
        status="ok",
        reason=None,
        delta_tilde=run.delta_tilde,
        per_platform=[float(v) for v in per],
        exceeded_one=bool(np.any(per > 1.0)),
        final_state=run.final_state,
        cycle={"category": cycle.category, "period": cycle.period,
               "states": sorted(int(s) for s in cycle.cycle_states)},
    )
    if config.diagnostics:
        diag = analyze_run(run, tables, eq, lcfg.resolved_delta(params))
        record["diagnostics"] = diag.to_dict()
    stem = f"p{point_index:05d}_r{run_index:05d}"
    paths = {}
    if config.save_traces:
        path = outdir / "traces" / f"{stem}.npz"
        np.savez(path, tail_actions=run.tail_actions, delta_trace=run.delta_trace,
                 tail_profits=run.tail_profits)
        paths["trace"] = str(path.relative_to(outdir))
    if config.save_qdumps:
        for i, q in enumerate(run.q_tables):
            path = outdir / "qdumps" / f"{stem}_q{i}.bin"
            write_qtable(path, q, lcfg.M, platform=i)
            paths[f"qdump_{i}"] = str(path.relative_to(outdir))
    record["paths"] = paths
    record[TIMING_KEY] = {"wall_time": time.perf_counter() - start, "run_wall_time": run.wall_time}
    return record


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def run_sweep(config: ExperimentConfig, outdir=None, workers: int | None = None,
              log=None) -> SweepOutcome:
    """Run every (point, run) job and write records, summary and manifest.

    Points whose equilibria or profit tables cannot be computed are recorded
    as skipped. Runs that fail are recorded as rejected. Nothing aborts the
    sweep.
    """
    workers = workers or default_workers()
    root = Path(outdir or config.output_dir) / config.config_hash()
    for sub in ("traces", "qdumps"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)

    points = config.points()
    records = []
    summaries = []
    for index, point in enumerate(points):
        prepared, reason, message = _prepare_point(config, index, point)
        if prepared is None:
            say(f"point {index} skipped: {reason}")
            records.append({"point_index": index, "point": point, "status": "skipped",
                            "reason": reason, "message": message})
            summaries.append({"point_index": index, "coordinates": _coords_label(point), "status": "skipped",
                              "reason": reason, "n_runs": 0, "n_ok": 0, "n_rejected": 0})
            continue
        jobs = [(config, index, point, r, prepared, root) for r in range(config.runs_per_point)]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                point_records = list(pool.map(_run_job, jobs))
        else:
            point_records = [_run_job(j) for j in jobs]
        point_records.sort(key=lambda r: r["run_index"])
        records.extend(point_records)
        summaries.append(_summarize_point(config, index, point, prepared[2], point_records))
        say(f"point {index}: {summaries[-1]['n_ok']} ok, mean {summaries[-1].get('mean')}")

    _write_jsonl(root / "records.jsonl", records)
    _write_summary(root / "summary.csv", summaries)
    outcome = SweepOutcome(
        directory=root,
        n_points=len(points),
        n_points_ok=sum(s["status"] == "ok" for s in summaries),
        n_points_rejected=sum(s["status"] == "rejected" for s in summaries),
        n_points_skipped=sum(s["status"] == "skipped" for s in summaries),
    )
    manifest = {
        "config_hash": config.config_hash(),
        "config": config.canonical(),
        "sweep_axis": config.sweep.axis if config.sweep else None,
        "update_target": config.learning.update_target,
        "preset": config.preset,
        "n_points": outcome.n_points,
        "n_points_ok": outcome.n_points_ok,
        "n_points_rejected": outcome.n_points_rejected,
        "n_points_skipped": outcome.n_points_skipped,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return outcome


def _summarize_point(config, index, point, eq, point_records) -> dict:
    ok = [r["delta_tilde"] for r in point_records if r["status"] == "ok"]
    row = {"point_index": index, "coordinates": _coords_label(point), "n_runs": len(point_records),
           "n_ok": len(ok), "n_rejected": len(point_records) - len(ok), **eq.to_dict()}
    if ok:
        lo, hi = bootstrap_ci(ok, level=config.bootstrap_level, resamples=config.bootstrap_resamples,
                              rng=np.random.default_rng([config.base_seed, index]))
        row.update(status="ok", reason="", mean=float(np.mean(ok)), ci_lo=lo, ci_hi=hi)
    else:
        reasons = sorted({r["reason"] for r in point_records})
        row.update(status="rejected", reason="|".join(reasons))
    return row


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_summary(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_records(directory) -> list:
    path = Path(directory) / "records.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k != TIMING_KEY}


def run_single(config: ExperimentConfig, outdir=None, workers=None, log=None) -> SweepOutcome:
    """Run the base point of ``config`` only, ignoring any sweep."""
    return run_sweep(replace(config, sweep=None), outdir=outdir, workers=workers, log=log)


__all__ = ["SweepOutcome", "TIMING_KEY", "default_workers", "read_records",
           "run_single", "run_sweep", "strip_timing"]
