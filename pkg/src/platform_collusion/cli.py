"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 every sweep point failed,
4 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .additive import AdditiveModel, write_component_curves
from .config import PRESETS, load_config, market_to_dict
from .errors import CollusionLabError, ConfigError
from .market import ExternalityMatrix, MarketParams, solve_equilibria
from .runner import read_records, run_single, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED, EXIT_IO = 0, 2, 3, 4


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="JSON experiment configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--preset", choices=tuple(PRESETS), default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides base_seed)")
    p.add_argument("--update-target", choices=("next-state", "literal-eq9"), default=None)
    p.add_argument("--quiet", action="store_true")


def _load(args, require_sweep=False):
    return load_config(args.config, preset=args.preset, seed=args.seed,
                       update_target=args.update_target, require_sweep=require_sweep)


def _logger(args):
    return None if args.quiet else (lambda m: print(m, file=sys.stderr))


def cmd_solve_eq(args) -> int:
    if args.config:
        cfg = _load(args)
        params = cfg.market
    else:
        params = MarketParams(beta_b=args.beta_b, beta_s=args.beta_s, u0_b=args.u0_b, u0_s=args.u0_s,
                              delta=args.delta, phi=ExternalityMatrix(*args.phi))
    eq = solve_equilibria(params)
    out = {"market": market_to_dict(params), **eq.to_dict()}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _finish(outcome) -> int:
    print(str(outcome.directory))
    if outcome.all_failed:
        _err(f"all {outcome.n_points} points failed")
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    return _finish(run_single(cfg, outdir=args.out, workers=args.workers, log=_logger(args)))


def cmd_sweep(args) -> int:
    cfg = _load(args, require_sweep=True)
    return _finish(run_sweep(cfg, outdir=args.out, workers=args.workers, log=_logger(args)))


def _records_or_io_error(directory):
    path = Path(directory) / "records.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no records.jsonl in {directory}")
    records = read_records(directory)
    if not records:
        raise FileNotFoundError(f"{path} holds no records")
    return records


def cmd_analyze(args) -> int:
    """Per-point cycle and best-response report from stored run records."""
    records = _records_or_io_error(args.results)
    out = Path(args.out or args.results)
    out.mkdir(parents=True, exist_ok=True)
    by_point: dict = {}
    for rec in records:
        by_point.setdefault(rec["point_index"], []).append(rec)
    for index in sorted(by_point):
        recs = by_point[index]
        diags, reasons = [], {}
        for rec in recs:
            if rec["status"] != "ok":
                reasons[rec["reason"]] = reasons.get(rec["reason"], 0) + 1
                continue
            d = rec.get("diagnostics") or {"category": rec["cycle"]["category"],
                                           "period": rec["cycle"]["period"]}
            diags.append(analysis.RunDiagnostics(**{**d, "delta_tilde": rec["delta_tilde"]}))
        report = analysis.build_report(diags, sum(reasons.values()), reasons)
        (out / f"report_p{index:05d}.csv").write_text(report.to_csv())
        (out / f"report_p{index:05d}.json").write_text(report.to_json() + "\n")
    print(str(out))
    return EXIT_OK


def cmd_fit_additive(args) -> int:
    """Fit the additive model to every successful run of a stored sweep."""
    records = _records_or_io_error(args.results)
    rows, ys = [], []
    for rec in records:
        if rec.get("status") != "ok":
            continue
        phi = rec.get("phi") or rec["point"]
        try:
            rows.append([float(phi[f"phi_{k}"]) for k in ("bb", "bs", "sb", "ss")])
        except KeyError:
            raise ConfigError("fit-additive needs a sweep that varies all four externality entries")
        ys.append(rec["delta_tilde"])
    model = AdditiveModel(n_bivariate_perms=args.bivariate_perms, n_univariate_perms=args.univariate_perms,
                          min_samples_leaf=args.min_samples_leaf, cv_folds=args.cv_folds)
    model.fit(np.asarray(rows), np.asarray(ys))
    out = Path(args.out or Path(args.results) / "additive")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    write_component_curves(model, out)
    print(json.dumps({"delta0": model.delta0_, "n_samples": len(ys), "output": str(out)}))
    return EXIT_OK


def cmd_report(args) -> int:
    """Concatenate sweep summaries into one figure-ready CSV."""
    rows = []
    for directory in args.results:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        with open(d / "summary.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append({"config_hash": manifest["config_hash"], "sweep_axis": manifest["sweep_axis"],
                             "preset": manifest["preset"], "update_target": manifest["update_target"], **row})
    if not rows:
        raise FileNotFoundError("no summary rows found")
    fields = list(rows[0])
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(str(target))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platform-collusion",
                                     description="Q-learning platform pricing experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-eq", help="competitive and collusive equilibrium prices")
    _common(p, config_required=False)
    p.add_argument("--phi", type=float, nargs=4, default=(0.0, 0.0, 0.0, 0.0), metavar=("BB", "BS", "SB", "SS"))
    p.add_argument("--beta-b", type=float, default=1.0)
    p.add_argument("--beta-s", type=float, default=1.0)
    p.add_argument("--u0-b", type=float, default=-2.0)
    p.add_argument("--u0-s", type=float, default=-2.0)
    p.add_argument("--delta", type=float, default=0.05)
    p.set_defaults(func=cmd_solve_eq)

    p = sub.add_parser("run", help="simulate the base point of a configuration")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="simulate every point of a sweep")
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="cycle and best-response report from stored results")
    p.add_argument("results", help="result directory holding records.jsonl")
    p.add_argument("--out", help="report directory (default: the result directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit-additive", help="fit the additive model to a random-externality sweep")
    p.add_argument("results", help="phi-random sweep directory")
    p.add_argument("--out", help="model and curve directory (default: RESULTS/additive)")
    p.add_argument("--univariate-perms", type=int, default=None, help="orders of the four entries (default: all 24)")
    p.add_argument("--bivariate-perms", type=int, default=None, help="orders of the six pairs (default: all 720)")
    p.add_argument("--cv-folds", type=int, default=AdditiveModel().cv_folds,
                   help="folds for per-term tuning; 0 uses fixed settings")
    p.add_argument("--min-samples-leaf", type=int, default=AdditiveModel().min_samples_leaf,
                   help="leaf size when --cv-folds is 0")
    p.set_defaults(func=cmd_fit_additive)

    p = sub.add_parser("report", help="join sweep summaries into one CSV")
    p.add_argument("results", nargs="+", help="sweep directories")
    p.add_argument("--out", required=True, help="joined CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        _err("--workers must be at least 1")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        _err(str(exc))
        return EXIT_IO
    except CollusionLabError as exc:
        _err(f"{exc.reason}: {exc}")
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())
