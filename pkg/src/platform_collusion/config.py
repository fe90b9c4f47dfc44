"""Experiment configuration: parsing, validation, presets and sweep points.

A configuration is one JSON document. Unknown keys are rejected, and every
error names the offending field path.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .market import ExternalityMatrix, MarketParams
from .qlearn import UPDATE_TARGETS, LearningConfig

SCHEMA_VERSION = 1
SWEEP_AXES = ("phi-grid", "phi-random", "beta", "u0", "delta", "rho")
PHI_ENTRIES = ("bb", "bs", "sb", "ss")
DESK_MAX_STEPS = 10_000_000

PRESETS = {
    "desk": {"T_steps": 2_000_000, "runs_per_point": 20, "M": 15},
    "paper": {"T_steps": 500_000_000, "runs_per_point": 100, "M": 15},
}

_MARKET_KEYS = {"n_platforms", "beta_b", "beta_s", "u0_b", "u0_s", "delta", "phi"}
_LEARNING_KEYS = {"alpha", "M", "epsilon", "T_steps", "K_report", "tail_window", "temp0", "lam",
                  "temp_floor", "rho", "update_target"}
_SWEEP_KEYS = {"axis", "values", "range", "entries", "n_samples", "seed", "side"}
_BOOTSTRAP_KEYS = {"level", "resamples"}
_TOP_KEYS = {"schema_version", "name", "market", "learning", "sweep", "runs_per_point", "base_seed",
             "output_dir", "preset", "save_qdumps", "save_traces", "diagnostics", "bootstrap"}
_REQUIRED_TOP = ("schema_version", "market", "base_seed")
_REQUIRED_MARKET = ("phi",)


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _check_keys(block, allowed, path):
    if not isinstance(block, dict):
        _fail(path, "must be an object")
    for key in block:
        if key not in allowed:
            _fail(f"{path}.{key}" if path else key, "unknown key")


def _number(block, key, path, integer=False):
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(f"{path}.{key}", "must be a number")
    if integer and int(v) != v:
        _fail(f"{path}.{key}", "must be an integer")
    return int(v) if integer else float(v)


def _parse_phi(v, path) -> ExternalityMatrix:
    try:
        if isinstance(v, dict):
            _check_keys(v, set(PHI_ENTRIES), path)
            return ExternalityMatrix(*(float(v.get(k, 0.0)) for k in PHI_ENTRIES))
        return ExternalityMatrix.from_array(v)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        _fail(path, f"invalid externality matrix ({exc})")


def _expand_values(block, path) -> list:
    if "values" in block and "range" in block:
        _fail(path, "give either values or range, not both")
    if "values" in block:
        vals = block["values"]
        if not isinstance(vals, list) or not vals:
            _fail(f"{path}.values", "must be a non-empty list")
        return [float(v) for v in vals]
    if "range" in block:
        r = block["range"]
        if not isinstance(r, dict) or set(r) != {"start", "stop", "step"}:
            _fail(f"{path}.range", "must have exactly start, stop and step")
        start, stop, step = (float(r[k]) for k in ("start", "stop", "step"))
        if step <= 0 or stop < start:
            _fail(f"{path}.range", "need step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    _fail(path, "missing values or range")


@dataclass
class SweepSpec:
    axis: str
    points: list = field(default_factory=list)
    raw: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    market: MarketParams
    learning: LearningConfig
    sweep: SweepSpec | None
    runs_per_point: int
    base_seed: int
    output_dir: str = "results"
    preset: str = "desk"
    name: str = ""
    save_qdumps: bool = False
    save_traces: bool = True
    diagnostics: bool = True
    bootstrap_level: float = 0.99
    bootstrap_resamples: int = 10_000
    source: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Resolved configuration, excluding where results are written."""
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "market": market_to_dict(self.market),
            "learning": {k: v for k, v in self.learning.to_dict().items() if k not in ("seed", "delta")},
            "sweep": self.sweep.raw if self.sweep else None,
            "runs_per_point": self.runs_per_point,
            "base_seed": self.base_seed,
            "preset": self.preset,
            "save_qdumps": self.save_qdumps,
            "save_traces": self.save_traces,
            "diagnostics": self.diagnostics,
            "bootstrap": {"level": self.bootstrap_level, "resamples": self.bootstrap_resamples},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def points(self) -> list:
        """Sweep points as coordinate dicts; a config without a sweep has one empty point."""
        return list(self.sweep.points) if self.sweep else [{}]


def market_to_dict(m: MarketParams) -> dict:
    return {
        "n_platforms": m.n_platforms, "beta_b": m.beta_b, "beta_s": m.beta_s,
        "u0_b": m.u0_b, "u0_s": m.u0_s, "delta": m.delta,
        "phi": dict(zip(PHI_ENTRIES, m.phi.as_tuple())),
    }


def apply_point(market: MarketParams, learning: LearningConfig, point: dict):
    """Market and learning parameters at one sweep point."""
    m = market_to_dict(market)
    phi = dict(m["phi"])
    rho = learning.rho
    for key, v in point.items():
        if key.startswith("phi_"):
            phi[key[4:]] = v
        elif key in ("beta_b", "beta_s", "u0_b", "u0_s", "delta"):
            m[key] = v
        elif key == "rho":
            rho = v
        else:
            raise ConfigError(f"unknown sweep coordinate {key!r}")
    m["phi"] = ExternalityMatrix(*(phi[k] for k in PHI_ENTRIES))
    lc = learning.to_dict()
    lc["rho"] = rho
    return MarketParams(**m), LearningConfig(**lc)


def _parse_sweep(block, path="sweep") -> SweepSpec:
    _check_keys(block, _SWEEP_KEYS, path)
    if "axis" not in block:
        _fail(f"{path}.axis", "missing required field")
    axis = block["axis"]
    if axis not in SWEEP_AXES:
        _fail(f"{path}.axis", f"must be one of {SWEEP_AXES}")
    points = []
    if axis == "phi-grid":
        entries = block.get("entries")
        if not isinstance(entries, dict) or not entries:
            _fail(f"{path}.entries", "must map entry names (bb, bs, sb, ss) to value lists")
        names = []
        lists = []
        for k, v in entries.items():
            if k not in PHI_ENTRIES:
                _fail(f"{path}.entries.{k}", "unknown entry")
            names.append(k)
            lists.append(_expand_values(v if isinstance(v, dict) else {"values": v}, f"{path}.entries.{k}"))
        for combo in itertools.product(*lists):
            points.append({f"phi_{n}": float(x) for n, x in zip(names, combo)})
    elif axis == "phi-random":
        if "n_samples" not in block:
            _fail(f"{path}.n_samples", "missing required field")
        n = _number(block, "n_samples", path, integer=True)
        if n < 1:
            _fail(f"{path}.n_samples", "must be at least 1")
        seed = _number(block, "seed", path, integer=True) if "seed" in block else 0
        draws = np.random.default_rng(seed).standard_normal((n, 4))
        points = [{f"phi_{k}": float(v) for k, v in zip(PHI_ENTRIES, row)} for row in draws]
    else:
        vals = _expand_values(block, path)
        if axis in ("beta", "u0"):
            side = block.get("side", "both")
            if side not in ("both", "b", "s"):
                _fail(f"{path}.side", "must be both, b or s")
            sides = ("b", "s") if side == "both" else (side,)
            points = [{f"{axis}_{s}": v for s in sides} for v in vals]
        else:
            points = [{axis: v} for v in vals]
    return SweepSpec(axis=axis, points=points, raw=copy.deepcopy(block))


def parse_config(doc: dict, preset: str | None = None, seed: int | None = None,
                 update_target: str | None = None, require_sweep: bool = False) -> ExperimentConfig:
    """Validate a configuration document and resolve presets and overrides."""
    _check_keys(doc, _TOP_KEYS, "")
    for key in _REQUIRED_TOP:
        if key not in doc:
            _fail(key, "missing required field")
    if doc["schema_version"] != SCHEMA_VERSION:
        _fail("schema_version", f"unsupported version {doc['schema_version']!r}, expected {SCHEMA_VERSION}")
    preset = preset or doc.get("preset", "desk")
    if preset not in PRESETS:
        _fail("preset", f"must be one of {tuple(PRESETS)}")
    defaults = PRESETS[preset]

    market = doc["market"]
    _check_keys(market, _MARKET_KEYS, "market")
    for key in _REQUIRED_MARKET:
        if key not in market:
            _fail(f"market.{key}", "missing required field")
    mk = {k: _number(market, k, "market", integer=(k == "n_platforms")) for k in market if k != "phi"}
    try:
        params = MarketParams(phi=_parse_phi(market["phi"], "market.phi"), **mk)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        _fail("market", str(exc))

    learning = doc.get("learning", {})
    _check_keys(learning, _LEARNING_KEYS, "learning")
    lk = {}
    for k, v in learning.items():
        if k == "update_target":
            lk[k] = v
        elif v is None and k in ("temp0", "lam"):
            lk[k] = None
        else:
            lk[k] = _number(learning, k, "learning", integer=k in ("M", "T_steps", "K_report", "tail_window"))
    lk.setdefault("T_steps", defaults["T_steps"])
    lk.setdefault("M", defaults["M"])
    if update_target is not None:
        lk["update_target"] = update_target.replace("-", "_")
    if lk.get("update_target", "next_state") not in UPDATE_TARGETS:
        _fail("learning.update_target", f"must be one of {UPDATE_TARGETS}")
    if preset == "desk" and lk["T_steps"] > DESK_MAX_STEPS:
        _fail("learning.T_steps", f"desk preset caps T_steps at {DESK_MAX_STEPS}")
    try:
        lcfg = LearningConfig(**lk)
    except ValueError as exc:
        _fail("learning", str(exc))

    runs = doc.get("runs_per_point", defaults["runs_per_point"])
    if isinstance(runs, bool) or not isinstance(runs, int) or runs < 1:
        _fail("runs_per_point", "must be an integer >= 1")
    base_seed = doc["base_seed"] if seed is None else seed
    if isinstance(base_seed, bool) or not isinstance(base_seed, int) or not 0 <= base_seed < 2**64:
        _fail("base_seed", "must be an unsigned 64-bit integer")
    lcfg = LearningConfig(**{**lcfg.to_dict(), "seed": int(base_seed)})

    sweep = None
    if "sweep" in doc and doc["sweep"] is not None:
        sweep = _parse_sweep(doc["sweep"])
    elif require_sweep:
        _fail("sweep", "missing required field")

    boot = doc.get("bootstrap", {})
    _check_keys(boot, _BOOTSTRAP_KEYS, "bootstrap")
    level = float(boot.get("level", 0.99))
    resamples = int(boot.get("resamples", 10_000))
    if not 0 < level < 1 or resamples < 1:
        _fail("bootstrap", "need 0 < level < 1 and resamples >= 1")

    for key in ("save_qdumps", "save_traces", "diagnostics"):
        if key in doc and not isinstance(doc[key], bool):
            _fail(key, "must be true or false")

    return ExperimentConfig(
        market=params,
        learning=lcfg,
        sweep=sweep,
        runs_per_point=int(runs),
        base_seed=int(base_seed),
        output_dir=str(doc.get("output_dir", "results")),
        preset=preset,
        name=str(doc.get("name", "")),
        save_qdumps=bool(doc.get("save_qdumps", False)),
        save_traces=bool(doc.get("save_traces", True)),
        diagnostics=bool(doc.get("diagnostics", True)),
        bootstrap_level=level,
        bootstrap_resamples=resamples,
        source=copy.deepcopy(doc),
    )


def load_config(path, **overrides) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, **overrides)
