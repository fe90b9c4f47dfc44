"""Post-run diagnostics for converged learners.

Classifies the limit cycle a run settles into, audits the learned tables
against a finite-horizon best response computed by backward induction,
checks whether play returns to the cycle after a deviation to competitive
prices, and measures how far learned values are from realised rewards.
Results across runs aggregate into a per-category report.

All greedy choices break ties toward the lowest flattened action index.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CollusionLabError, ShapeMismatch, TailTooShort
from .market import EquilibriumPair
from .qlearn import GameTables, PriceGrid, RunResult, build_tables, make_price_grid, run_simulation

CATEGORIES = ("OneSym", "OneAsym", "C2_4", "C5_8", "C9plus")
NO_CYCLE = "NoCycle"
DEFAULT_WINDOW = 5000
DEFAULT_MAX_PERIOD = 500
DEFAULT_HORIZON = 10
DEVIATION_STEPS = 100
ON_PATH_HORIZON = 100


# --------------------------------------------------------------------------
# cycle classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CycleRecord:
    category: str
    period: int
    cycle_states: frozenset
    cycle_actions: tuple = ()

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "period": self.period,
            "cycle_states": sorted(int(s) for s in self.cycle_states),
            "cycle_actions": [list(map(int, a)) for a in self.cycle_actions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CycleRecord":
        return cls(d["category"], int(d["period"]), frozenset(d["cycle_states"]),
                   tuple(tuple(a) for a in d.get("cycle_actions", ())))


def category_of(period: int, symmetric: bool) -> str:
    if period <= 0:
        return NO_CYCLE
    if period == 1:
        return "OneSym" if symmetric else "OneAsym"
    if period <= 4:
        return "C2_4"
    if period <= 8:
        return "C5_8"
    return "C9plus"


def minimal_period(codes: np.ndarray, max_period: int = DEFAULT_MAX_PERIOD) -> int:
    """Smallest ``p <= max_period`` with ``codes[t] == codes[t + p]`` throughout, else 0."""
    n = len(codes)
    for p in range(1, min(max_period, n - 1) + 1):
        if np.array_equal(codes[p:], codes[:-p]):
            return p
    return 0


def classify_cycle(tail, M: int, window: int = DEFAULT_WINDOW,
                   max_period: int = DEFAULT_MAX_PERIOD) -> CycleRecord:
    """Classify the last ``window`` joint actions of a run.

    ``tail`` is an ``(n, 2)`` array of flattened per-platform actions. The
    cycle states are the states visited during the final period, where a
    state is the joint action just played.
    """
    tail = np.asarray(tail, dtype=np.int64)
    if tail.ndim != 2 or tail.shape[1] != 2:
        raise ShapeMismatch(f"tail must have shape (n, 2), got {tail.shape}")
    if len(tail) < window:
        raise TailTooShort(f"tail has {len(tail)} steps, window is {window}")
    tail = tail[len(tail) - window:]
    n_actions = M * M
    codes = tail[:, 0] * n_actions + tail[:, 1]
    p = minimal_period(codes, max_period)
    if p == 0:
        return CycleRecord(NO_CYCLE, 0, frozenset())
    last = tail[len(tail) - p:]
    symmetric = p == 1 and last[0, 0] == last[0, 1]
    states = frozenset(int(c) for c in codes[len(codes) - p:])
    return CycleRecord(category_of(p, symmetric), p, states, tuple((int(a), int(b)) for a, b in last))


# --------------------------------------------------------------------------
# best-response audit
# --------------------------------------------------------------------------


def greedy_actions(q: np.ndarray) -> np.ndarray:
    return np.argmax(q, axis=1)


def one_step_q(q_opponent: np.ndarray, tables: GameTables, player: int = 0) -> np.ndarray:
    """One-shot payoff of every own action against the opponent's greedy reply.

    Row ``x`` holds ``pi(a, g(x))`` where ``g(x)`` is the opponent's greedy
    action in state ``x``.
    """
    g = greedy_actions(q_opponent)
    if player == 0:
        return np.ascontiguousarray(tables.profits[0][:, g].T)
    return np.ascontiguousarray(tables.profits[1][g, :])


def best_response_q(q_opponent: np.ndarray, tables: GameTables, delta: float,
                    horizon: int = DEFAULT_HORIZON, player: int = 0) -> np.ndarray:
    """Finite-horizon best response to a greedy opponent by backward induction.

    Starts from the one-shot table and applies ``horizon`` Bellman steps in
    which the next state is ``(own action, opponent greedy action)``.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    n = tables.grid.n_actions
    if q_opponent.shape != (n * n, n):
        raise ShapeMismatch(f"opponent table shape {q_opponent.shape} does not match M={tables.M}")
    g = greedy_actions(q_opponent)
    reward = one_step_q(q_opponent, tables, player)
    q = reward.copy()
    for _ in range(horizon):
        v = q.max(axis=1).reshape(n, n)
        cont = v[:, g].T if player == 0 else v[g, :]
        q = reward + delta * cont
    return q


def action_distance(a, b, M: int, metric: str = "chebyshev"):
    """Grid distance between flattened actions (buyer index, seller index)."""
    ab, as_ = np.divmod(np.asarray(a), M)
    bb, bs = np.divmod(np.asarray(b), M)
    db, ds = np.abs(ab - bb), np.abs(as_ - bs)
    if metric == "chebyshev":
        return np.maximum(db, ds)
    if metric == "manhattan":
        return db + ds
    raise ValueError(f"unknown metric {metric!r}")


def state_agreement(q_final: np.ndarray, q_ref: np.ndarray, states, M: int,
                    metric: str = "chebyshev") -> float:
    """Share of ``states`` where the two tables' greedy actions are within one grid step."""
    states = np.asarray(sorted(states), dtype=np.int64)
    if states.size == 0:
        raise TailTooShort("no cycle states to score")
    a = np.argmax(q_final[states], axis=1)
    b = np.argmax(q_ref[states], axis=1)
    return float(np.mean(action_distance(a, b, M, metric) <= 1))


def category_means(scores) -> dict:
    """Average per-run scores within each category.

    ``scores`` is an iterable of ``(category, value)`` pairs; ``None`` values
    are skipped. Categories without any value are absent from the result.
    """
    buckets: dict = {}
    for cat, value in scores:
        if value is None:
            continue
        buckets.setdefault(cat, []).append(value)
    return {cat: float(np.mean(v)) for cat, v in buckets.items()}


def equilibrium_frequency(runs, tables: GameTables, delta: float, horizon: int = DEFAULT_HORIZON,
                          metric: str = "chebyshev") -> dict:
    """Per category, how often the learned greedy action matches the best response."""
    out = []
    for run in runs:
        if run.cycle is None or not run.cycle.cycle_states:
            continue
        q1, q2 = run.q_tables
        br = best_response_q(q2, tables, delta, horizon)
        out.append((run.cycle.category, state_agreement(q1, br, run.cycle.cycle_states, tables.M, metric)))
    return category_means(out)


def one_step_equilibrium_frequency(runs, tables: GameTables, metric: str = "chebyshev") -> dict:
    """As :func:`equilibrium_frequency` but against the one-shot best response."""
    out = []
    for run in runs:
        if run.cycle is None or not run.cycle.cycle_states:
            continue
        q1, q2 = run.q_tables
        ref = one_step_q(q2, tables)
        out.append((run.cycle.category, state_agreement(q1, ref, run.cycle.cycle_states, tables.M, metric)))
    return category_means(out)


# --------------------------------------------------------------------------
# deviation test
# --------------------------------------------------------------------------


def greedy_rollout(q1: np.ndarray, q2: np.ndarray, state: int, steps: int, n_actions: int) -> np.ndarray:
    """Joint greedy actions for ``steps`` steps starting from ``state``."""
    out = np.empty((steps, 2), dtype=np.int64)
    for t in range(steps):
        a1 = int(np.argmax(q1[state]))
        a2 = int(np.argmax(q2[state]))
        out[t] = a1, a2
        state = a1 * n_actions + a2
    return out


def deviation_test(q1: np.ndarray, q2: np.ndarray, eq: EquilibriumPair, grid: PriceGrid,
                   cycle_states, last_state: int, mode: str = "one",
                   steps: int = DEVIATION_STEPS) -> bool:
    """Does greedy play return to the cycle after a deviation to competitive prices?

    Platform 0 (and platform 1 too when ``mode == "both"``) plays the grid
    action nearest the competitive prices; a non-deviator plays its greedy
    action at ``last_state``. After ``steps`` further greedy steps the test
    passes iff the state lies in ``cycle_states``.
    """
    if mode not in ("one", "both"):
        raise ValueError("mode must be 'one' or 'both'")
    n = grid.n_actions
    nash = grid.nearest_action(eq.p_star_b, eq.p_star_s)
    a2 = nash if mode == "both" else int(np.argmax(q2[last_state]))
    state = nash * n + a2
    if steps > 0:
        path = greedy_rollout(q1, q2, state, steps, n)
        state = int(path[-1, 0] * n + path[-1, 1])
    return state in set(int(s) for s in cycle_states)


# --------------------------------------------------------------------------
# Q-loss diagnostics
# --------------------------------------------------------------------------


def q_loss_on_path(run: RunResult, q_br: np.ndarray, tables: GameTables, delta: float,
                   horizon: int = ON_PATH_HORIZON, player: int = 0) -> float:
    """Gap between realised discounted rewards and best-response values on the cycle.

    For each of the first ``|P_s|`` steps of the stored tail, the state is
    the previous joint action and the realised value sums ``horizon + 1``
    discounted rewards. Rewards past the end of the tail come from greedy
    replay of the final tables.
    """
    if run.cycle is None or not run.cycle.cycle_states:
        raise TailTooShort("run has no detected cycle")
    tail = np.asarray(run.tail_actions, dtype=np.int64)
    k = len(run.cycle.cycle_states)
    n = tables.grid.n_actions
    if len(tail) < 2:
        raise TailTooShort("tail must hold at least two steps")
    need = k + horizon + 1
    actions = tail
    if need > len(tail):
        last = int(tail[-1, 0] * n + tail[-1, 1])
        extra = greedy_rollout(run.q_tables[0], run.q_tables[1], last, need - len(tail), n)
        actions = np.concatenate([tail, extra])
    rewards = tables.profits[player][actions[:, 0], actions[:, 1]]
    disc = delta ** np.arange(horizon + 1)
    states = actions[:, 0] * n + actions[:, 1]
    best = q_br.max(axis=1)
    losses = [abs(float(rewards[j:j + horizon + 1] @ disc) - best[states[j - 1]]) for j in range(1, k + 1)]
    return float(np.mean(losses))


def q_loss_all_states(q_final: np.ndarray, q_br: np.ndarray) -> float:
    """Mean absolute gap between the state values of two tables."""
    if q_final.shape != q_br.shape:
        raise ShapeMismatch(f"table shapes differ: {q_final.shape} vs {q_br.shape}")
    return float(np.mean(np.abs(q_final.max(axis=1) - q_br.max(axis=1))))


# --------------------------------------------------------------------------
# per-run diagnostics and the report
# --------------------------------------------------------------------------


@dataclass
class RunDiagnostics:
    category: str
    period: int
    delta_tilde: float
    equilibrium: float | None = None
    one_step: float | None = None
    back_one: float | None = None
    back_both: float | None = None
    q_loss_path: float | None = None
    q_loss_all: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def analyze_run(run: RunResult, tables: GameTables, eq: EquilibriumPair, delta: float,
                horizon: int = DEFAULT_HORIZON, window: int | None = None,
                metric: str = "chebyshev") -> RunDiagnostics:
    """Classify one run and compute every table-based diagnostic for platform 0."""
    M = tables.M
    tail = np.asarray(run.tail_actions)
    if run.cycle is None:
        run.cycle = classify_cycle(tail, M, window=window or len(tail))
    cyc = run.cycle
    diag = RunDiagnostics(cyc.category, cyc.period, float(run.delta_tilde))
    q1, q2 = run.q_tables
    br = best_response_q(q2, tables, delta, horizon)
    diag.q_loss_all = q_loss_all_states(q1, br)
    if not cyc.cycle_states:
        return diag
    n = tables.grid.n_actions
    diag.equilibrium = state_agreement(q1, br, cyc.cycle_states, M, metric)
    diag.one_step = state_agreement(q1, one_step_q(q2, tables), cyc.cycle_states, M, metric)
    last = int(tail[-1, 0] * n + tail[-1, 1])
    diag.back_one = float(deviation_test(q1, q2, eq, tables.grid, cyc.cycle_states, last, "one"))
    diag.back_both = float(deviation_test(q1, q2, eq, tables.grid, cyc.cycle_states, last, "both"))
    diag.q_loss_path = q_loss_on_path(run, br, tables, delta)
    return diag


REPORT_ROWS = (
    ("freq", "Freq."),
    ("delta_mean", "Avg. Delta"),
    ("delta_sd", "Sd. Delta"),
    ("equilibrium", "Freq. Eq."),
    ("one_step", "Freq. one-step Eq."),
    ("back_one", "Freq. Conv. back (one)"),
    ("back_both", "Freq. Conv. back (both)"),
    ("q_loss_path_mean", "Avg. Q loss (on path)"),
    ("q_loss_path_sd", "Sd. Q loss (on path)"),
    ("q_loss_all_mean", "Avg. Q loss (all)"),
    ("q_loss_all_sd", "Sd. Q loss (all)"),
)
REPORT_COLUMNS = CATEGORIES + (NO_CYCLE,)


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=float)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


@dataclass
class SensitivityReport:
    """Per-category summary of a batch of runs. Missing cells are ``None``."""

    cells: dict = field(default_factory=dict)
    n_runs: int = 0
    n_rejected: int = 0
    rejected_reasons: dict = field(default_factory=dict)

    def get(self, row: str, column: str):
        return self.cells.get(column, {}).get(row)

    def to_json(self) -> str:
        return json.dumps({"n_runs": self.n_runs, "n_rejected": self.n_rejected,
                           "rejected_reasons": self.rejected_reasons, "cells": self.cells},
                          indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *REPORT_COLUMNS])
        for key, label in REPORT_ROWS:
            row = [label]
            for col in REPORT_COLUMNS:
                v = self.get(key, col)
                row.append("" if v is None else repr(float(v)))
            w.writerow(row)
        return buf.getvalue()


def build_report(diagnostics, n_rejected: int = 0, rejected_reasons: dict | None = None) -> SensitivityReport:
    diagnostics = list(diagnostics)
    report = SensitivityReport(n_runs=len(diagnostics), n_rejected=n_rejected,
                               rejected_reasons=dict(rejected_reasons or {}))
    if not diagnostics:
        return report
    total = len(diagnostics)
    for col in REPORT_COLUMNS:
        group = [d for d in diagnostics if d.category == col]
        cell = {"freq": len(group) / total}
        if group:
            cell["delta_mean"], cell["delta_sd"] = _mean_sd(d.delta_tilde for d in group)
            for key in ("equilibrium", "one_step", "back_one", "back_both"):
                cell[key] = _mean_sd(getattr(d, key) for d in group)[0]
            cell["q_loss_path_mean"], cell["q_loss_path_sd"] = _mean_sd(d.q_loss_path for d in group)
            cell["q_loss_all_mean"], cell["q_loss_all_sd"] = _mean_sd(d.q_loss_all for d in group)
        report.cells[col] = {k: v for k, v in cell.items() if v is not None}
    return report


def sensitivity_report(params, eq: EquilibriumPair, n_runs: int, cfg, tables: GameTables | None = None,
                       horizon: int = DEFAULT_HORIZON, first_run: int = 0) -> SensitivityReport:
    """Run ``n_runs`` simulations at one market point and summarise them by cycle type.

    Runs that fail are counted as rejected with their reason; each run's
    tables are released once its diagnostics are computed.
    """
    if n_runs <= 0:
        return SensitivityReport()
    if tables is None:
        tables = build_tables(params, make_price_grid(eq, cfg.M, cfg.epsilon))
    delta = cfg.resolved_delta(params)
    diags, reasons = [], {}
    for r in range(first_run, first_run + n_runs):
        try:
            run = run_simulation(params, eq, cfg, run_index=r, tables=tables)
            diags.append(analyze_run(run, tables, eq, delta, horizon))
        except CollusionLabError as exc:
            reasons[exc.reason] = reasons.get(exc.reason, 0) + 1
        run = None
    return build_report(diags, sum(reasons.values()), reasons)
