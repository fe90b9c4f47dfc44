import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from platform_collusion import LearningConfig, MarketParams, build_tables, make_price_grid, solve_equilibria
from platform_collusion.analysis import (
    CATEGORIES,
    NO_CYCLE,
    REPORT_COLUMNS,
    CycleRecord,
    RunDiagnostics,
    action_distance,
    analyze_run,
    best_response_q,
    build_report,
    category_means,
    classify_cycle,
    deviation_test,
    minimal_period,
    one_step_q,
    q_loss_all_states,
    q_loss_on_path,
    sensitivity_report,
    state_agreement,
)
from platform_collusion.errors import ShapeMismatch, TailTooShort
from platform_collusion.qlearn import RunResult, init_q

from oracles import period_oracle, sequence_best_response

M = 3
N_ACT = M * M
BASE = MarketParams()


@pytest.fixture(scope="module")
def eq0():
    return solve_equilibria(BASE)


@pytest.fixture(scope="module")
def tables(eq0):
    return build_tables(BASE, make_price_grid(eq0, M=M))


def tile(pattern, length=600):
    pattern = np.asarray(pattern, dtype=np.int64)
    reps = -(-length // len(pattern))
    return np.tile(pattern, (reps, 1))[-length:]


# (pattern of joint actions, expected category, expected period)
CYCLE_FIXTURES = [
    ([(4, 4)], "OneSym", 1),
    ([(0, 0)], "OneSym", 1),
    ([(8, 8)], "OneSym", 1),
    ([(4, 5)], "OneAsym", 1),
    ([(0, 8)], "OneAsym", 1),
    ([(7, 2)], "OneAsym", 1),
    ([(1, 1), (2, 2)], "C2_4", 2),
    ([(1, 2), (2, 1)], "C2_4", 2),
    ([(0, 0), (3, 3), (6, 6)], "C2_4", 3),
    ([(0, 1), (1, 2), (2, 3), (3, 4)], "C2_4", 4),
    ([(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)], "C5_8", 5),
    # divisor trap: period 6 built from a 2-pattern and a 3-pattern
    ([(0, 0), (1, 1), (0, 2), (1, 0), (0, 1), (1, 2)], "C5_8", 6),
    ([(5, 5), (5, 5), (6, 6), (5, 5), (5, 5), (7, 7)], "C5_8", 6),
    ([(i, i) for i in range(7)], "C5_8", 7),
    ([(i, 8 - i) for i in range(8)], "C5_8", 8),
    ([(i, i) for i in range(9)], "C9plus", 9),
    ([(i % 9, (i * 2) % 9) for i in range(12)], "C9plus", 12),
    ([(i % 9, 0) for i in range(10)] + [(0, 1), (1, 1)], "C9plus", 12),
    ([(0, 0)] * 5 + [(1, 1)] * 5 + [(2, 2)] * 5, "C9plus", 15),
    ([(3, 3), (3, 3), (3, 4)], "C2_4", 3),
]


@pytest.mark.parametrize("pattern, category, period", CYCLE_FIXTURES)
def test_cycle_fixtures(pattern, category, period):
    rec = classify_cycle(tile(pattern), M, window=600)
    assert rec.category == category
    assert rec.period == period
    assert len(rec.cycle_states) == len({a * N_ACT + b for a, b in pattern})


def test_no_cycle_for_aperiodic_tail():
    rng = np.random.default_rng(0)
    tail = rng.integers(N_ACT, size=(600, 2))
    rec = classify_cycle(tail, M, window=600, max_period=200)
    assert rec.category == NO_CYCLE and rec.period == 0 and not rec.cycle_states


def test_cycle_uses_only_the_window():
    tail = np.concatenate([np.random.default_rng(1).integers(N_ACT, size=(300, 2)), tile([(1, 2)], 300)])
    assert classify_cycle(tail, M, window=300).category == "OneAsym"


def test_cycle_errors():
    with pytest.raises(TailTooShort):
        classify_cycle(np.zeros((10, 2)), M, window=20)
    with pytest.raises(ShapeMismatch):
        classify_cycle(np.zeros((10, 3)), M, window=5)


def test_cycle_record_round_trip():
    rec = classify_cycle(tile([(0, 1), (2, 3)]), M, window=600)
    assert CycleRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec


@settings(max_examples=100)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), st.integers(30, 80))
def test_minimal_period_matches_oracle(pattern, length):
    seq = np.array((pattern * length)[:length])
    assert minimal_period(seq, max_period=length) == period_oracle(list(seq))


def test_best_response_base_case_and_zero_discount(tables):
    rng = np.random.default_rng(0)
    q_opp = rng.normal(size=(N_ACT**2, N_ACT))
    seed = one_step_q(q_opp, tables)
    np.testing.assert_array_equal(best_response_q(q_opp, tables, 0.9, horizon=0), seed)
    np.testing.assert_array_equal(best_response_q(q_opp, tables, 0.0, horizon=7), seed)


@pytest.mark.parametrize("delta", [0.05, 0.9])
def test_best_response_matches_sequence_enumeration(tables, delta):
    rng = np.random.default_rng(3)
    q_opp = rng.normal(size=(N_ACT**2, N_ACT))
    greedy = np.argmax(q_opp, axis=1)
    ref = sequence_best_response(tables.profits[0], greedy, N_ACT, delta, horizon=3)
    np.testing.assert_allclose(best_response_q(q_opp, tables, delta, horizon=3), ref, rtol=0, atol=1e-13)


def test_best_response_for_second_platform_uses_transposed_roles(tables):
    rng = np.random.default_rng(4)
    q_opp = rng.normal(size=(N_ACT**2, N_ACT))
    g = np.argmax(q_opp, axis=1)
    seed = one_step_q(q_opp, tables, player=1)
    for s in (0, 17, 80):
        for a in range(N_ACT):
            assert seed[s, a] == tables.profits[1, g[s], a]


def test_best_response_rejects_wrong_shape(tables):
    with pytest.raises(ShapeMismatch):
        best_response_q(np.zeros((10, 9)), tables, 0.5)


def test_action_distance():
    # actions (0,0) and (2,1) on a 3x3 grid
    assert action_distance(0, 7, 3) == 2
    assert action_distance(0, 7, 3, metric="manhattan") == 3
    assert action_distance(4, 8, 3) == 1


def test_state_agreement_cases():
    q = np.zeros((4, 9))
    q[:, 0] = 1.0
    assert state_agreement(q, q, {0, 1, 2, 3}, M) == 1.0
    far = np.zeros((4, 9))
    far[:, 2] = 1.0  # seller index two steps away
    assert state_agreement(q, far, {0, 1}, M) == 0.0
    near = np.zeros((4, 9))
    near[:, 4] = 1.0
    assert state_agreement(q, near, {0, 1}, M) == 1.0
    with pytest.raises(TailTooShort):
        state_agreement(q, q, set(), M)


def test_category_means_average_over_runs():
    assert category_means([("C2_4", 1.0), ("C2_4", 0.0), ("OneSym", None)]) == {"C2_4": 0.5}


def constant_tables(target_action):
    q = np.zeros((N_ACT**2, N_ACT))
    q[:, target_action] = 1.0
    return q


def test_deviation_returns_to_fixed_point(eq0, tables):
    q = constant_tables(4)
    state = 4 * N_ACT + 4
    assert deviation_test(q, q, eq0, tables.grid, {state}, state, "one")
    assert deviation_test(q, q, eq0, tables.grid, {state}, state, "both")


def test_deviation_fails_when_play_leaves_cycle(eq0, tables):
    q = constant_tables(0)
    cycle = {4 * N_ACT + 4}
    assert not deviation_test(q, q, eq0, tables.grid, cycle, 4 * N_ACT + 4, "one")


def fixed_run(action, q1, q2, tail_len=50):
    tail = np.full((tail_len, 2), action, dtype=np.int64)
    state = action * N_ACT + action
    return RunResult(0.0, np.zeros((1, 2)), tail, (q1, q2), 0, 0, 0.0, "next_state", state,
                     np.zeros((1, 2)), cycle=CycleRecord("OneSym", 1, frozenset({state})))


@pytest.mark.parametrize("tail_len", [50, 20])
def test_on_path_q_loss_closed_form(tables, tail_len):
    q = constant_tables(4)
    run = fixed_run(4, q, q, tail_len)
    delta = 0.3
    q_br = best_response_q(q, tables, delta, horizon=10)
    r = tables.profits[0, 4, 4]
    expected = abs(r * (1 - delta**101) / (1 - delta) - q_br[4 * N_ACT + 4].max())
    assert q_loss_on_path(run, q_br, tables, delta) == pytest.approx(expected, abs=1e-12)


def test_on_path_q_loss_zero_when_reward_is_seed_max(tables):
    q = np.zeros((N_ACT**2, N_ACT))
    q_br = one_step_q(q, tables)
    a = int(np.argmax(q_br[0]))
    q_self = constant_tables(a)
    run = fixed_run(a, q_self, q)
    run.tail_actions[:, 1] = 0
    state = a * N_ACT
    run.cycle = CycleRecord("OneAsym", 1, frozenset({state}))
    q_br = one_step_q(q, tables)
    assert q_loss_on_path(run, q_br, tables, delta=0.0) == pytest.approx(
        abs(tables.profits[0, a, 0] - q_br[state].max()), abs=1e-15)


def test_q_loss_all_states():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(81, 9))
    assert q_loss_all_states(q, q) == 0.0
    assert q_loss_all_states(q, q + 0.25) == pytest.approx(0.25)
    with pytest.raises(ShapeMismatch):
        q_loss_all_states(q, q[:-1])


def test_analyze_run_on_learned_tables(eq0, tables):
    q1, q2 = init_q(tables, 0.05, 0), init_q(tables, 0.05, 1)
    run = fixed_run(4, q1, q2)
    diag = analyze_run(run, tables, eq0, 0.05)
    assert diag.category == "OneSym" and diag.period == 1
    for v in (diag.equilibrium, diag.one_step, diag.back_one, diag.back_both):
        assert 0.0 <= v <= 1.0
    assert diag.q_loss_all >= 0


def test_report_partition_and_empty_report():
    diags = [RunDiagnostics("OneSym", 1, 0.2), RunDiagnostics("C2_4", 2, 0.4), RunDiagnostics("C2_4", 3, 0.6),
             RunDiagnostics(NO_CYCLE, 0, 0.1)]
    report = build_report(diags, 1, {"non_convergence": 1})
    assert sum(report.get("freq", c) for c in REPORT_COLUMNS) == pytest.approx(1.0)
    assert report.get("delta_mean", "C2_4") == pytest.approx(0.5)
    assert report.get("delta_mean", "C9plus") is None
    assert report.to_csv().splitlines()[0] == "metric," + ",".join(REPORT_COLUMNS)
    assert json.loads(report.to_json())["n_rejected"] == 1
    empty = sensitivity_report(BASE, None, 0, LearningConfig())
    assert empty.n_runs == 0 and empty.cells == {}


def test_sensitivity_report_small(eq0, tables):
    cfg = LearningConfig(M=M, T_steps=30_000, K_report=200, tail_window=500)
    report = sensitivity_report(BASE, eq0, 2, cfg, tables=tables)
    assert report.n_runs == 2
    assert sum(report.get("freq", c) for c in REPORT_COLUMNS) == pytest.approx(1.0)
    assert set(report.cells) == set(CATEGORIES) | {NO_CYCLE}
