import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from platform_collusion import MarketParams, build_tables, make_price_grid, solve_equilibria
from platform_collusion.errors import DegenerateDenominator, EmptySample
from platform_collusion.market import EquilibriumPair, asymmetric_total_profit, platform_profit, symmetric_prices
from platform_collusion.metrics import (
    averaged_delta,
    bootstrap_ci,
    bootstrap_difference_lower_bound,
    bootstrap_lower_bound,
    bootstrap_means,
    collusive_level,
    max_averaged_delta,
    summarize,
    symmetric_max_averaged_delta,
)

from oracles import brute_force_max_average

BASE = MarketParams()


@pytest.fixture(scope="module")
def eq0():
    return solve_equilibria(BASE)


def test_collusive_level_endpoints():
    assert collusive_level(1.0, 1.0, 3.0) == 0.0
    assert collusive_level(3.0, 1.0, 3.0) == 1.0
    assert collusive_level(2.0, 1.0, 3.0) == 0.5
    np.testing.assert_allclose(collusive_level(np.array([1.0, 4.0]), 1.0, 3.0), [0.0, 1.5])


def test_collusive_level_rejects_zero_gap():
    with pytest.raises(DegenerateDenominator):
        collusive_level(1.0, 2.0, 2.0 + 1e-10)


def test_averaged_delta_at_equilibria(eq0):
    assert averaged_delta(symmetric_prices(eq0.p_coll_b, eq0.p_coll_s), eq0, BASE) == pytest.approx(1.0, abs=1e-9)
    assert averaged_delta(symmetric_prices(eq0.p_star_b, eq0.p_star_s), eq0, BASE) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.5, 3.5), min_size=4, max_size=4))
def test_averaged_delta_is_mean_of_platform_levels(prices):
    eq = EquilibriumPair(1.6, 1.6, 2.4, 2.4, 1.2, 1.37)
    p = np.reshape(prices, (2, 2))
    d1 = collusive_level(platform_profit(0, p, BASE), eq.pi_star, eq.pi_coll)
    d2 = collusive_level(platform_profit(1, p, BASE), eq.pi_star, eq.pi_coll)
    assert averaged_delta(p, eq, BASE) == pytest.approx((d1 + d2) / 2, abs=1e-12)


def test_max_matches_brute_force_on_small_grid(eq0):
    grid = make_price_grid(eq0, M=3)
    ap = grid.action_prices()
    ref, ref_arg = brute_force_max_average(lambda p: asymmetric_total_profit(p, BASE), ap, eq0.pi_star, eq0.pi_coll)
    value, arg = max_averaged_delta(BASE, eq0, grid, prune=False)
    assert value == pytest.approx(ref, abs=1e-12)
    assert arg == ref_arg


def test_max_pruning_and_tables_agree(eq0):
    grid = make_price_grid(eq0, M=5)
    full = max_averaged_delta(BASE, eq0, grid, prune=False)
    pruned = max_averaged_delta(BASE, eq0, grid, prune=True)
    from_tables = max_averaged_delta(BASE, eq0, grid, tables=build_tables(BASE, grid))
    assert pruned[0] == pytest.approx(full[0], abs=1e-12)
    assert from_tables[0] == pytest.approx(full[0], abs=1e-12)
    assert pruned[1][0] <= pruned[1][1]


def test_symmetric_max_is_bounded_by_full_max(eq0):
    grid = make_price_grid(eq0, M=5)
    assert symmetric_max_averaged_delta(BASE, eq0, grid) <= max_averaged_delta(BASE, eq0, grid)[0] + 1e-12


def test_bootstrap_constant_and_level_zero():
    assert bootstrap_ci([0.3] * 7) == (0.3, 0.3)
    lo, hi = bootstrap_ci([0.0, 1.0, 2.0, 3.0], level=0.0, rng=1)
    assert lo == hi
    assert lo == pytest.approx(np.median(bootstrap_means([0.0, 1.0, 2.0, 3.0], rng=1)))


def test_bootstrap_rejects_bad_inputs():
    with pytest.raises(EmptySample):
        bootstrap_ci([])
    with pytest.raises(ValueError):
        bootstrap_ci([1.0, 2.0], level=1.0)


def test_bootstrap_is_seeded():
    x = np.random.default_rng(0).normal(size=30)
    assert bootstrap_ci(x, rng=5) == bootstrap_ci(x, rng=5)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=40))
@settings(max_examples=50, deadline=None)
def test_bootstrap_interval_is_ordered_and_inside_sample_range(xs):
    lo, hi = bootstrap_ci(xs, level=0.9, resamples=500, rng=0)
    assert min(xs) - 1e-9 <= lo <= hi <= max(xs) + 1e-9


def test_bootstrap_interval_coverage():
    rng = np.random.default_rng(123)
    hits = 0
    trials = 500
    for _ in range(trials):
        x = rng.standard_normal(10_000)
        lo, hi = bootstrap_ci(x, level=0.99, resamples=1000, rng=rng)
        hits += lo <= 0.0 <= hi
    assert hits / trials >= 0.98


def test_one_sided_bounds():
    rng = np.random.default_rng(0)
    a = rng.normal(1.0, 0.1, 40)
    b = rng.normal(0.0, 0.1, 40)
    assert bootstrap_lower_bound(a, rng=1) > 0.9
    assert bootstrap_difference_lower_bound(a, b, rng=2) > 0.9
    assert bootstrap_difference_lower_bound(b, a, rng=2) < -0.9


def test_summarize_trace():
    eq = EquilibriumPair(1.0, 1.0, 2.0, 2.0, 1.0, 2.0)
    s = summarize(np.array([[0.0, 1.2], [0.0, 1.2]]), eq)
    assert s.delta_tilde == pytest.approx(0.6)
    assert s.per_platform == (0.0, 1.2)
    assert s.exceeded_one and not s.degenerate
    with pytest.raises(EmptySample):
        summarize([], eq)
