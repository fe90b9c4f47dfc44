"""Collusion metrics and bootstrap intervals."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateDenominator, EmptySample, NonConvergence
from .market import EquilibriumPair, MarketParams, solve_shares, solve_shares_batch
from .qlearn import MIN_PROFIT_GAP, GameTables, PriceGrid

DEFAULT_RESAMPLES = 10_000
# cap on the number of resample indices held in memory at once
_BOOTSTRAP_BLOCK = 4_000_000


def _check_gap(pi_star: float, pi_coll: float) -> float:
    gap = pi_coll - pi_star
    if abs(gap) < MIN_PROFIT_GAP:
        raise DegenerateDenominator(f"|pi_coll - pi_star| = {abs(gap):.3e}")
    return gap


def collusive_level(pi_t, pi_star: float, pi_coll: float):
    """Profit gain over the competitive level, normalised by the collusive gap.

    Accepts scalars or arrays for ``pi_t``. Values outside ``[0, 1]`` are
    legitimate: asymmetric play can beat the symmetric collusive profit.
    """
    gap = _check_gap(pi_star, pi_coll)
    out = (np.asarray(pi_t, dtype=float) - pi_star) / gap
    return float(out) if out.ndim == 0 else out


def averaged_delta(prices, eq: EquilibriumPair, params: MarketParams, tol: float = 1e-10) -> float:
    """Mean collusive level of two platforms at an arbitrary price profile."""
    gap = _check_gap(eq.pi_star, eq.pi_coll)
    prices = np.asarray(prices, dtype=float)
    shares = solve_shares(prices, params, tol=tol)
    total = float(np.sum(shares[1:, :] * prices))
    return (total - 2.0 * eq.pi_star) / (2.0 * gap)


def _profile_totals(params: MarketParams, grid: PriceGrid, pairs: np.ndarray, tol: float) -> np.ndarray:
    ap = grid.action_prices()
    prices = np.empty((len(pairs), 2, 2))
    prices[:, 0, :] = ap[pairs[:, 0]]
    prices[:, 1, :] = ap[pairs[:, 1]]
    shares, resid, ok = solve_shares_batch(prices, params, tol=tol)
    if not ok.all():
        raise NonConvergence(100_000, float(resid[~ok].max()))
    return np.einsum("pik,pik->p", shares[:, 1:, :], prices)


def _argmax_lexicographic(values: np.ndarray, pairs: np.ndarray, atol: float) -> int:
    best = values.max()
    cand = np.flatnonzero(values >= best - atol)
    order = np.lexsort((pairs[cand, 1], pairs[cand, 0]))
    return int(cand[order[0]])


def max_averaged_delta(
    params: MarketParams,
    eq: EquilibriumPair,
    grid: PriceGrid,
    prune: bool = True,
    tables: GameTables | None = None,
    tol: float = 1e-10,
    tie_atol: float = 1e-12,
) -> tuple[float, tuple[int, int]]:
    """Largest averaged collusive level over every joint action on the grid.

    Returns ``(value, (a1, a2))`` with flattened action indices. Among
    profiles within ``tie_atol`` of the maximum the lexicographically
    smallest ``(a1, a2)`` wins. With ``prune`` only profiles with
    ``a1 <= a2`` are solved, since swapping the platforms leaves total
    profit unchanged.
    """
    gap = _check_gap(eq.pi_star, eq.pi_coll)
    n = grid.n_actions
    if tables is not None:
        totals = tables.profits.sum(axis=0).reshape(-1)
        a1, a2 = np.divmod(np.arange(n * n), n)
        pairs = np.stack([a1, a2], axis=1)
        if prune:
            keep = a1 <= a2
            pairs, totals = pairs[keep], totals[keep]
    else:
        if prune:
            a1, a2 = np.triu_indices(n)
        else:
            a1, a2 = np.divmod(np.arange(n * n), n)
        pairs = np.stack([a1, a2], axis=1)
        totals = _profile_totals(params, grid, pairs, tol)
    values = (totals - 2.0 * eq.pi_star) / (2.0 * gap)
    k = _argmax_lexicographic(values, pairs, tie_atol)
    return float(values[k]), (int(pairs[k, 0]), int(pairs[k, 1]))


def symmetric_max_averaged_delta(params: MarketParams, eq: EquilibriumPair, grid: PriceGrid,
                                 tol: float = 1e-10) -> float:
    """Maximum over profiles where both platforms play the same action."""
    gap = _check_gap(eq.pi_star, eq.pi_coll)
    a = np.arange(grid.n_actions)
    totals = _profile_totals(params, grid, np.stack([a, a], axis=1), tol)
    return float(((totals - 2.0 * eq.pi_star) / (2.0 * gap)).max())


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------


def bootstrap_means(samples, resamples: int = DEFAULT_RESAMPLES, rng=None) -> np.ndarray:
    """Means of ``resamples`` with-replacement resamples, in draw order."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("bootstrap needs at least one sample")
    rng = np.random.default_rng(rng)
    n = x.size
    out = np.empty(resamples)
    block = max(1, _BOOTSTRAP_BLOCK // n)
    for start in range(0, resamples, block):
        stop = min(start + block, resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        out[start:stop] = x[idx].mean(axis=1)
    return out


def bootstrap_ci(samples, level: float = 0.99, resamples: int = DEFAULT_RESAMPLES, rng=None) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean.

    ``level=0`` gives the degenerate interval ``(m, m)`` where ``m`` is the
    median of the bootstrap means. Constant samples give ``(c, c)``.
    """
    if not 0.0 <= level < 1.0:
        raise ValueError("level must lie in [0, 1)")
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("bootstrap needs at least one sample")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    means = bootstrap_means(x, resamples, rng)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


def bootstrap_lower_bound(samples, level: float = 0.95, resamples: int = DEFAULT_RESAMPLES, rng=None) -> float:
    """One-sided percentile lower bound for the mean."""
    means = bootstrap_means(samples, resamples, rng)
    return float(np.quantile(means, 1.0 - level))


def bootstrap_difference_lower_bound(
    larger, smaller, level: float = 0.95, resamples: int = DEFAULT_RESAMPLES, rng=None
) -> float:
    """One-sided lower bound for ``mean(larger) - mean(smaller)``.

    The two samples are resampled independently from one generator. A
    positive bound supports the claim that ``larger`` has the larger mean.
    """
    rng = np.random.default_rng(rng)
    a = bootstrap_means(larger, resamples, rng)
    b = bootstrap_means(smaller, resamples, rng)
    return float(np.quantile(a - b, 1.0 - level))


# --------------------------------------------------------------------------
# summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CollusionSummary:
    delta_tilde: float
    per_platform: tuple
    denominator: float
    degenerate: bool
    exceeded_one: bool

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(delta_trace, eq: EquilibriumPair) -> CollusionSummary:
    """Collapse a ``(K, n_platforms)`` trace of collusive levels."""
    trace = np.asarray(delta_trace, dtype=float)
    if trace.size == 0:
        raise EmptySample("empty collusive-level trace")
    if trace.ndim == 1:
        trace = trace[:, None]
    gap = eq.pi_coll - eq.pi_star
    per = trace.mean(axis=0)
    return CollusionSummary(
        delta_tilde=float(trace.mean()),
        per_platform=tuple(float(v) for v in per),
        denominator=float(gap),
        degenerate=bool(abs(gap) < MIN_PROFIT_GAP),
        exceeded_one=bool(np.any(per > 1.0)),
    )


__all__ = [
    "DEFAULT_RESAMPLES",
    "CollusionSummary",
    "averaged_delta",
    "bootstrap_ci",
    "bootstrap_difference_lower_bound",
    "bootstrap_lower_bound",
    "bootstrap_means",
    "collusive_level",
    "max_averaged_delta",
    "summarize",
    "symmetric_max_averaged_delta",
]
