"""Tacit collusion between Q-learning platforms in two-sided markets."""

from .errors import (
    CollusionLabError,
    ConfigError,
    DegenerateDenominator,
    DegenerateGrid,
    EmptySample,
    NoEquilibriumFound,
    NonConvergence,
    ShapeMismatch,
    TailTooShort,
    TooFewSamples,
)
from .market import (
    EquilibriumPair,
    ExternalityMatrix,
    MarketParams,
    asymmetric_total_profit,
    platform_profit,
    solve_ce,
    solve_cne,
    solve_equilibria,
    solve_shares,
    total_collusive_profit,
    utilities,
)
from .qlearn import (
    LearningConfig,
    PriceGrid,
    RunResult,
    build_grid,
    build_tables,
    init_q,
    make_price_grid,
    run_simulation,
)

__version__ = "0.1.0"
