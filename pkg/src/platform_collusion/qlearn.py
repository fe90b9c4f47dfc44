"""Tabular Q-learning for the repeated two-platform pricing game.

Each platform picks a price pair ``(p_b, p_s)`` from a discrete grid.  The
state seen by both platforms is the joint price profile of the previous
step, so with ``M`` prices per side there are ``M**4`` states and ``M**2``
actions per platform.

Index conventions:

* action ``a = j_b * M + j_s`` for grid indices ``(j_b, j_s)``;
* state ``s = a_1 * M**2 + a_2`` for the platform actions of the previous
  step, equivalently ``((j_b1 * M + j_s1) * M + j_b2) * M + j_s2``.

Q-tables are dense float64 arrays of shape ``(M**4, M**2)`` indexed
``[state, action]``.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import DegenerateDenominator, DegenerateGrid, NonConvergence, ShapeMismatch
from .market import EquilibriumPair, MarketParams, solve_shares_batch

UPDATE_TARGETS = ("next_state", "literal_eq9")

PAPER_STEPS = 500_000_000
PAPER_LAMBDA = 1.0 - 1e-7
TEMP_FLOOR = 1e-6
MIN_PROFIT_GAP = 1e-8


# --------------------------------------------------------------------------
# price grid and index arithmetic
# --------------------------------------------------------------------------


def build_grid(p_star: float, p_coll: float, epsilon: float, M: int) -> np.ndarray:
    """Evenly spaced prices covering ``[min, max]`` of the two equilibria.

    The interval is widened by ``epsilon * |p_coll - p_star|`` on each end.
    Either ordering of ``p_star`` and ``p_coll`` is allowed.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    width = p_coll - p_star
    if abs(width) < MIN_PROFIT_GAP:
        raise DegenerateGrid(f"equilibrium prices coincide ({p_star} vs {p_coll})")
    j = np.arange(M, dtype=float)
    prices = p_star - epsilon * width + j / (M - 1) * (1 + 2 * epsilon) * width
    return np.sort(prices)


@dataclass(frozen=True)
class PriceGrid:
    b: np.ndarray
    s: np.ndarray
    epsilon: float

    @property
    def M(self) -> int:
        return len(self.b)

    @property
    def n_actions(self) -> int:
        return self.M**2

    @property
    def n_states(self) -> int:
        return self.M**4

    def action_prices(self) -> np.ndarray:
        """Price pair of every action, shape ``(M**2, 2)``."""
        jb, js = np.divmod(np.arange(self.n_actions), self.M)
        return np.column_stack([self.b[jb], self.s[js]])

    def nearest_action(self, p_b: float, p_s: float) -> int:
        """Snap a price pair to the grid; ties go to the lower index."""
        jb = int(np.argmin(np.abs(self.b - p_b)))
        js = int(np.argmin(np.abs(self.s - p_s)))
        return flatten_action(jb, js, self.M)


def make_price_grid(eq: EquilibriumPair, M: int = 15, epsilon: float = 0.1) -> PriceGrid:
    return PriceGrid(
        b=build_grid(eq.p_star_b, eq.p_coll_b, epsilon, M),
        s=build_grid(eq.p_star_s, eq.p_coll_s, epsilon, M),
        epsilon=epsilon,
    )


def flatten_action(j_b: int, j_s: int, M: int) -> int:
    return j_b * M + j_s


def unflatten_action(a: int, M: int) -> tuple[int, int]:
    return divmod(int(a), M)


def flatten_state(j_b1: int, j_s1: int, j_b2: int, j_s2: int, M: int) -> int:
    return ((j_b1 * M + j_s1) * M + j_b2) * M + j_s2


def unflatten_state(s: int, M: int) -> tuple[int, int, int, int]:
    a1, a2 = divmod(int(s), M * M)
    return (*divmod(a1, M), *divmod(a2, M))


def state_of(a1, a2, M: int):
    return a1 * M * M + a2


# --------------------------------------------------------------------------
# learning configuration and temperature schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LearningConfig:
    """Q-learning hyper-parameters.

    ``temp0`` and ``lam`` default to the values derived from ``delta`` and
    ``T_steps`` (see :meth:`resolved_temp0` and :meth:`resolved_lambda`).
    ``delta`` defaults to the market discount.
    """

    alpha: float = 0.15
    M: int = 15
    epsilon: float = 0.1
    T_steps: int = 2_000_000
    K_report: int = 1000
    tail_window: int = 5000
    temp0: float | None = None
    lam: float | None = None
    temp_floor: float = TEMP_FLOOR
    rho: float = 0.0
    update_target: str = "next_state"
    seed: int = 0
    delta: float | None = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.T_steps < self.K_report or self.K_report < 1:
            raise ValueError("need T_steps >= K_report >= 1")
        if self.lam is not None and not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.update_target not in UPDATE_TARGETS:
            raise ValueError(f"update_target must be one of {UPDATE_TARGETS}")
        if self.temp_floor <= 0:
            raise ValueError("temp_floor must be positive")

    def resolved_delta(self, params: MarketParams) -> float:
        return params.delta if self.delta is None else self.delta

    def resolved_temp0(self, delta: float) -> float:
        return 1000.0 / (1.0 - delta) if self.temp0 is None else self.temp0

    def resolved_lambda(self) -> float:
        """Decay rate; short runs keep the full-length start/end temperatures."""
        if self.lam is not None:
            return self.lam
        if self.T_steps == PAPER_STEPS:
            return PAPER_LAMBDA
        return math.exp(PAPER_STEPS * math.log1p(-1e-7) / self.T_steps)

    def to_dict(self) -> dict:
        return asdict(self)


def temperature(t: int, temp0: float, lam: float, floor: float = TEMP_FLOOR) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    return max(temp0 * math.exp(t * math.log(lam)), floor)


# --------------------------------------------------------------------------
# profit tables
# --------------------------------------------------------------------------


@dataclass
class GameTables:
    """Profits and penalty terms for every joint action on the grid.

    ``profits[i, a1, a2]`` is platform ``i``'s one-shot profit when the
    platforms play actions ``a1`` and ``a2``; ``penalties`` holds
    ``(p_b - mean p_b)_+ + (p_s - mean p_s)_+`` in the same layout.
    """

    grid: PriceGrid
    profits: np.ndarray
    penalties: np.ndarray
    n_failed: int = 0

    @property
    def M(self) -> int:
        return self.grid.M


def joint_prices(grid: PriceGrid) -> np.ndarray:
    """Price profiles of all joint actions, shape ``(M**4, 2, 2)``."""
    ap = grid.action_prices()
    n = len(ap)
    prices = np.empty((n * n, 2, 2))
    prices[:, 0, :] = np.repeat(ap, n, axis=0)
    prices[:, 1, :] = np.tile(ap, (n, 1))
    return prices


def build_tables(params: MarketParams, grid: PriceGrid, tol: float = 1e-10) -> GameTables:
    if params.n_platforms != 2:
        raise ValueError("the learning loop supports exactly two platforms")
    prices = joint_prices(grid)
    shares, resid, ok = solve_shares_batch(prices, params, tol=tol)
    n_failed = int(np.count_nonzero(~ok))
    if n_failed:
        raise NonConvergence(100_000, float(resid[~ok].max()))
    n = grid.n_actions
    profits = np.einsum("pik,pik->pi", shares[:, 1:, :], prices).T.reshape(2, n, n)
    mean = prices.mean(axis=1, keepdims=True)
    penalties = np.clip(prices - mean, 0.0, None).sum(axis=2).T.reshape(2, n, n)
    return GameTables(grid=grid, profits=np.ascontiguousarray(profits),
                      penalties=np.ascontiguousarray(penalties), n_failed=n_failed)


def init_q(tables: GameTables, delta: float, platform: int) -> np.ndarray:
    """Initial table: the one-shot profit against the opponent's state price, forever."""
    n = tables.grid.n_actions
    if platform == 0:
        # Q[(a1', a2'), a] = pi_0[a, a2'] / (1 - delta)
        block = tables.profits[0].T / (1.0 - delta)
        q = np.broadcast_to(block[None, :, :], (n, n, n))
    elif platform == 1:
        # Q[(a1', a2'), a] = pi_1[a1', a] / (1 - delta)
        block = tables.profits[1] / (1.0 - delta)
        q = np.broadcast_to(block[:, None, :], (n, n, n))
    else:
        raise ValueError("platform must be 0 or 1")
    return np.ascontiguousarray(q).reshape(n * n, n)


# --------------------------------------------------------------------------
# policy and update kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def _sample_row(row, temp, floor, u, buf):
    n = row.shape[0]
    m = row[0]
    for a in range(1, n):
        if row[a] > m:
            m = row[a]
    if temp <= floor:
        count = 0
        for a in range(n):
            if row[a] == m:
                count += 1
        pick = int(u * count)
        if pick >= count:
            pick = count - 1
        for a in range(n):
            if row[a] == m:
                if pick == 0:
                    return a
                pick -= 1
    total = 0.0
    for a in range(n):
        total += math.exp((row[a] - m) / temp)
        buf[a] = total
    target = u * total
    for a in range(n):
        if buf[a] > target:
            return a
    return n - 1


@njit(cache=True)
def _probabilities(row, temp, floor):
    n = row.shape[0]
    out = np.empty(n)
    m = row.max()
    if temp <= floor:
        count = 0
        for a in range(n):
            out[a] = 1.0 if row[a] == m else 0.0
            count += out[a] == 1.0
        return out / count
    for a in range(n):
        out[a] = math.exp((row[a] - m) / temp)
    return out / out.sum()


@njit(cache=True)
def _update(q, s, a, reward, s_next, alpha, delta):
    row = q[s_next]
    best = row[0]
    for j in range(1, row.shape[0]):
        if row[j] > best:
            best = row[j]
    q[s, a] = (1.0 - alpha) * q[s, a] + alpha * (reward + delta * best)


@njit(cache=True)
def _run_steps(q1, q2, profits, penalties, rho, alpha, delta, literal,
               temp0, log_lam, floor, t_start, state, u,
               tail_start, tail_actions, report_start, report_profits):
    n_act = q1.shape[1]
    buf = np.empty(n_act)
    for j in range(u.shape[0]):
        t = t_start + j
        temp = temp0 * math.exp(t * log_lam)
        if temp < floor:
            temp = floor
        a1 = _sample_row(q1[state], temp, floor, u[j, 0], buf)
        a2 = _sample_row(q2[state], temp, floor, u[j, 1], buf)
        nxt = a1 * n_act + a2
        r1 = profits[0, a1, a2]
        r2 = profits[1, a1, a2]
        if rho != 0.0:
            r1 = r1 - rho * penalties[0, a1, a2]
            r2 = r2 - rho * penalties[1, a1, a2]
        tgt = state if literal else nxt
        _update(q1, state, a1, r1, tgt, alpha, delta)
        _update(q2, state, a2, r2, tgt, alpha, delta)
        if t >= tail_start:
            tail_actions[t - tail_start, 0] = a1
            tail_actions[t - tail_start, 1] = a2
        if t >= report_start:
            report_profits[t - report_start, 0] = profits[0, a1, a2]
            report_profits[t - report_start, 1] = profits[1, a1, a2]
        state = nxt
    return state


def boltzmann_probabilities(q: np.ndarray, s: int, temp: float, floor: float = TEMP_FLOOR) -> np.ndarray:
    return _probabilities(np.ascontiguousarray(q[s], dtype=float), float(temp), float(floor))


def boltzmann_sample(q: np.ndarray, s: int, temp: float, rng: np.random.Generator,
                     floor: float = TEMP_FLOOR) -> int:
    """Draw an action from the softmax of ``q[s] / temp``.

    At or below ``floor`` the draw is uniform over the maximising actions.
    """
    if temp <= 0:
        raise ValueError("temperature must be positive")
    row = np.ascontiguousarray(q[s], dtype=float)
    return int(_sample_row(row, float(temp), float(floor), rng.random(), np.empty(len(row))))


def q_update(q: np.ndarray, s: int, a: int, reward: float, s_next: int,
             alpha: float, delta: float, target: str = "next_state") -> None:
    """In-place Q-learning step on ``q[s, a]``.

    ``target="literal_eq9"`` bootstraps from the current state's row
    instead of the successor's.
    """
    if target not in UPDATE_TARGETS:
        raise ValueError(f"target must be one of {UPDATE_TARGETS}")
    tgt = s if target == "literal_eq9" else s_next
    _update(q, s, a, float(reward), tgt, float(alpha), float(delta))


def price_penalty(own_prices, mean_prices) -> float:
    """``(p_b - mean_b)_+ + (p_s - mean_s)_+``."""
    own = np.asarray(own_prices, dtype=float)
    mean = np.asarray(mean_prices, dtype=float)
    return float(np.clip(own - mean, 0.0, None).sum())


def q_update_penalized(q: np.ndarray, s: int, a: int, reward: float, s_next: int,
                       alpha: float, delta: float, own_prices, mean_prices, rho: float,
                       target: str = "next_state") -> None:
    """Q-learning step with the reward reduced by ``rho`` times the price penalty."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho != 0.0:
        reward = reward - rho * price_penalty(own_prices, mean_prices)
    q_update(q, s, a, reward, s_next, alpha, delta, target)


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    delta_tilde: float
    delta_trace: np.ndarray
    tail_actions: np.ndarray
    q_tables: tuple
    seed: int
    run_index: int
    wall_time: float
    update_target: str
    final_state: int
    tail_profits: np.ndarray
    cycle: object = None
    meta: dict = field(default_factory=dict)

    @property
    def per_platform_delta(self) -> np.ndarray:
        return self.delta_trace.mean(axis=0)


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, run_index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(run_index)])))


def run_simulation(
    params: MarketParams,
    eq: EquilibriumPair,
    cfg: LearningConfig,
    run_index: int = 0,
    tables: GameTables | None = None,
    chunk: int = 1 << 18,
) -> RunResult:
    """Play the repeated game for ``cfg.T_steps`` steps and report collusion.

    ``tables`` may be shared between runs at the same market point.
    """
    start = time.perf_counter()
    gap = eq.pi_coll - eq.pi_star
    if abs(gap) < MIN_PROFIT_GAP:
        raise DegenerateDenominator(f"|pi_coll - pi_star| = {abs(gap):.3e}")
    if tables is None:
        tables = build_tables(params, make_price_grid(eq, cfg.M, cfg.epsilon))
    if tables.M != cfg.M:
        raise ShapeMismatch(f"tables built for M={tables.M}, config has M={cfg.M}")
    delta = cfg.resolved_delta(params)
    q1 = init_q(tables, delta, 0)
    q2 = init_q(tables, delta, 1)

    rng = run_rng(cfg.seed, run_index)
    state = int(rng.integers(tables.grid.n_states))
    T = cfg.T_steps
    window = min(cfg.tail_window, T)
    tail_actions = np.zeros((window, 2), dtype=np.int64)
    report_profits = np.zeros((cfg.K_report, 2))
    temp0 = cfg.resolved_temp0(delta)
    log_lam = math.log(cfg.resolved_lambda())
    literal = cfg.update_target == "literal_eq9"

    t = 0
    while t < T:
        n = min(chunk, T - t)
        u = rng.random((n, 2))
        state = _run_steps(
            q1, q2, tables.profits, tables.penalties, float(cfg.rho), float(cfg.alpha),
            float(delta), literal, float(temp0), float(log_lam), float(cfg.temp_floor),
            t, state, u, T - window, tail_actions, T - cfg.K_report, report_profits,
        )
        t += n

    trace = (report_profits - eq.pi_star) / gap
    return RunResult(
        delta_tilde=float(trace.mean()),
        delta_trace=trace,
        tail_actions=tail_actions,
        q_tables=(q1, q2),
        seed=cfg.seed,
        run_index=run_index,
        wall_time=time.perf_counter() - start,
        update_target=cfg.update_target,
        final_state=int(state),
        tail_profits=report_profits,
    )


# --------------------------------------------------------------------------
# Q-table dump format
# --------------------------------------------------------------------------

QDUMP_MAGIC = b"QTAB\x00\x01\x00\x00"
_QDUMP_HEADER = struct.Struct("<8sIIIIII")  # magic, M, N, n_states, n_actions, side order, platform


def write_qtable(path, q: np.ndarray, M: int, platform: int = 0, n_platforms: int = 2) -> None:
    """Write a table as a 32-byte header followed by little-endian float64 data.

    Header fields (little-endian uint32 after the 8-byte magic): ``M``,
    ``N``, ``n_states``, ``n_actions``, side order (``0`` = buyer index
    major, seller minor) and the platform index.
    """
    q = np.asarray(q)
    if q.shape != (M ** (2 * n_platforms), M**2):
        raise ShapeMismatch(f"table shape {q.shape} does not match M={M}")
    header = _QDUMP_HEADER.pack(QDUMP_MAGIC, M, n_platforms, q.shape[0], q.shape[1], 0, platform)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(q, dtype="<f8").tobytes())


def read_qtable(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        raw = fh.read(_QDUMP_HEADER.size)
        magic, M, n_platforms, n_states, n_actions, order, platform = _QDUMP_HEADER.unpack(raw)
        if magic != QDUMP_MAGIC:
            raise ValueError(f"{path}: not a Q-table dump")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n_states * n_actions:
        raise ShapeMismatch(f"{path}: expected {n_states * n_actions} values, found {data.size}")
    meta = {"M": M, "n_platforms": n_platforms, "side_order": order, "platform": platform}
    return data.reshape(n_states, n_actions).astype(float), meta
