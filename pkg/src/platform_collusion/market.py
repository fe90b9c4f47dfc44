"""Static two-sided platform market.

Users on side ``k`` (buyers ``b`` or sellers ``s``) choose between an outside
option and ``N`` platforms under multinomial-logit tastes.  Joining platform
``i`` yields ``phi_kb * x_b[i] + phi_ks * x_s[i] - p_k[i]``, so the market
shares are a fixed point of the logit map.  Profits and the symmetric
competitive (CNE) and collusive (CE) equilibria are solved numerically.

Array conventions used throughout the package:

* prices have shape ``(N, 2)``: row ``i`` is platform ``i``'s ``(p_b, p_s)``;
* shares have shape ``(N + 1, 2)``: row 0 is the outside option, row
  ``i + 1`` is platform ``i``; columns are sides ``(b, s)``.

Platforms are indexed from 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import optimize

from .errors import NoEquilibriumFound, NonConvergence

SIDES = ("b", "s")


@dataclass(frozen=True)
class ExternalityMatrix:
    """Within- and cross-side externalities ``[phi_bb, phi_bs; phi_sb, phi_ss]``."""

    phi_bb: float = 0.0
    phi_bs: float = 0.0
    phi_sb: float = 0.0
    phi_ss: float = 0.0

    def __post_init__(self):
        for name in ("phi_bb", "phi_bs", "phi_sb", "phi_ss"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([[self.phi_bb, self.phi_bs], [self.phi_sb, self.phi_ss]])

    def as_tuple(self) -> tuple:
        return (self.phi_bb, self.phi_bs, self.phi_sb, self.phi_ss)

    @classmethod
    def from_array(cls, arr) -> "ExternalityMatrix":
        arr = np.asarray(arr, dtype=float)
        if arr.shape == (4,):
            arr = arr.reshape(2, 2)
        if arr.shape != (2, 2):
            raise ValueError(f"externality matrix must be 2x2, got shape {arr.shape}")
        return cls(arr[0, 0], arr[0, 1], arr[1, 0], arr[1, 1])

    def swap_sides(self) -> "ExternalityMatrix":
        return ExternalityMatrix(self.phi_ss, self.phi_sb, self.phi_bs, self.phi_bb)


@dataclass(frozen=True)
class MarketParams:
    n_platforms: int = 2
    beta_b: float = 1.0
    beta_s: float = 1.0
    u0_b: float = -2.0
    u0_s: float = -2.0
    delta: float = 0.05
    phi: ExternalityMatrix = field(default_factory=ExternalityMatrix)

    def __post_init__(self):
        if int(self.n_platforms) != self.n_platforms or self.n_platforms < 2:
            raise ValueError("n_platforms must be an integer >= 2")
        if not (self.beta_b > 0 and self.beta_s > 0):
            raise ValueError("beta_b and beta_s must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not isinstance(self.phi, ExternalityMatrix):
            object.__setattr__(self, "phi", ExternalityMatrix.from_array(self.phi))

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta_b, self.beta_s], dtype=float)

    @property
    def u0(self) -> np.ndarray:
        return np.array([self.u0_b, self.u0_s], dtype=float)

    def swap_sides(self) -> "MarketParams":
        return MarketParams(
            n_platforms=self.n_platforms,
            beta_b=self.beta_s,
            beta_s=self.beta_b,
            u0_b=self.u0_s,
            u0_s=self.u0_b,
            delta=self.delta,
            phi=self.phi.swap_sides(),
        )


def symmetric_prices(p_b: float, p_s: float, n_platforms: int = 2) -> np.ndarray:
    return np.tile(np.array([p_b, p_s], dtype=float), (n_platforms, 1))


# --------------------------------------------------------------------------
# share fixed point
# --------------------------------------------------------------------------


@njit(cache=True)
def _logit_map(prices, x, phi, beta, u0, out):
    """Write the logit shares implied by platform masses ``x`` into ``out``.

    ``out`` has shape (N + 1, 2); row 0 is the outside option.
    """
    n = prices.shape[0]
    for k in range(2):
        base = u0[k] / beta[k]
        m = base
        for i in range(n):
            v = (phi[k, 0] * x[i, 0] + phi[k, 1] * x[i, 1] - prices[i, k]) / beta[k]
            out[i + 1, k] = v
            if v > m:
                m = v
        e0 = math.exp(base - m)
        denom = e0
        for i in range(n):
            e = math.exp(out[i + 1, k] - m)
            out[i + 1, k] = e
            denom += e
        out[0, k] = e0 / denom
        for i in range(n):
            out[i + 1, k] = out[i + 1, k] / denom


@njit(cache=True)
def _solve_fixed_point(prices, phi, beta, u0, eta, tol, max_iter):
    """Damped iteration ``x <- (1 - eta) x + eta * Logit(x)``.

    Returns ``(shares, residual, converged)``; ``residual`` is the sup-norm
    of ``Logit(x) - x`` at the returned platform masses.
    """
    n = prices.shape[0]
    x = np.empty((n, 2))
    for i in range(n):
        x[i, 0] = 1.0 / (n + 1)
        x[i, 1] = 1.0 / (n + 1)
    out = np.empty((n + 1, 2))
    res = np.inf
    for _ in range(max_iter):
        _logit_map(prices, x, phi, beta, u0, out)
        res = 0.0
        for i in range(n):
            for k in range(2):
                d = abs(out[i + 1, k] - x[i, k])
                if d > res:
                    res = d
        if res <= tol:
            # return the logit image of x so the shares are an exact
            # probability vector; accept only if its own residual is in tol
            y = np.empty((n, 2))
            for i in range(n):
                for k in range(2):
                    y[i, k] = out[i + 1, k]
            shares = out.copy()
            _logit_map(prices, y, phi, beta, u0, out)
            res2 = 0.0
            for i in range(n):
                for k in range(2):
                    d = abs(out[i + 1, k] - y[i, k])
                    if d > res2:
                        res2 = d
            if res2 <= tol:
                return shares, res2, True
            _logit_map(prices, x, phi, beta, u0, out)
        for i in range(n):
            for k in range(2):
                x[i, k] = (1.0 - eta) * x[i, k] + eta * out[i + 1, k]
    _logit_map(prices, x, phi, beta, u0, out)
    return out.copy(), res, False


@njit(cache=True)
def _solve_batch(prices, phi, beta, u0, eta, fallback_eta, tol, max_iter):
    n_prof = prices.shape[0]
    n = prices.shape[1]
    shares = np.empty((n_prof, n + 1, 2))
    resid = np.empty(n_prof)
    ok = np.empty(n_prof, dtype=np.bool_)
    for j in range(n_prof):
        s, r, c = _solve_fixed_point(prices[j], phi, beta, u0, eta, tol, max_iter)
        if not c:
            s, r, c = _solve_fixed_point(prices[j], phi, beta, u0, fallback_eta, tol, max_iter)
        shares[j] = s
        resid[j] = r
        ok[j] = c
    return shares, resid, ok


def _param_arrays(params: MarketParams):
    return params.phi.as_array(), params.beta, params.u0


def _as_prices(prices, params: MarketParams) -> np.ndarray:
    prices = np.ascontiguousarray(prices, dtype=float)
    if prices.shape != (params.n_platforms, 2):
        raise ValueError(
            f"prices must have shape ({params.n_platforms}, 2), got {prices.shape}"
        )
    return prices


def utilities(prices, shares, params: MarketParams) -> np.ndarray:
    """Deterministic utilities, shape ``(N + 1, 2)``; row 0 is the outside option."""
    prices = _as_prices(prices, params)
    shares = np.asarray(shares, dtype=float)
    x = shares[1:]
    phi = params.phi.as_array()
    u = np.empty((params.n_platforms + 1, 2))
    u[0] = params.u0
    # u_k[i] = phi_kb * x_b[i] + phi_ks * x_s[i] - p_k[i]
    u[1:] = x @ phi.T - prices
    return u


def logit_shares(utils, params: MarketParams) -> np.ndarray:
    """Closed-form multinomial-logit shares for given utilities ``(N + 1, 2)``."""
    z = np.asarray(utils, dtype=float) / params.beta
    z = z - z.max(axis=0)
    e = np.exp(z)
    return e / e.sum(axis=0)


def solve_shares(
    prices,
    params: MarketParams,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    eta: float = 0.5,
    fallback_eta: float = 0.1,
) -> np.ndarray:
    """Solve the share fixed point for one price profile.

    Raises :class:`NonConvergence` when neither the default nor the heavier
    damping reaches ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    prices = _as_prices(prices, params)
    phi, beta, u0 = _param_arrays(params)
    shares, res, ok = _solve_fixed_point(prices, phi, beta, u0, eta, tol, max_iter)
    if not ok:
        shares, res, ok = _solve_fixed_point(prices, phi, beta, u0, fallback_eta, tol, max_iter)
    if not ok:
        raise NonConvergence(max_iter, res)
    return shares


def solve_shares_batch(
    prices,
    params: MarketParams,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    eta: float = 0.5,
    fallback_eta: float = 0.1,
):
    """Vectorised :func:`solve_shares` over price profiles of shape ``(P, N, 2)``.

    Returns ``(shares, residuals, converged)`` without raising, so callers
    can count and report failed profiles.
    """
    prices = np.ascontiguousarray(prices, dtype=float)
    if prices.ndim != 3 or prices.shape[1:] != (params.n_platforms, 2):
        raise ValueError(f"prices must have shape (P, {params.n_platforms}, 2)")
    phi, beta, u0 = _param_arrays(params)
    return _solve_batch(prices, phi, beta, u0, eta, fallback_eta, tol, max_iter)


def platform_profit(i: int, prices, params: MarketParams, tol: float = 1e-10) -> float:
    shares = solve_shares(prices, params, tol=tol)
    prices = np.asarray(prices, dtype=float)
    return float(shares[i + 1, 0] * prices[i, 0] + shares[i + 1, 1] * prices[i, 1])


def asymmetric_total_profit(prices, params: MarketParams, tol: float = 1e-10) -> float:
    """Total platform profit with no symmetry assumption on prices."""
    shares = solve_shares(prices, params, tol=tol)
    prices = np.asarray(prices, dtype=float)
    return float(np.sum(shares[1:] * prices))


def total_collusive_profit(p_b: float, p_s: float, params: MarketParams, tol: float = 1e-10) -> float:
    return asymmetric_total_profit(symmetric_prices(p_b, p_s, params.n_platforms), params, tol=tol)


# --------------------------------------------------------------------------
# equilibrium solvers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    share_tol: float = 1e-12
    foc_tol: float = 1e-6
    n_starts: int = 5
    coarse_points: int = 16
    bracket: tuple = (-5.0, 10.0)
    fd_step: float = 1e-4
    br_max_iter: int = 200
    br_tol: float = 1e-9


@dataclass
class EquilibriumSolution:
    """One symmetric solution ``(p_b, p_s)`` of either program."""

    p_b: float
    p_s: float
    profit: float
    foc_residual: float
    shares: np.ndarray
    trace: list = field(default_factory=list)
    candidates: list = field(default_factory=list)


@dataclass
class EquilibriumPair:
    p_star_b: float
    p_star_s: float
    p_coll_b: float
    p_coll_s: float
    pi_star: float
    pi_coll: float
    shares_star: np.ndarray | None = None
    shares_coll: np.ndarray | None = None
    foc_star: float = 0.0
    foc_coll: float = 0.0

    @property
    def p_star(self) -> np.ndarray:
        return np.array([self.p_star_b, self.p_star_s])

    @property
    def p_coll(self) -> np.ndarray:
        return np.array([self.p_coll_b, self.p_coll_s])

    @property
    def gap(self) -> float:
        return self.pi_coll - self.pi_star

    def to_dict(self) -> dict:
        return {
            "p_star_b": self.p_star_b,
            "p_star_s": self.p_star_s,
            "p_coll_b": self.p_coll_b,
            "p_coll_s": self.p_coll_s,
            "pi_star": self.pi_star,
            "pi_coll": self.pi_coll,
            "foc_star": self.foc_star,
            "foc_coll": self.foc_coll,
        }


class _ProfitOracle:
    """Profit evaluations at a fixed share tolerance, raising on failure."""

    def __init__(self, params: MarketParams, cfg: SolverConfig):
        self.params = params
        self.cfg = cfg
        self.phi, self.beta, self.u0 = _param_arrays(params)
        self.n = params.n_platforms

    def shares(self, prices):
        s, r, ok = _solve_fixed_point(prices, self.phi, self.beta, self.u0, 0.5, self.cfg.share_tol, 100_000)
        if not ok:
            s, r, ok = _solve_fixed_point(prices, self.phi, self.beta, self.u0, 0.1, self.cfg.share_tol, 100_000)
        if not ok:
            raise NonConvergence(100_000, r)
        return s

    def own(self, p, rival):
        prices = np.empty((self.n, 2))
        prices[0] = p
        prices[1:] = rival
        s = self.shares(prices)
        return s[1, 0] * p[0] + s[1, 1] * p[1]

    def total(self, p):
        prices = np.empty((self.n, 2))
        prices[:] = p
        s = self.shares(prices)
        return float(np.sum(s[1:] * prices))

    def grad(self, f, p):
        h = self.cfg.fd_step
        g = np.empty(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            g[k] = (f(p + e) - f(p - e)) / (2 * h)
        return g


def _coarse_axes(params: MarketParams, cfg: SolverConfig, n: int):
    lo, hi = cfg.bracket
    return (
        np.linspace(lo * params.beta_b, hi * params.beta_b, n),
        np.linspace(lo * params.beta_s, hi * params.beta_s, n),
    )


def _maximize(f, x0, oracle):
    """Local maximisation of a smooth 2-d objective from ``x0``."""
    res = optimize.minimize(
        lambda p: -f(p),
        np.asarray(x0, dtype=float),
        jac=lambda p: -oracle.grad(f, p),
        method="BFGS",
        options={"gtol": 1e-10, "maxiter": 500},
    )
    return np.asarray(res.x, dtype=float)


def _best_response(oracle, rival, x0):
    return _maximize(lambda p: oracle.own(p, rival), x0, oracle)


def solve_cne(
    params: MarketParams,
    cfg: SolverConfig | None = None,
) -> EquilibriumSolution:
    """Symmetric competitive Nash equilibrium by best-response iteration.

    Starts are the coarse-grid symmetric profiles with the smallest
    own-price gradient.  Each start runs symmetric best-response iteration
    and is then polished by solving the first-order conditions.  The start
    with the smallest residual is returned; all converged candidates are
    kept in ``candidates``.
    """
    cfg = cfg or SolverConfig()
    oracle = _ProfitOracle(params, cfg)

    def foc(p):
        p = np.asarray(p, dtype=float)
        return oracle.grad(lambda q: oracle.own(q, p), p)

    axes_b, axes_s = _coarse_axes(params, cfg, cfg.coarse_points)
    scored = []
    for pb, ps in itertools.product(axes_b, axes_s):
        p = np.array([pb, ps])
        try:
            scored.append((float(np.max(np.abs(foc(p)))), pb, ps))
        except NonConvergence:
            continue
    scored.sort()
    starts = [np.array([pb, ps]) for _, pb, ps in scored[: cfg.n_starts]]

    candidates = []
    for start in starts:
        q = start.copy()
        trace = [q.copy()]
        try:
            for _ in range(cfg.br_max_iter):
                new = _best_response(oracle, q, q)
                step = float(np.max(np.abs(new - q)))
                if not np.all(np.isfinite(new)):
                    break
                q = new
                trace.append(q.copy())
                if step < cfg.br_tol:
                    break
            sol = optimize.root(foc, q, method="hybr", options={"xtol": 1e-14})
            if np.all(np.isfinite(sol.x)) and np.max(np.abs(foc(sol.x))) < np.max(np.abs(foc(q))):
                q = np.asarray(sol.x, dtype=float)
            resid = float(np.max(np.abs(foc(q))))
            # reject saddles or minima: a unilateral local deviation must not pay
            own = oracle.own(q, q)
            dev = oracle.own(_best_response(oracle, q, q), q)
            if dev > own + 1e-9:
                continue
        except NonConvergence:
            continue
        candidates.append((resid, q, trace, own))

    good = [c for c in candidates if c[0] <= cfg.foc_tol]
    if not good:
        raise NoEquilibriumFound(
            "no competitive equilibrium start converged"
            + (f" (best residual {min(c[0] for c in candidates):.2e})" if candidates else "")
        )
    good.sort(key=lambda c: c[0])
    resid, q, trace, own = good[0]
    shares = oracle.shares(symmetric_prices(q[0], q[1], params.n_platforms))
    return EquilibriumSolution(
        p_b=float(q[0]),
        p_s=float(q[1]),
        profit=float(own),
        foc_residual=resid,
        shares=shares,
        trace=[t.tolist() for t in trace],
        candidates=[(float(c[1][0]), float(c[1][1]), c[0]) for c in good],
    )


def solve_ce(
    params: MarketParams,
    cfg: SolverConfig | None = None,
    extra_starts=(),
) -> EquilibriumSolution:
    """Symmetric collusive equilibrium: maximise total profit over ``(p_b, p_s)``.

    The returned ``profit`` is the per-platform share ``Pi_tot / N``.
    """
    cfg = cfg or SolverConfig()
    oracle = _ProfitOracle(params, cfg)
    axes_b, axes_s = _coarse_axes(params, cfg, cfg.coarse_points)
    scored = []
    for pb, ps in itertools.product(axes_b, axes_s):
        try:
            scored.append((-oracle.total(np.array([pb, ps])), pb, ps))
        except NonConvergence:
            continue
    scored.sort()
    starts = [np.array([pb, ps]) for _, pb, ps in scored[: cfg.n_starts]]
    starts += [np.asarray(s, dtype=float) for s in extra_starts]

    def grad(p):
        return oracle.grad(oracle.total, np.asarray(p, dtype=float))

    candidates = []
    for start in starts:
        try:
            q = _maximize(oracle.total, start, oracle)
            sol = optimize.root(grad, q, method="hybr", options={"xtol": 1e-14})
            if np.all(np.isfinite(sol.x)) and oracle.total(sol.x) >= oracle.total(q) - 1e-12:
                q = np.asarray(sol.x, dtype=float)
            candidates.append((-oracle.total(q), float(np.max(np.abs(grad(q)))), q, start))
        except NonConvergence:
            continue
    good = [c for c in candidates if c[1] <= cfg.foc_tol]
    if not good:
        raise NoEquilibriumFound("no collusive equilibrium start converged")
    good.sort(key=lambda c: (c[0], c[1]))
    neg_total, resid, q, start = good[0]
    shares = oracle.shares(symmetric_prices(q[0], q[1], params.n_platforms))
    return EquilibriumSolution(
        p_b=float(q[0]),
        p_s=float(q[1]),
        profit=float(-neg_total / params.n_platforms),
        foc_residual=resid,
        shares=shares,
        trace=[start.tolist(), q.tolist()],
        candidates=[(float(c[2][0]), float(c[2][1]), c[1]) for c in good],
    )


def solve_equilibria(params: MarketParams, cfg: SolverConfig | None = None) -> EquilibriumPair:
    """Solve both programs; the CNE prices seed the collusive search."""
    cne = solve_cne(params, cfg)
    ce = solve_ce(params, cfg, extra_starts=[(cne.p_b, cne.p_s)])
    return EquilibriumPair(
        p_star_b=cne.p_b,
        p_star_s=cne.p_s,
        p_coll_b=ce.p_b,
        p_coll_s=ce.p_s,
        pi_star=cne.profit,
        pi_coll=ce.profit,
        shares_star=cne.shares,
        shares_coll=ce.shares,
        foc_star=cne.foc_residual,
        foc_coll=ce.foc_residual,
    )
