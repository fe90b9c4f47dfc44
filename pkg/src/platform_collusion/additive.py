"""Additive decomposition of the collusive level over externality entries.

The response is modelled as a baseline plus four one-variable effects and
six two-variable effects of the externality entries. Effects are fitted by
sequential residual fitting: each effect is smoothed against what the
earlier effects left unexplained. Because the result depends on the order,
every effect is averaged over many orders. Orders that share a prefix share
the fits along that prefix, so each distinct prefix is fitted once.

Each averaged effect is piecewise constant on the cells between distinct
training values and is stored as an exact lookup table on those cells.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import TooFewSamples
from .market import ExternalityMatrix
from .smoother import MIN_SAMPLES, TreeSmoother, canonical_order, cells_from_diff

FEATURES = ("bb", "bs", "sb", "ss")
UNIVARIATE_TERMS = (("bb",), ("ss",), ("bs",), ("sb",))
BIVARIATE_TERMS = (("bb", "ss"), ("sb", "bs"), ("bb", "bs"), ("bb", "sb"), ("ss", "bs"), ("ss", "sb"))


def term_name(term) -> str:
    return "_".join(term)


def sample_phi(rng) -> ExternalityMatrix:
    """Four independent standard normal entries."""
    return ExternalityMatrix(*(float(v) for v in rng.standard_normal(4)))


def sample_phis(rng, n: int) -> np.ndarray:
    """``n`` draws as rows ``(bb, bs, sb, ss)``."""
    return rng.standard_normal((n, 4))


@dataclass(frozen=True)
class SmootherConfig:
    n_estimators: int = 300
    learning_rate: float = 0.1
    univariate_depth: int = 3
    bivariate_depth: int = 4
    min_samples_leaf: int = 1
    seed: int = 0
    # per-term (name, min_samples_leaf, n_estimators) replacing the defaults above
    overrides: tuple = ()

    def smoother(self, term) -> TreeSmoother:
        leaf, rounds = self.min_samples_leaf, self.n_estimators
        for name, o_leaf, o_rounds in self.overrides:
            if name == term_name(term):
                leaf, rounds = o_leaf, o_rounds
        return TreeSmoother(
            n_estimators=rounds,
            learning_rate=self.learning_rate,
            max_depth=self.bivariate_depth if len(term) == 2 else self.univariate_depth,
            min_samples_leaf=leaf,
            random_state=self.seed,
        )


def _columns(term) -> list:
    return [FEATURES.index(f) for f in term]


# --------------------------------------------------------------------------
# step-function components
# --------------------------------------------------------------------------


@dataclass
class StepComponent:
    """A function of one or two entries, constant on axis-aligned cells.

    On axis ``j`` a value ``x`` falls in cell ``c`` when
    ``edges[j][c - 1] < x <= edges[j][c]``.
    """

    term: tuple
    edges: list
    table: np.ndarray

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        idx = tuple(np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(self.edges))
        return self.table[idx]

    def shifted(self, c: float) -> "StepComponent":
        return StepComponent(self.term, self.edges, self.table + c)

    def compressed(self) -> "StepComponent":
        """Drop cell boundaries across which the value does not change."""
        table, edges = self.table, list(self.edges)
        for axis in range(table.ndim):
            if table.shape[axis] < 2:
                continue
            moved = np.moveaxis(table, axis, 0)
            change = np.any((moved[1:] != moved[:-1]).reshape(moved.shape[0] - 1, -1), axis=1)
            keep = np.concatenate([[True], change])
            table = np.moveaxis(moved[keep], 0, axis)
            edges[axis] = np.asarray(edges[axis])[change]
        return StepComponent(self.term, edges, np.ascontiguousarray(table))

    def to_dict(self) -> dict:
        return {"term": list(self.term), "edges": [np.asarray(e).tolist() for e in self.edges],
                "table": self.table.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StepComponent":
        return cls(tuple(d["term"]), [np.asarray(e, dtype=float) for e in d["edges"]],
                   np.asarray(d["table"], dtype=float))


def _edges_for(X: np.ndarray, term) -> list:
    out = []
    for c in _columns(term):
        u = np.unique(X[:, c])
        out.append(0.5 * (u[:-1] + u[1:]))
    return out


# --------------------------------------------------------------------------
# sequential residual fitting
# --------------------------------------------------------------------------


@dataclass
class SequenceFit:
    order: tuple
    components: dict
    fitted: dict
    residual: np.ndarray


def fit_sequence(X, y_centered, order, config: SmootherConfig = SmootherConfig()) -> SequenceFit:
    """Fit the terms of ``order`` one after another on the running residual.

    ``fitted[name]`` holds each term's fitted values at the training rows,
    and ``residual`` is what remains after the last term.
    """
    X = np.asarray(X, dtype=float)
    resid = np.asarray(y_centered, dtype=float).copy()
    if X.shape[0] < MIN_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_SAMPLES} samples, got {X.shape[0]}")
    comps, fitted = {}, {}
    for term in order:
        model = config.smoother(term).fit(X[:, _columns(term)], resid)
        comps[term_name(term)] = model
        fitted[term_name(term)] = model.train_prediction_.copy()
        resid = resid - model.train_prediction_
    return SequenceFit(tuple(order), comps, fitted, resid)


def fit_univariate_sequence(X, y, order, config: SmootherConfig = SmootherConfig(),
                            delta0: float | None = None) -> SequenceFit:
    """One pass over the four single-entry terms in the given order.

    ``order`` is a permutation of ``("bb", "ss", "bs", "sb")``; the chain
    starts from ``y - delta0`` with ``delta0`` the sample mean by default.
    """
    y = np.asarray(y, dtype=float)
    if delta0 is None:
        delta0 = float(np.mean(y))
    terms = [(t,) if isinstance(t, str) else tuple(t) for t in order]
    if sorted(terms) != sorted(UNIVARIATE_TERMS):
        raise ValueError(f"order must be a permutation of {[t[0] for t in UNIVARIATE_TERMS]}")
    return fit_sequence(X, y - delta0, terms, config)


def average_over_orders(X, y_centered, terms, orders, config: SmootherConfig, return_residual: bool = False):
    """Average each term's fitted function over the given term orders.

    ``orders`` holds permutations of ``range(len(terms))``. The result maps
    term names to :class:`StepComponent`. Orders are processed as a sorted
    prefix tree, so the result does not depend on how ``orders`` is listed.
    With ``return_residual`` the order-averaged final residual at the
    training rows is returned as well.
    """
    X = np.asarray(X, dtype=float)
    orders = sorted(tuple(int(i) for i in o) for o in orders)
    if not orders:
        raise ValueError("need at least one order")
    counts: dict = {}
    for o in orders:
        for k in range(1, len(o) + 1):
            counts[o[:k]] = counts.get(o[:k], 0) + 1
    total = len(orders)
    edges = {term_name(t): _edges_for(X, t) for t in terms}
    diffs = {term_name(t): np.zeros(tuple(len(e) + 2 for e in edges[term_name(t)])) for t in terms}
    mean_resid = np.zeros(X.shape[0])

    def visit(prefix, resid):
        nexts = sorted({o[len(prefix)] for o in orders if o[:len(prefix)] == prefix and len(o) > len(prefix)})
        for i in nexts:
            key = prefix + (i,)
            term = terms[i]
            model = config.smoother(term).fit(X[:, _columns(term)], resid)
            model.scatter(diffs[term_name(term)], counts[key] / total)
            if len(key) < len(terms):
                visit(key, resid - model.train_prediction_)
            else:
                mean_resid[:] += (resid - model.train_prediction_) * (counts[key] / total)

    visit((), np.asarray(y_centered, dtype=float))
    comps = {
        term_name(t): StepComponent(tuple(t), edges[term_name(t)], cells_from_diff(diffs[term_name(t)])).compressed()
        for t in terms
    }
    return (comps, mean_resid) if return_residual else comps


def cv_folds_for(X, y, n_folds: int) -> np.ndarray:
    """Fold label per row: position in the canonical row order modulo ``n_folds``.

    Labels depend only on the data, not on the order rows are given in.
    """
    folds = np.empty(len(y), dtype=np.int64)
    folds[canonical_order(X, y)] = np.arange(len(y)) % n_folds
    return folds


def tune_term(X, y, term, config: SmootherConfig, leaf_grid, n_folds: int = 5):
    """Pick ``(min_samples_leaf, n_estimators)`` for one term by K-fold cross-validation.

    Every leaf size in ``leaf_grid`` is fitted with ``config.n_estimators``
    rounds on each training split; the held-out error after each round
    gives the whole round curve at once. Returns the pair with the smallest
    mean held-out error (ties go to the larger leaf, then fewer rounds) and
    that error.
    """
    Xt = np.ascontiguousarray(np.asarray(X, dtype=float)[:, _columns(term)])
    y = np.asarray(y, dtype=float)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    folds = cv_folds_for(Xt, y, n_folds)
    best = None
    for leaf in sorted(set(int(v) for v in leaf_grid), reverse=True):
        curve = np.zeros(config.n_estimators + 1)
        for k in range(n_folds):
            train, test = folds != k, folds == k
            model = replace(config, overrides=((term_name(term), leaf, config.n_estimators),)).smoother(term)
            model.fit(Xt[train], y[train])
            curve += model.staged_mse(Xt[test], y[test]) * test.sum()
        curve /= len(y)
        rounds = int(np.argmin(curve))
        if best is None or curve[rounds] < best[2]:
            best = (leaf, rounds, float(curve[rounds]))
    return best


def _choose_orders(n_terms: int, n_orders: int | None, rng_seed: int) -> list:
    all_orders = list(itertools.permutations(range(n_terms)))
    if n_orders is None or n_orders >= len(all_orders):
        return all_orders
    if n_orders < 1:
        raise ValueError("number of orders must be positive")
    rng = np.random.default_rng(rng_seed)
    pick = np.sort(rng.choice(len(all_orders), size=n_orders, replace=False))
    return [all_orders[i] for i in pick]


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


class AdditiveModel(RegressorMixin, BaseEstimator):
    """Baseline plus averaged one- and two-entry effects of ``(bb, bs, sb, ss)``.

    ``X`` columns are the externality entries in the order ``FEATURES``.
    ``n_univariate_perms`` and ``n_bivariate_perms`` default to every order
    (24 and 720); smaller values use a seeded uniform subsample.

    With ``cv_folds >= 2`` each term gets its own leaf size (from
    ``leaf_grid``) and number of rounds (at most ``n_estimators``), chosen
    by cross-validation against that stage's response before the order
    averaging starts; the choices are kept in ``tuning_``. With
    ``cv_folds=0`` every fit uses ``n_estimators`` and ``min_samples_leaf``.
    """

    def __init__(self, n_estimators=300, learning_rate=0.1, univariate_depth=3, bivariate_depth=4,
                 min_samples_leaf=1, n_univariate_perms=None, n_bivariate_perms=None,
                 fit_bivariate=True, cv_folds=5, leaf_grid=(5, 10, 25, 50, 100), random_state=0):
        self.cv_folds = cv_folds
        self.leaf_grid = leaf_grid
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.univariate_depth = univariate_depth
        self.bivariate_depth = bivariate_depth
        self.min_samples_leaf = min_samples_leaf
        self.n_univariate_perms = n_univariate_perms
        self.n_bivariate_perms = n_bivariate_perms
        self.fit_bivariate = fit_bivariate
        self.random_state = random_state

    def smoother_config(self) -> SmootherConfig:
        return SmootherConfig(self.n_estimators, self.learning_rate, self.univariate_depth,
                              self.bivariate_depth, self.min_samples_leaf, self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != len(FEATURES):
            raise ValueError(f"expected {len(FEATURES)} columns {FEATURES}, got {X.shape[1]}")
        if X.shape[0] < MIN_SAMPLES:
            raise TooFewSamples(f"need at least {MIN_SAMPLES} samples, got {X.shape[0]}")
        cfg = self.smoother_config()
        self.tuning_ = {}
        self.delta0_ = float(np.mean(y))
        y0 = y - self.delta0_
        cfg = self._tuned(cfg, X, y0, UNIVARIATE_TERMS)
        self.univariate_orders_ = _choose_orders(4, self.n_univariate_perms, self.random_state)
        self.components_, self.residual_ = average_over_orders(X, y0, UNIVARIATE_TERMS, self.univariate_orders_,
                                                               cfg, return_residual=True)
        self.bivariate_orders_ = []
        if self.fit_bivariate:
            y1 = y0 - sum(self.components_[term_name(t)](X[:, _columns(t)]) for t in UNIVARIATE_TERMS)
            cfg = self._tuned(cfg, X, y1, BIVARIATE_TERMS)
            self.bivariate_orders_ = _choose_orders(6, self.n_bivariate_perms, self.random_state + 1)
            bivariate, self.residual_ = average_over_orders(X, y1, BIVARIATE_TERMS, self.bivariate_orders_, cfg,
                                                            return_residual=True)
            self.components_.update(bivariate)
        self.feature_ranges_ = [(float(X[:, j].min()), float(X[:, j].max())) for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        return self

    def _tuned(self, cfg: SmootherConfig, X, y, terms) -> SmootherConfig:
        if not self.cv_folds:
            return cfg
        extra = []
        for term in terms:
            leaf, rounds, err = tune_term(X, y, term, cfg, self.leaf_grid, self.cv_folds)
            self.tuning_[term_name(term)] = {"min_samples_leaf": leaf, "n_estimators": rounds, "cv_mse": err}
            extra.append((term_name(term), leaf, rounds))
        return replace(cfg, overrides=cfg.overrides + tuple(extra))

    def component(self, name: str, values) -> np.ndarray:
        """Evaluate one effect; ``values`` has one column per entry in the term."""
        check_is_fitted(self, "components_")
        return self.components_[name](values)

    def predict(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        out = np.full(X.shape[0], self.delta0_)
        for comp in self.components_.values():
            out += comp(X[:, _columns(comp.term)])
        return out

    # ------------------------------------------------------------------ I/O

    def to_dict(self) -> dict:
        check_is_fitted(self, "components_")
        return {
            "kind": "additive_model",
            "features": list(FEATURES),
            "params": self.get_params(),
            "delta0": self.delta0_,
            "feature_ranges": self.feature_ranges_,
            "tuning": self.tuning_,
            "univariate_orders": [list(o) for o in self.univariate_orders_],
            "bivariate_orders": [list(o) for o in self.bivariate_orders_],
            "components": {k: c.to_dict() for k, c in self.components_.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdditiveModel":
        if d.get("kind") != "additive_model":
            raise ValueError("not an additive model document")
        model = cls(**d["params"])
        model.delta0_ = float(d["delta0"])
        model.feature_ranges_ = [tuple(r) for r in d["feature_ranges"]]
        model.tuning_ = dict(d.get("tuning", {}))
        model.univariate_orders_ = [tuple(o) for o in d["univariate_orders"]]
        model.bivariate_orders_ = [tuple(o) for o in d["bivariate_orders"]]
        model.components_ = {k: StepComponent.from_dict(v) for k, v in d["components"].items()}
        model.n_features_in_ = len(FEATURES)
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "AdditiveModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_additive_model(phis, deltas, n_univariate_perms: int | None = None,
                       n_bivariate_perms: int | None = None,
                       config: SmootherConfig = SmootherConfig(), cv_folds: int = 5) -> AdditiveModel:
    """Fit from rows of ``(bb, bs, sb, ss)`` entries (or matrices) and collusive levels."""
    X = np.asarray([p.as_tuple() if isinstance(p, ExternalityMatrix) else p for p in phis], dtype=float)
    model = AdditiveModel(
        n_estimators=config.n_estimators, learning_rate=config.learning_rate,
        univariate_depth=config.univariate_depth, bivariate_depth=config.bivariate_depth,
        min_samples_leaf=config.min_samples_leaf, n_univariate_perms=n_univariate_perms,
        n_bivariate_perms=n_bivariate_perms, cv_folds=cv_folds, random_state=config.seed,
    )
    return model.fit(X, np.asarray(deltas, dtype=float))


def evaluate(model: AdditiveModel, phi) -> float:
    row = phi.as_tuple() if isinstance(phi, ExternalityMatrix) else tuple(phi)
    return float(model.predict(np.asarray([row], dtype=float))[0])


def component_curves(model: AdditiveModel, n_points: int = 101, n_grid: int = 51) -> dict:
    """Sample every effect on a uniform grid over the observed entry ranges.

    Returns ``name -> list of rows``; one-entry rows are ``(x, value)`` and
    two-entry rows are ``(x, y, value)``.
    """
    check_is_fitted(model, "components_")
    out = {}
    for name, comp in model.components_.items():
        axes = [np.linspace(*model.feature_ranges_[FEATURES.index(f)], n_points if len(comp.term) == 1 else n_grid)
                for f in comp.term]
        if len(axes) == 1:
            pts = axes[0][:, None]
        else:
            gx, gy = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        vals = comp(pts)
        out[name] = [tuple(float(v) for v in p) + (float(val),) for p, val in zip(pts, vals)]
    return out


def write_component_curves(model: AdditiveModel, outdir, **kw) -> list:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in component_curves(model, **kw).items():
        comp = model.components_[name]
        path = outdir / f"component_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"phi_{f}" for f in comp.term] + ["value"])
            w.writerows([[repr(v) for v in row] for row in rows])
        paths.append(path)
    return paths


def r_squared(y, pred) -> float:
    y = np.asarray(y, dtype=float)
    ss = float(np.sum((y - y.mean()) ** 2))
    return math.nan if ss == 0 else 1.0 - float(np.sum((y - pred) ** 2)) / ss


__all__ = [
    "AdditiveModel", "BIVARIATE_TERMS", "FEATURES", "SequenceFit", "SmootherConfig", "StepComponent",
    "UNIVARIATE_TERMS", "average_over_orders", "cv_folds_for", "tune_term", "component_curves", "evaluate", "fit_additive_model",
    "fit_sequence", "fit_univariate_sequence", "r_squared", "sample_phi", "sample_phis",
    "term_name", "write_component_curves",
]
