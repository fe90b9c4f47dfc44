"""Gradient-boosted least-squares regression trees.

Trees are grown level by level with exact greedy splits. Rows are put in a
canonical order before fitting, so the fitted model does not depend on the
order of the training rows.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import TooFewSamples

MIN_SAMPLES = 10
# a split must reduce the squared error by more than this
_MIN_GAIN = 1e-14


@njit(cache=True)
def _grow_tree(X, rank, mids, inv, order, r, max_depth, min_leaf,
               feature, threshold, split_rank, left, right, value):
    """Fit one tree to residuals ``r``; returns the number of nodes used.

    ``order[f]`` lists row indices sorted by feature ``f`` and ``rank[i, f]``
    is the position of ``X[i, f]`` among the distinct values of feature
    ``f``. Thresholds are always midpoints between consecutive distinct
    training values. ``inv[c] = 1 / c``. Node 0 is the root; a node with
    ``feature == -1`` is a leaf.
    """
    n, d = X.shape
    node_of = np.zeros(n, dtype=np.int64)
    n_nodes = 1
    feature[0] = -1
    tot = 0.0
    for i in range(n):
        tot += r[i]
    value[0] = tot * inv[n]
    level_start, level_end = 0, 1
    cap = feature.shape[0]
    sum_node = np.zeros(cap)
    cnt_node = np.zeros(cap, dtype=np.int64)
    best_gain = np.zeros(cap)
    best_feat = np.full(cap, -1, dtype=np.int64)
    best_rank = np.zeros(cap, dtype=np.int64)
    cum_s = np.zeros(cap)
    cum_c = np.zeros(cap, dtype=np.int64)
    last_r = np.zeros(cap, dtype=np.int64)
    for depth in range(max_depth):
        for k in range(level_start, level_end):
            sum_node[k] = 0.0
            cnt_node[k] = 0
            best_gain[k] = _MIN_GAIN
            best_feat[k] = -1
        for i in range(n):
            k = node_of[i]
            if k >= level_start:
                sum_node[k] += r[i]
                cnt_node[k] += 1
        for f in range(d):
            for k in range(level_start, level_end):
                cum_s[k] = 0.0
                cum_c[k] = 0
            for j in range(n):
                i = order[f, j]
                k = node_of[i]
                if k < level_start:
                    continue
                ri = rank[i, f]
                c = cum_c[k]
                if c >= min_leaf and cnt_node[k] - c >= min_leaf and ri > last_r[k]:
                    sl = cum_s[k]
                    sr = sum_node[k] - sl
                    gain = sl * sl * inv[c] + sr * sr * inv[cnt_node[k] - c] - sum_node[k] * sum_node[k] * inv[cnt_node[k]]
                    if gain > best_gain[k]:
                        best_gain[k] = gain
                        best_feat[k] = f
                        best_rank[k] = last_r[k]
                cum_s[k] += r[i]
                cum_c[k] += 1
                last_r[k] = ri
        new_start = n_nodes
        for k in range(level_start, level_end):
            if best_feat[k] < 0:
                continue
            feature[k] = best_feat[k]
            split_rank[k] = best_rank[k]
            threshold[k] = mids[best_feat[k], best_rank[k]]
            left[k] = n_nodes
            right[k] = n_nodes + 1
            feature[n_nodes] = -1
            feature[n_nodes + 1] = -1
            n_nodes += 2
        if n_nodes == new_start:
            break
        for k in range(new_start, n_nodes):
            sum_node[k] = 0.0
            cnt_node[k] = 0
        for i in range(n):
            k = node_of[i]
            if k >= level_start and feature[k] >= 0:
                k = left[k] if rank[i, feature[k]] <= split_rank[k] else right[k]
                node_of[i] = k
                sum_node[k] += r[i]
                cnt_node[k] += 1
        for k in range(new_start, n_nodes):
            value[k] = sum_node[k] * inv[cnt_node[k]]
        level_start, level_end = new_start, n_nodes
    return n_nodes


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value, out, scale):
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            k = left[k] if X[i, feature[k]] <= threshold[k] else right[k]
        out[i] += scale * value[k]


@njit(cache=True)
def _boost(X, rank, mids, order, y, init, n_trees, lr, max_depth, min_leaf,
           feature, threshold, split_rank, left, right, value, mse, pred):
    n = X.shape[0]
    inv = np.zeros(n + 1)
    for c in range(1, n + 1):
        inv[c] = 1.0 / c
    for i in range(n):
        pred[i] = init
    r = np.empty(n)
    for t in range(n_trees):
        for i in range(n):
            r[i] = y[i] - pred[i]
        _grow_tree(X, rank, mids, inv, order, r, max_depth, min_leaf,
                   feature[t], threshold[t], split_rank[t], left[t], right[t], value[t])
        _predict_tree(X, feature[t], threshold[t], left[t], right[t], value[t], pred, lr)
        s = 0.0
        for i in range(n):
            s += (y[i] - pred[i]) ** 2
        mse[t] = s / n


@njit(cache=True)
def _predict_ensemble(X, init, lr, feature, threshold, left, right, value):
    out = np.full(X.shape[0], init)
    for t in range(feature.shape[0]):
        _predict_tree(X, feature[t], threshold[t], left[t], right[t], value[t], out, lr)
    return out


@njit(cache=True)
def _staged_sq_error(X, y, init, lr, feature, threshold, left, right, value):
    """Mean squared error on ``(X, y)`` after 0, 1, ..., T rounds."""
    n = X.shape[0]
    pred = np.full(n, init)
    out = np.empty(feature.shape[0] + 1)
    s = 0.0
    for i in range(n):
        s += (y[i] - pred[i]) ** 2
    out[0] = s / n
    for t in range(feature.shape[0]):
        _predict_tree(X, feature[t], threshold[t], left[t], right[t], value[t], pred, lr)
        s = 0.0
        for i in range(n):
            s += (y[i] - pred[i]) ** 2
        out[t + 1] = s / n
    return out


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row permutation sorting by the first column, then later columns, then ``y``."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


class TreeSmoother(RegressorMixin, BaseEstimator):
    """Boosted regression trees on one or two predictors.

    The initial prediction is the training mean; each round fits a tree to
    the current residuals and adds ``learning_rate`` times its leaf values.
    Fitting is deterministic. ``random_state`` is accepted for interface
    compatibility and recorded, but no randomness is used.
    """

    def __init__(self, n_estimators=300, learning_rate=0.1, max_depth=3, min_samples_leaf=1, random_state=0):
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[0] < MIN_SAMPLES:
            raise TooFewSamples(f"need at least {MIN_SAMPLES} samples, got {X.shape[0]}")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_samples_leaf >= 1")
        perm = canonical_order(X, y)
        Xc = np.ascontiguousarray(X[perm])
        yc = np.ascontiguousarray(y[perm])
        n, d = Xc.shape
        self.levels_ = [np.unique(Xc[:, f]) for f in range(d)]
        rank = np.ascontiguousarray(
            np.stack([np.searchsorted(self.levels_[f], Xc[:, f]) for f in range(d)], axis=1))
        mids = np.zeros((d, n))
        for f, u in enumerate(self.levels_):
            mids[f, : len(u) - 1] = 0.5 * (u[:-1] + u[1:])
        order = np.ascontiguousarray(np.stack([np.argsort(Xc[:, f], kind="stable") for f in range(d)]))
        n_nodes = 2 ** (self.max_depth + 1) - 1
        T = int(self.n_estimators)
        self.feature_ = np.full((T, n_nodes), -1, dtype=np.int64)
        self.threshold_ = np.zeros((T, n_nodes))
        self.split_rank_ = np.zeros((T, n_nodes), dtype=np.int64)
        self.left_ = np.zeros((T, n_nodes), dtype=np.int64)
        self.right_ = np.zeros((T, n_nodes), dtype=np.int64)
        self.value_ = np.zeros((T, n_nodes))
        self.train_mse_ = np.zeros(T)
        self.init_ = float(np.mean(yc))
        pred = np.empty(n)
        _boost(Xc, rank, mids, order, yc, self.init_, T, float(self.learning_rate), int(self.max_depth),
               int(self.min_samples_leaf), self.feature_, self.threshold_, self.split_rank_,
               self.left_, self.right_, self.value_, self.train_mse_, pred)
        self.train_prediction_ = np.empty(n)
        self.train_prediction_[perm] = pred
        self.n_features_in_ = d
        return self

    def predict(self, X):
        check_is_fitted(self, "init_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return _predict_ensemble(np.ascontiguousarray(X), self.init_, float(self.learning_rate),
                                 self.feature_, self.threshold_, self.left_, self.right_, self.value_)

    def staged_mse(self, X, y) -> np.ndarray:
        """Mean squared error on ``(X, y)`` after each round; entry 0 is the constant start."""
        check_is_fitted(self, "init_")
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        return _staged_sq_error(np.ascontiguousarray(X), np.ascontiguousarray(y), self.init_,
                                float(self.learning_rate), self.feature_, self.threshold_,
                                self.left_, self.right_, self.value_)

    def n_cells(self) -> tuple:
        """Number of cells per feature; see :meth:`scatter`."""
        check_is_fitted(self, "init_")
        return tuple(len(u) for u in self.levels_)

    def scatter(self, diff: np.ndarray, weight: float = 1.0) -> None:
        """Add ``weight`` times this model onto a difference array, in place.

        Cell ``c`` on feature ``f`` covers the values ``x`` with
        ``mid[c - 1] < x <= mid[c]``, where ``mid`` are the midpoints between
        consecutive distinct training values, so the model is constant on
        every cell. ``diff`` has shape ``n_cells() + 1`` on every axis;
        :func:`cells_from_diff` turns it into the table of cell values.
        """
        shape = self.n_cells()
        if diff.shape != tuple(k + 1 for k in shape):
            raise ValueError(f"difference array must have shape {tuple(k + 1 for k in shape)}")
        _leaf_boxes_to_diff(self.feature_, self.split_rank_, self.left_, self.right_, self.value_,
                            np.array(shape, dtype=np.int64), diff.reshape(-1),
                            np.array(diff.shape, dtype=np.int64), float(self.learning_rate) * weight)
        diff[(0,) * len(shape)] += weight * self.init_

    def cell_table(self) -> np.ndarray:
        diff = np.zeros(tuple(k + 1 for k in self.n_cells()))
        self.scatter(diff)
        return cells_from_diff(diff)


def cells_from_diff(diff: np.ndarray) -> np.ndarray:
    acc = diff
    for axis in range(diff.ndim):
        acc = np.cumsum(acc, axis=axis)
    return acc[tuple(slice(0, k - 1) for k in diff.shape)]


@njit(cache=True)
def _leaf_boxes_to_diff(feature, split_rank, left, right, value, n_cells, diff, diff_shape, scale):
    """Scatter every leaf's box onto a flattened 1-d or 2-d difference array."""
    d = n_cells.shape[0]
    n_trees, n_nodes = feature.shape
    lo = np.zeros((n_nodes, d), dtype=np.int64)
    hi = np.zeros((n_nodes, d), dtype=np.int64)
    for t in range(n_trees):
        for f in range(d):
            lo[0, f] = 0
            hi[0, f] = n_cells[f]
        stack = np.zeros(n_nodes, dtype=np.int64)
        top = 1
        while top > 0:
            top -= 1
            k = stack[top]
            f = feature[t, k]
            if f < 0:
                v = scale * value[t, k]
                if d == 1:
                    diff[lo[k, 0]] += v
                    diff[hi[k, 0]] -= v
                else:
                    w = diff_shape[1]
                    diff[lo[k, 0] * w + lo[k, 1]] += v
                    diff[lo[k, 0] * w + hi[k, 1]] -= v
                    diff[hi[k, 0] * w + lo[k, 1]] -= v
                    diff[hi[k, 0] * w + hi[k, 1]] += v
                continue
            cut = split_rank[t, k] + 1
            a, b = left[t, k], right[t, k]
            for g in range(d):
                lo[a, g] = lo[k, g]
                hi[a, g] = hi[k, g]
                lo[b, g] = lo[k, g]
                hi[b, g] = hi[k, g]
            hi[a, f] = min(hi[k, f], cut)
            lo[b, f] = max(lo[k, f], cut)
            stack[top] = a
            stack[top + 1] = b
            top += 2


def cell_index(levels: np.ndarray, x) -> np.ndarray:
    """Cell of each value in ``x`` for a feature whose distinct training values are ``levels``."""
    mids = 0.5 * (levels[:-1] + levels[1:])
    return np.searchsorted(mids, np.asarray(x, dtype=float), side="left")
