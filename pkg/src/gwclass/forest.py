"""Random forest classifier with kernel-weighted bootstrap.

Sample weights enter only through the bootstrap: each tree is grown on
``n`` rows drawn with probability proportional to the weights, and splits
are chosen by plain (count-based) Gini impurity on that resample.
Tree seeds are a counter hash of the forest seed and the tree index, so a
forest is reproducible regardless of how trees are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from .errors import ConfigError, DataError, DegenerateLabelsError

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    mtry: int | None = None
    min_leaf_weight: float = 1.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be >= 1")
        if self.min_leaf_weight <= 0:
            raise ConfigError("min_leaf_weight must be positive")

    def resolve_mtry(self, p: int) -> int:
        mtry = math.ceil(math.sqrt(p)) if self.mtry is None else self.mtry
        if mtry > p:
            raise ConfigError(f"mtry={mtry} exceeds the {p} available features")
        return mtry


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Trees stored as flat node arrays; tree ``t`` starts at ``offsets[t]``.

    Child pointers are absolute node indices; ``feature == -1`` marks a leaf.
    ``value`` holds class frequencies for every node, ``n_node`` the number
    of resampled rows that reached it.
    """

    params: ForestParams
    n_classes: int
    n_features: int
    mtry: int
    offsets: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.offsets) - 1

    def tree_nodes(self, t: int) -> range:
        return range(self.offsets[t], self.offsets[t + 1])

    def summary(self) -> dict:
        d = asdict(self.params)
        d.update(n_classes=self.n_classes, n_features=self.n_features, mtry=self.mtry,
                 n_nodes=int(self.offsets[-1]))
        return d


def derive_seed(seed: int, counter: int) -> int:
    """SplitMix64 hash of ``(seed, counter)``."""
    z = (int(seed) * 0x9E3779B97F4A7C15 + (int(counter) + 1) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@njit(cache=True, nogil=True)
def _splitmix(seed, counter):
    z = np.uint64(seed) * np.uint64(0x9E3779B97F4A7C15) + \
        (np.uint64(counter) + np.uint64(1)) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, nogil=True)
def _gini(counts, total):
    if total <= 0:
        return 0.0
    s = 0.0
    for c in range(counts.shape[0]):
        q = counts[c] / total
        s += q * q
    return 1.0 - s


@njit(cache=True, nogil=True)
def _grow_tree(X, y, rows, n_classes, max_depth, min_leaf_weight, mtry,
               feature, threshold, left, right, value, n_node, base):
    """Grow one tree on the resampled ``rows``; returns the node count."""
    n = rows.shape[0]
    p = X.shape[1]
    idx = rows.copy()
    stack_node = np.empty(2 * n + 2, np.int64)
    stack_start = np.empty(2 * n + 2, np.int64)
    stack_end = np.empty(2 * n + 2, np.int64)
    stack_depth = np.empty(2 * n + 2, np.int64)
    counts = np.zeros(n_classes)
    lcounts = np.zeros(n_classes)
    vals = np.empty(n)
    labs = np.empty(n, np.int64)
    order_f = np.arange(p)

    n_nodes = 1
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n
    stack_depth[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        m = end - start
        counts[:] = 0.0
        for i in range(start, end):
            counts[y[idx[i]]] += 1.0
        for c in range(n_classes):
            value[base + node, c] = counts[c] / m
        n_node[base + node] = m
        feature[base + node] = -1
        left[base + node] = -1
        right[base + node] = -1
        threshold[base + node] = 0.0

        parent = _gini(counts, m)
        if depth >= max_depth or m < 2.0 * min_leaf_weight or parent <= 0.0:
            continue

        best_imp = np.inf
        best_f = -1
        best_thr = 0.0
        # random feature order; keep drawing until mtry non-constant
        # features have been evaluated
        for j in range(p):
            order_f[j] = j
        tried = 0
        for j in range(p):
            if tried >= mtry:
                break
            r = j + np.random.randint(p - j)
            tmp = order_f[j]
            order_f[j] = order_f[r]
            order_f[r] = tmp
            f = order_f[j]
            for i in range(m):
                vals[i] = X[idx[start + i], f]
            srt = np.argsort(vals[:m])
            if vals[srt[0]] == vals[srt[m - 1]]:
                continue
            tried += 1
            for i in range(m):
                labs[i] = y[idx[start + srt[i]]]
            lcounts[:] = 0.0
            for i in range(m - 1):
                lcounts[labs[i]] += 1.0
                nl = i + 1.0
                nr = m - nl
                v0 = vals[srt[i]]
                v1 = vals[srt[i + 1]]
                if v0 == v1 or nl < min_leaf_weight or nr < min_leaf_weight:
                    continue
                gl = 0.0
                gr = 0.0
                for c in range(n_classes):
                    a = lcounts[c]
                    b = counts[c] - a
                    gl += a * a
                    gr += b * b
                imp = (nl - gl / nl + nr - gr / nr) / m
                if imp < best_imp or (imp == best_imp and f < best_f):
                    best_imp = imp
                    best_f = f
                    thr = 0.5 * (v0 + v1)
                    if thr >= v1:
                        thr = v0
                    best_thr = thr
        if best_f < 0 or best_imp > parent:
            continue

        # partition rows: left gets x <= threshold
        i = start
        k = end - 1
        while i <= k:
            if X[idx[i], best_f] <= best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[k]
                idx[k] = tmp
                k -= 1
        feature[base + node] = best_f
        threshold[base + node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[base + node] = base + lnode
        right[base + node] = base + rnode
        stack_node[top] = rnode
        stack_start[top] = i
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = i
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes


@njit(cache=True, nogil=True)
def _fit_forest(X, y, w, n_classes, n_trees, max_depth, min_leaf_weight, mtry,
                bootstrap, seed):
    n = X.shape[0]
    cap = 2 * n + 1
    feature = np.empty(n_trees * cap, np.int64)
    threshold = np.empty(n_trees * cap)
    left = np.empty(n_trees * cap, np.int64)
    right = np.empty(n_trees * cap, np.int64)
    value = np.empty((n_trees * cap, n_classes))
    n_node = np.empty(n_trees * cap)
    offsets = np.zeros(n_trees + 1, np.int64)

    cdf = np.cumsum(w)
    total = cdf[n - 1]
    positive = 0
    for i in range(n):
        if w[i] > 0:
            positive += 1
    rows_all = np.empty(positive, np.int64)
    k = 0
    for i in range(n):
        if w[i] > 0:
            rows_all[k] = i
            k += 1

    for t in range(n_trees):
        s = _splitmix(seed, t)
        np.random.seed(np.int64(s & np.uint64(0xFFFFFFFF)))
        if bootstrap:
            rows = np.empty(n, np.int64)
            for i in range(n):
                u = np.random.random() * total
                j = np.searchsorted(cdf, u, side="right")
                if j >= n:
                    j = n - 1
                while w[j] <= 0 and j > 0:
                    j -= 1
                rows[i] = j
            rows.sort()
        else:
            rows = rows_all
        used = _grow_tree(X, y, rows, n_classes, max_depth, min_leaf_weight, mtry,
                          feature, threshold, left, right, value, n_node, offsets[t])
        offsets[t + 1] = offsets[t] + used
    end = offsets[n_trees]
    return (offsets, feature[:end].copy(), threshold[:end].copy(), left[:end].copy(),
            right[:end].copy(), value[:end].copy(), n_node[:end].copy())


@njit(cache=True, nogil=True)
def _predict(X, offsets, feature, threshold, left, right, value):
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros((n, value.shape[1]))
    for i in range(n):
        for t in range(n_trees):
            node = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] += value[node]
        out[i] /= n_trees
    return out


def _check(X, y, w):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if X.shape[0] != len(y) or len(w) != len(y):
        raise DataError("X, y and w must have the same number of rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("sample weights must be finite and non-negative")
    if not np.all(np.isfinite(X)):
        raise DataError("X must be finite")
    return X, y, w


def fit_forest(X, y, w=None, params: ForestParams = ForestParams(),
               n_classes: int | None = None, row_keys=None) -> ForestModel:
    """Fit a random forest.

    ``row_keys`` (e.g. unit ids) put rows in a canonical order before
    resampling, which makes the fit independent of input row order.
    """
    X, y, w = _check(X, y, w)
    if row_keys is not None:
        order = np.argsort(np.asarray(row_keys), kind="stable")
        X, y, w = X[order], y[order], w[order]
    if y.size and y.min() < 0:
        raise DataError("labels must be non-negative class indices")
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.size and y.max() >= C:
        raise DataError("label outside 0..n_classes-1")
    if len(np.unique(y[w > 0])) < 2:
        raise DegenerateLabelsError("fewer than two classes among positively weighted rows")
    p = X.shape[1]
    mtry = params.resolve_mtry(p)
    arrays = _fit_forest(X, y, w, C, params.n_trees, params.max_depth,
                         float(params.min_leaf_weight), mtry, params.bootstrap,
                         np.uint64(params.seed & _MASK64))
    return ForestModel(params, C, p, mtry, *arrays)


def predict_forest(model: ForestModel, X) -> np.ndarray:
    """Mean of the trees' leaf class distributions."""
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if model.n_features > 1 else X.reshape(-1, 1)
    if X.shape[1] != model.n_features:
        raise DataError(f"model has {model.n_features} features, X has {X.shape[1]}")
    return _predict(X, model.offsets, model.feature, model.threshold, model.left,
                    model.right, model.value)
