import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gwclass.errors import ConfigError, DataError, DegenerateLabelsError
from gwclass.forest import ForestParams, derive_seed, fit_forest, predict_forest, _splitmix


def gini(y, C):
    if len(y) == 0:
        return 0.0
    q = np.bincount(y, minlength=C) / len(y)
    return 1 - np.sum(q * q)


def brute_best_split(x, y, C):
    """Exhaustive search over midpoints; returns (threshold, impurity)."""
    best = (None, np.inf)
    xs = np.unique(x)
    for a, b in zip(xs[:-1], xs[1:]):
        thr = (a + b) / 2
        left, right = y[x <= thr], y[x > thr]
        imp = (len(left) * gini(left, C) + len(right) * gini(right, C)) / len(y)
        if imp < best[1] - 1e-15:
            best = (thr, imp)
    return best


def optimal_thresholds(x, y, C, imp):
    xs = np.unique(x)
    out = []
    for thr in (xs[:-1] + xs[1:]) / 2:
        left, right = y[x <= thr], y[x > thr]
        if abs((len(left) * gini(left, C) + len(right) * gini(right, C)) / len(y) - imp) < 1e-12:
            out.append(thr)
    return out


def test_step_data_perfect():
    x = np.linspace(-1, 1, 40).reshape(-1, 1)
    y = (x[:, 0] > 0).astype(int)
    m = fit_forest(x, y, params=ForestParams(n_trees=25, seed=1))
    assert np.all(predict_forest(m, x).argmax(axis=1) == y)


def test_zero_weight_on_class_one():
    y = np.array([0, 0, 1, 1])
    with pytest.raises(DegenerateLabelsError):
        fit_forest(np.arange(4.0), y, w=np.array([1.0, 1.0, 0.0, 0.0]))


def test_four_point_stump_matches_exhaustive_search():
    x = np.array([0.0, 1.0, 3.0, 7.0])
    y = np.array([0, 0, 1, 0])
    m = fit_forest(x, y, params=ForestParams(n_trees=1, max_depth=1, bootstrap=False))
    thr, _ = brute_best_split(x, y, 2)
    assert m.feature[0] == 0
    assert m.threshold[0] == thr


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 40), st.integers(2, 4), st.integers(0, 100_000))
def test_root_split_matches_oracle(n, C, seed):
    rng = np.random.default_rng(seed)
    x = np.round(rng.standard_normal(n), 1)
    y = rng.integers(0, C, n)
    if len(np.unique(y)) < 2 or len(np.unique(x)) < 2:
        return
    m = fit_forest(x, y, params=ForestParams(n_trees=1, max_depth=1, bootstrap=False),
                   n_classes=C)
    thr, imp = brute_best_split(x, y, C)
    assert m.feature[0] == 0
    left = y[x <= m.threshold[0]]
    right = y[x > m.threshold[0]]
    got = (len(left) * gini(left, C) + len(right) * gini(right, C)) / n
    assert got == pytest.approx(imp, abs=1e-12)
    assert m.threshold[0] in optimal_thresholds(x, y, C, imp)


def test_children_impurity_never_exceeds_parent():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 4))
    y = (X[:, 0] + X[:, 1] ** 2 + 0.5 * rng.standard_normal(300) > 1).astype(int) \
        + (X[:, 2] > 1)
    m = fit_forest(X, y, params=ForestParams(n_trees=10, seed=3))
    C = m.n_classes
    for node in np.flatnonzero(m.feature >= 0):
        l, r = m.left[node], m.right[node]
        g = lambda v: 1 - np.sum(v ** 2)
        children = (m.n_node[l] * g(m.value[l]) + m.n_node[r] * g(m.value[r])) / m.n_node[node]
        assert children <= g(m.value[node]) + 1e-12
        assert np.isfinite(m.threshold[node])
    leaves = m.feature < 0
    np.testing.assert_allclose(m.value[leaves].sum(axis=1), 1, atol=1e-12)
    assert C == 3


def test_single_tree_prediction_is_leaf_distribution():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((50, 2))
    y = (X[:, 0] > 0).astype(int)
    m = fit_forest(X, y, params=ForestParams(n_trees=1, max_depth=2, seed=9))
    P = predict_forest(m, X)
    for i in range(50):
        node = 0
        while m.feature[node] >= 0:
            node = m.left[node] if X[i, m.feature[node]] <= m.threshold[node] else m.right[node]
        np.testing.assert_array_equal(P[i], m.value[node])


def test_identical_trees_without_bootstrap():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((60, 2))
    y = (X.sum(axis=1) > 0).astype(int)
    # mtry = p removes the only other source of randomness
    params = ForestParams(n_trees=7, bootstrap=False, mtry=2)
    one = ForestParams(n_trees=1, bootstrap=False, mtry=2)
    np.testing.assert_allclose(predict_forest(fit_forest(X, y, params=params), X),
                               predict_forest(fit_forest(X, y, params=one), X), atol=1e-12)


def test_blobs_held_out_accuracy():
    rng = np.random.default_rng(4)
    centres = np.array([[0, 0], [4, 4], [0, 4]])
    y_tr = rng.integers(0, 3, 300)
    y_te = rng.integers(0, 3, 300)
    X_tr = centres[y_tr] + rng.standard_normal((300, 2)) * 0.6
    X_te = centres[y_te] + rng.standard_normal((300, 2)) * 0.6
    m = fit_forest(X_tr, y_tr, params=ForestParams(n_trees=500, seed=0))
    P = predict_forest(m, X_te)
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-9)
    assert np.mean(P.argmax(axis=1) == y_te) >= 0.95


def test_refit_is_deterministic():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((80, 3))
    y = rng.integers(0, 2, 80)
    w = rng.uniform(0, 1, 80)
    a = fit_forest(X, y, w, ForestParams(n_trees=20, seed=11))
    b = fit_forest(X, y, w, ForestParams(n_trees=20, seed=11))
    np.testing.assert_array_equal(predict_forest(a, X), predict_forest(b, X))
    c = fit_forest(X, y, w, ForestParams(n_trees=20, seed=12))
    assert not np.array_equal(predict_forest(a, X), predict_forest(c, X))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000), st.randoms())
def test_row_order_invariant_with_keys(seed, rnd):
    rng = np.random.default_rng(seed)
    n = 40
    X = rng.standard_normal((n, 3))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    w = rng.uniform(0, 1, n)
    keys = np.array([f"u{i:03d}" for i in range(n)])
    perm = list(range(n))
    rnd.shuffle(perm)
    params = ForestParams(n_trees=10, seed=seed)
    a = fit_forest(X, y, w, params, row_keys=keys)
    b = fit_forest(X[perm], y[perm], w[perm], params, row_keys=keys[perm])
    np.testing.assert_array_equal(predict_forest(a, X), predict_forest(b, X))


def test_zero_weight_rows_never_sampled():
    X = np.array([[0.0], [1.0], [2.0], [3.0], [100.0]])
    y = np.array([0, 0, 1, 1, 0])
    w = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    m = fit_forest(X, y, w, ForestParams(n_trees=30, seed=2))
    # the zero-weight outlier would otherwise create a split far to the right
    assert np.all(m.threshold[m.feature >= 0] < 3.0)


def test_derive_seed_matches_compiled():
    for seed, t in [(0, 0), (1, 5), (2**40 + 3, 99)]:
        assert derive_seed(seed, t) == int(_splitmix(np.uint64(seed), t))
    assert len({derive_seed(7, t) for t in range(1000)}) == 1000


def test_params_validation():
    with pytest.raises(ConfigError):
        ForestParams(n_trees=0)
    with pytest.raises(ConfigError):
        fit_forest(np.zeros((4, 2)) + np.arange(4)[:, None], [0, 1, 0, 1],
                   params=ForestParams(mtry=3))
    assert ForestParams().resolve_mtry(10) == 4


def test_predict_dimension_mismatch():
    m = fit_forest(np.arange(6.0).reshape(3, 2), [0, 1, 1], params=ForestParams(n_trees=2))
    with pytest.raises(DataError):
        predict_forest(m, np.zeros((2, 3)))
