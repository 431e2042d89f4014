import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentmal.dataio import SplitSpec, SyntheticSpec, generate_synthetic, split
from latentmal.errors import PreconditionError, ShapeError
from latentmal.tree_models import (
    DecisionTreeModel,
    ForestParams,
    GbdtModel,
    GbdtParams,
    RandomForestModel,
    Tree,
    TreeParams,
    gbdt_decision_function,
    predict_proba,
    train_decision_tree,
    train_gbdt,
    train_random_forest,
)


def leaf(value):
    return Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                np.array([float(value)]))


def gini_decrease(y_parent, y_left, y_right):
    def gini(v):
        if len(v) == 0:
            return 0.0
        p = sum(v) / len(v)
        return 1.0 - p * p - (1 - p) * (1 - p)
    n = len(y_parent)
    return gini(y_parent) - len(y_left) / n * gini(y_left) - len(y_right) / n * gini(y_right)


def exhaustive_best(x, y):
    """Every (feature, midpoint) candidate, brute force."""
    cands = []
    for f in range(x.shape[1]):
        u = sorted(set(x[:, f].tolist()))
        for a, b in zip(u, u[1:]):
            thr = (a + b) / 2
            mask = x[:, f] <= thr
            cands.append((gini_decrease(y.tolist(), y[mask].tolist(), y[~mask].tolist()), f, thr))
    return cands


def node_rows(tree, x):
    """Map node id -> training row indices that pass through it."""
    rows = {}
    for i in range(x.shape[0]):
        node = 0
        while True:
            rows.setdefault(node, []).append(i)
            f = tree.feature[node]
            if f < 0:
                break
            node = tree.left[node] if x[i, f] <= tree.threshold[node] else tree.right[node]
    return rows


def accuracy(model, x, y):
    return float(((predict_proba(model, x) >= 0.5) == y).mean())


@pytest.fixture(scope="module")
def separable():
    ds = generate_synthetic(SyntheticSpec(n_samples=2000, feature_dim=20, n_informative=8,
                                          class_separation=3.0), seed=11)
    return split(ds, SplitSpec(0.5, 0.5, 0.0, seed=3))


# -- decision tree -----------------------------------------------------------

def test_pure_node_is_single_leaf():
    m = train_decision_tree(np.arange(6.0).reshape(3, 2), [1, 1, 1])
    assert m.tree.n_nodes == 1
    assert m.tree.value[0] == 1.0


def test_forced_split_midpoint():
    m = train_decision_tree([[1.0], [2.0], [3.0], [4.0]], [0, 0, 1, 1])
    t = m.tree
    assert t.n_nodes == 3
    assert t.feature[0] == 0 and t.threshold[0] == 2.5
    assert sorted(t.value[1:].tolist()) == [0.0, 1.0]


def test_xor_depth_two_and_exhaustive_split():
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    y = np.array([0, 1, 1, 0])
    m = train_decision_tree(x, y)
    assert m.tree.depth() == 2
    assert accuracy(m, x, y) == 1.0
    # root split has zero gain on XOR; ties resolve to feature 0
    assert m.tree.feature[0] == 0 and m.tree.threshold[0] == 0.5
    for node, rows in node_rows(m.tree, x).items():
        if m.tree.feature[node] >= 0:
            best = max(c[0] for c in exhaustive_best(x[rows], y[rows]))
            assert m.tree.gain[node] == pytest.approx(best, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 64), st.integers(1, 4), st.integers(0, 2**31))
def test_gini_split_is_exhaustive_maximum(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, size=(n, d)).astype(float)
    y = rng.integers(0, 2, size=n)
    m = train_decision_tree(x, y)
    for node, rows in node_rows(m.tree, x).items():
        f = m.tree.feature[node]
        cands = exhaustive_best(x[rows], y[rows])
        if f < 0:
            # leaves are pure or have no candidate split left
            assert len(set(y[rows].tolist())) == 1 or not cands
            continue
        best = max(c[0] for c in cands)
        assert m.tree.gain[node] == pytest.approx(best, abs=1e-12)
        ties = [c for c in cands if abs(c[0] - best) <= 1e-12]
        want = min(ties, key=lambda c: (c[1], c[2]))
        assert (f, m.tree.threshold[node]) == (want[1], want[2])


def test_every_training_row_reaches_one_leaf():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    y = (x[:, 0] + rng.normal(size=200) > 0).astype(int)
    m = train_decision_tree(x, y)
    leaves = m.tree.apply(x)
    assert np.all(m.tree.feature[leaves] == -1)
    # unlimited depth on distinct values fits the training data exactly
    assert accuracy(m, x, y) == 1.0


def test_max_depth_and_min_leaf_respected():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 4))
    y = rng.integers(0, 2, size=300)
    m = train_decision_tree(x, y, TreeParams(max_depth=3, min_samples_leaf=10))
    assert m.tree.depth() <= 3
    assert m.tree.n_node_samples[m.tree.feature < 0].min() >= 10


def test_tree_rejects_bad_input():
    with pytest.raises(PreconditionError):
        train_decision_tree(np.empty((0, 2)), [])
    with pytest.raises(PreconditionError):
        train_decision_tree([[1.0], [2.0]], [0, 2])
    m = train_decision_tree([[1.0], [2.0]], [0, 1])
    with pytest.raises(ShapeError):
        predict_proba(m, np.ones((2, 3)))


def test_preorder_round_trip():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3))
    y = (x[:, 1] > 0.2).astype(int) ^ (x[:, 2] > 0).astype(int)
    t = train_decision_tree(x, y).tree
    back = Tree.from_preorder(list(t.preorder()))
    assert back.n_nodes == t.n_nodes
    np.testing.assert_array_equal(back.predict(x), t.predict(x))
    assert list(back.preorder()) == list(t.preorder())


# -- forest ------------------------------------------------------------------

def test_single_tree_forest_degenerates_to_tree():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(150, 5))
    y = (x[:, 0] * x[:, 1] > 0).astype(int)
    rf = train_random_forest(x, y, ForestParams(n_trees=1, bootstrap=False, max_features=None))
    dt = train_decision_tree(x, y)
    probe = rng.normal(size=(500, 5))
    np.testing.assert_array_equal(predict_proba(rf, probe), predict_proba(dt, probe))


def test_forest_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(120, 6))
    y = (x.sum(axis=1) > 0).astype(int)
    a = train_random_forest(x, y, ForestParams(n_trees=7, seed=9))
    b = train_random_forest(x, y, ForestParams(n_trees=7, seed=9))
    c = train_random_forest(x, y, ForestParams(n_trees=7, seed=10))
    for ta, tb in zip(a.trees, b.trees):
        assert list(ta.tree.preorder()) == list(tb.tree.preorder())
    assert any(list(ta.tree.preorder()) != list(tc.tree.preorder())
               for ta, tc in zip(a.trees, c.trees))


def test_forest_probability_is_mean_of_tree_leaves():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 4))
    y = (x[:, 0] > 0).astype(int)
    rf = train_random_forest(x, y, ForestParams(n_trees=5, seed=1))
    probe = rng.normal(size=(50, 4))
    members = np.array([t.tree.predict(probe) for t in rf.trees])
    np.testing.assert_allclose(predict_proba(rf, probe), members.mean(axis=0), rtol=0, atol=1e-15)


def test_two_tree_forest_averages():
    rf = RandomForestModel([DecisionTreeModel(leaf(0.0), 2), DecisionTreeModel(leaf(1.0), 2)], 2)
    assert predict_proba(rf, np.zeros((3, 2))).tolist() == [0.5, 0.5, 0.5]


def test_single_leaf_tree_probability():
    assert predict_proba(DecisionTreeModel(leaf(1.0), 3), np.zeros((4, 3))).tolist() == [1.0] * 4


def test_forest_separable_accuracy(separable):
    train, test, _ = separable
    rf = train_random_forest(train.features, train.labels, ForestParams(seed=42))
    assert accuracy(rf, test.features, test.labels) >= 0.95


def test_max_features_resolution():
    assert ForestParams().resolve_max_features(512) == 22
    assert ForestParams().resolve_max_features(32) == 5
    assert ForestParams(max_features=None).resolve_max_features(7) == 7


# -- gbdt --------------------------------------------------------------------

def test_gbdt_zero_trees_is_base_rate():
    y = np.array([1, 0, 0, 1, 1, 1, 0, 1])
    m = train_gbdt(np.arange(8.0).reshape(8, 1), y, GbdtParams(n_iterations=0))
    p = predict_proba(m, np.zeros((1, 1)))[0]
    assert abs(p - y.mean()) < 1e-12


def test_gbdt_constant_labels_are_degenerate():
    x = np.random.default_rng(0).normal(size=(100, 3))
    m = train_gbdt(x, np.ones(100, dtype=int), GbdtParams(n_iterations=5))
    assert all(t.n_nodes == 1 for t in m.trees)
    np.testing.assert_allclose(predict_proba(m, x), 1.0, atol=1e-12)


def test_gbdt_hand_gain_and_leaves():
    x = np.arange(1.0, 7.0).reshape(6, 1)
    y = np.array([0, 0, 0, 1, 1, 1])
    m = train_gbdt(x, y, GbdtParams(n_iterations=1, max_leaves=2, min_samples_leaf=1,
                                    learning_rate=1.0, l2_reg=1.0))
    t = m.trees[0]
    # base rate 0.5: g = 0.5 - y, h = 0.25; best cut between 3 and 4
    gl, hl, gr, hr, lam = 1.5, 0.75, -1.5, 0.75, 1.0
    gain = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - (gl + gr) ** 2 / (hl + hr + lam))
    assert m.initial_score == 0.0
    assert t.feature[0] == 0 and t.threshold[0] == 3.5
    assert t.gain[0] == pytest.approx(gain, abs=1e-9)
    assert t.value[t.left[0]] == pytest.approx(-gl / (hl + lam), abs=1e-9)
    assert t.value[t.right[0]] == pytest.approx(-gr / (hr + lam), abs=1e-9)
    raw = gbdt_decision_function(m, np.array([[2.0], [5.0]]))
    np.testing.assert_allclose(raw, [-gl / (hl + lam), -gr / (hr + lam)], atol=1e-12)


def test_gbdt_respects_max_leaves():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2000, 5))
    y = (np.sin(3 * x[:, 0]) + x[:, 1] > 0).astype(int)
    m = train_gbdt(x, y, GbdtParams(n_iterations=3, max_leaves=7))
    assert all(t.n_leaves <= 7 for t in m.trees)
    assert m.trees[0].n_leaves == 7


def test_gbdt_loss_descends(separable):
    train, _, _ = separable
    x, y = train.features, train.labels
    m = train_gbdt(x, y, GbdtParams(n_iterations=10))

    def loss(k):
        p = 1 / (1 + np.exp(-gbdt_decision_function(m, x, n_trees=k)))
        return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))

    losses = [loss(k) for k in range(11)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_gbdt_separable_accuracy(separable):
    train, test, _ = separable
    m = train_gbdt(train.features, train.labels)
    assert accuracy(m, test.features, test.labels) >= 0.95


def test_gbdt_deterministic_with_feature_fraction():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(300, 6))
    y = (x[:, 0] + x[:, 3] > 0).astype(int)
    p = GbdtParams(n_iterations=5, feature_fraction=0.5, seed=4)
    a, b = train_gbdt(x, y, p), train_gbdt(x, y, p)
    np.testing.assert_array_equal(predict_proba(a, x), predict_proba(b, x))


def test_gbdt_probabilities_in_unit_interval(separable):
    train, test, _ = separable
    m = train_gbdt(train.features, train.labels, GbdtParams(n_iterations=20))
    p = predict_proba(m, test.features)
    assert p.min() >= 0.0 and p.max() <= 1.0
