import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resilience.explain import (
    ShapMatrix,
    beeswarm_export,
    conditional_expectation,
    global_importance,
    interactions_brute_force,
    local_profiles,
    read_beeswarm_csv,
    shap_brute_force,
    shap_interactions,
    shap_matrix,
    shap_permutation_oracle,
    shap_values,
    write_beeswarm_csv,
)
from resilience.gbt import BoostedEnsemble, GbtParams, Tree, fit_gbt


def make_tree(nodes):
    """nodes: list of (feature, threshold, left, right, cover, weight)."""
    f, t, l, r, c, w = (np.array(col) for col in zip(*nodes))
    return Tree(feature=f.astype(np.int64), threshold=t.astype(float), default_left=np.ones(len(f), bool),
                left=l.astype(np.int64), right=r.astype(np.int64), cover=c.astype(float), weight=w.astype(float))


def ens(trees, m, base=0.0):
    return BoostedEnsemble(base_margin=base, trees=tuple(trees), params=GbtParams(), n_features=m)


def leaf(value, cover=1.0):
    return make_tree([(-1, 0, -1, -1, cover, value)])


def stump(feature, a, b, cl=50.0, cr=50.0, thr=0.5):
    return make_tree([(feature, thr, 1, 2, cl + cr, 0), (-1, 0, -1, -1, cl, a), (-1, 0, -1, -1, cr, b)])


def random_ensemble(rng, m, n_trees, depth):
    trees = []
    for _ in range(n_trees):
        nodes = []

        def build(d):
            idx = len(nodes)
            nodes.append(None)
            if d == depth or rng.random() < 0.2:
                cover = float(rng.integers(1, 20))
                nodes[idx] = (-1, 0.0, -1, -1, cover, float(rng.normal()))
                return cover
            f = int(rng.integers(m))
            thr = float(rng.normal())
            lft = build(d + 1)
            li = idx + 1
            ri = len(nodes)
            rgt = build(d + 1)
            nodes[idx] = (f, thr, li, ri, lft + rgt, 0.0)
            return lft + rgt

        build(0)
        t = make_tree(nodes)
        dl = rng.random(t.n_nodes) < 0.5
        trees.append(Tree(t.feature, t.threshold, dl, t.left, t.right, t.cover, t.weight))
    return ens(trees, m, base=float(rng.normal()))


def random_rows(rng, m, n=4):
    X = rng.normal(size=(n, m))
    X[rng.random(X.shape) < 0.15] = np.nan
    return X


def test_conditional_expectation_examples():
    # root on x0 (cover 10), left subtree splits x1 (covers 4/2), right is a leaf (cover 4)
    t = make_tree([(0, 0.0, 1, 4, 10, 0), (1, 0.0, 2, 3, 6, 0), (-1, 0, -1, -1, 4, 1.0),
                   (-1, 0, -1, -1, 2, 4.0), (-1, 0, -1, -1, 4, -2.0)])
    e = ens([t], 2)
    row = [-1.0, 5.0]
    assert conditional_expectation(e, row, [0]) == pytest.approx((4 * 1.0 + 2 * 4.0) / 6)
    assert conditional_expectation(e, row, []) == pytest.approx((4 * 1.0 + 2 * 4.0 + 4 * -2.0) / 10)
    assert conditional_expectation(e, row, [0, 1]) == e.predict_margin(np.array([row]))[0]


def test_full_subset_equals_margin_exactly():
    rng = np.random.default_rng(0)
    e = random_ensemble(rng, 5, 6, 4)
    for row in random_rows(rng, 5, 20):
        assert conditional_expectation(e, row, range(5)) == e.predict_margin(row[None, :])[0]


def test_single_leaf_and_stump():
    phi0, phi = shap_values(ens([leaf(0.8)], 3), [1.0, 2.0, 3.0])
    assert phi0 == 0.8 and np.all(phi == 0)
    a, b = 0.4, -1.0
    phi0, phi = shap_values(ens([stump(1, a, b)], 3), [9.0, 0.0, 9.0])
    assert phi0 == pytest.approx((a + b) / 2)
    assert phi[1] == pytest.approx((a - b) / 2)
    assert phi[0] == 0 and phi[2] == 0


def test_random_ensembles_match_brute_force():
    rng = np.random.default_rng(1)
    cases = 0
    while cases < 200:
        m = int(rng.integers(1, 9))
        e = random_ensemble(rng, m, int(rng.integers(1, 11)), int(rng.integers(1, 5)))
        X = random_rows(rng, m, 3)
        s = shap_matrix(e, X)
        np.testing.assert_allclose(s.values, shap_brute_force(e, X), atol=1e-10)
        np.testing.assert_allclose(s.base_value + s.values.sum(axis=1), e.predict_margin(X), atol=1e-8)
        cases += len(X)


def test_depth3_m6_example():
    rng = np.random.default_rng(2)
    e = random_ensemble(rng, 6, 8, 3)
    X = random_rows(rng, 6, 10)
    np.testing.assert_allclose(shap_matrix(e, X).values, shap_brute_force(e, X), atol=1e-10)


def test_permutation_form_equals_subset_form():
    rng = np.random.default_rng(3)
    e = random_ensemble(rng, 5, 4, 3)
    X = random_rows(rng, 5, 5)
    np.testing.assert_allclose(shap_permutation_oracle(e, X), shap_brute_force(e, X), atol=1e-12)


def test_constant_model_and_dummy_feature():
    e = ens([leaf(0.3), leaf(-0.1)], 3, base=0.2)
    assert np.all(shap_brute_force(e, np.ones((2, 3))) == 0)
    rng = np.random.default_rng(4)
    e = ens([stump(0, 1, 2), stump(2, -1, 1)], 4)
    s = shap_matrix(e, random_rows(rng, 4, 10))
    assert np.all(s.values[:, [1, 3]] == 0)


def test_ensemble_linearity():
    rng = np.random.default_rng(5)
    a, b = random_ensemble(rng, 4, 1, 3), random_ensemble(rng, 4, 1, 3)
    both = ens(a.trees + b.trees, 4)
    X = random_rows(rng, 4, 6)
    np.testing.assert_allclose(shap_matrix(both, X).values,
                               shap_matrix(a, X).values + shap_matrix(b, X).values, atol=1e-12)


def test_brute_force_feature_limit():
    with pytest.raises(ValueError):
        shap_brute_force(ens([leaf(0.0)], 16), np.zeros((1, 16)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_additivity_on_fitted_models(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 4))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (rng.random(120) < 0.5).astype(float)
    y[0], y[1] = 0, 1
    e = fit_gbt(X, y, GbtParams(n_estimators=4, max_depth=3, min_child_hessian=0.5, learning_rate=0.5))
    s = shap_matrix(e, X)
    assert np.max(np.abs(s.base_value + s.values.sum(axis=1) - e.predict_margin(X))) < 1e-8


# interactions


def test_additive_model_has_no_interactions():
    e = ens([stump(0, 1, -1), stump(1, 0.5, 2)], 2)
    I = shap_interactions(e, np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]))
    for mat in I.values:
        assert abs(mat[0, 1]) < 1e-10 and abs(mat[1, 0]) < 1e-10


def test_xor_interaction_dominates():
    rng = np.random.default_rng(6)
    X = rng.integers(0, 2, size=(400, 2)).astype(float)
    y = (X[:, 0] != X[:, 1]).astype(float)
    e = fit_gbt(X, y, GbtParams(n_estimators=30, max_depth=2, learning_rate=0.3))
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    I = shap_interactions(e, pts)
    np.testing.assert_allclose(I.values, interactions_brute_force(e, pts), atol=1e-10)
    for mat in I.values:
        assert abs(mat[0, 1]) > 0
        assert abs(mat[0, 1]) > abs(mat[0, 0]) and abs(mat[0, 1]) > abs(mat[1, 1])


def test_interactions_match_oracle_symmetric_and_sum_to_phi():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m = int(rng.integers(2, 6))
        e = random_ensemble(rng, m, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        X = random_rows(rng, m, 3)
        I = shap_interactions(e, X)
        np.testing.assert_allclose(I.values, interactions_brute_force(e, X), atol=1e-10)
        np.testing.assert_allclose(I.values, np.transpose(I.values, (0, 2, 1)), atol=1e-8)
        np.testing.assert_allclose(I.values.sum(axis=2), shap_matrix(e, X).values, atol=1e-8)


def test_interaction_row_csv(tmp_path):
    e = ens([stump(0, 1, -1)], 2)
    I = shap_interactions(e, np.zeros((1, 2)), row_keys=["r0"])
    I.row_to_csv(0, tmp_path / "i.csv")
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "feature,x0,x1" and len(lines) == 3


# summaries


def matrix(values, names=None):
    values = np.asarray(values, float)
    names = names or tuple(f"f{i}" for i in range(values.shape[1]))
    return ShapMatrix(0.0, values, tuple(str(i) for i in range(len(values))), tuple(names))


def test_importance_ranking():
    s = matrix([[0.3, 0.1, 0.0], [0.3, 0.5, 0.0]])
    r = global_importance(s)
    assert [name for name, _ in r.top()] == ["f0", "f1", "f2"]
    assert r.mean_abs[0] == r.mean_abs[1] == pytest.approx(0.3)
    single = global_importance(matrix([[0.1, -0.7, 0.3]]))
    assert [n for n, _ in single.top()] == ["f1", "f2", "f0"]
    assert len(global_importance(s, top_n=2).top()) == 2
    with pytest.raises(ValueError):
        global_importance(matrix(np.zeros((0, 2))))


def test_unused_feature_ranked_last():
    rng = np.random.default_rng(8)
    e = ens([stump(0, 1, -1), stump(2, 0.3, -0.3)], 3)
    r = global_importance(shap_matrix(e, rng.normal(size=(30, 3))))
    assert r.order[-1] == 1 and r.mean_abs[1] == 0


def test_beeswarm_colors_and_round_trip(tmp_path):
    X = np.array([[1.0, 0.0, 3.0], [1.0, 1.0, np.nan], [1.0, 1.0, 5.0]])
    s = matrix(np.arange(9).reshape(3, 3) / 7, ("c", "b", "x"))
    recs = beeswarm_export(s, X, ["c", "b", "x"])
    assert {r.color for r in recs if r.feature == "c"} == {0.5}
    assert {r.color for r in recs if r.feature == "b"} == {0.0, 1.0}
    miss = [r for r in recs if r.feature == "x" and r.missing]
    assert len(miss) == 1 and math.isnan(miss[0].color)
    write_beeswarm_csv(recs, tmp_path / "b.csv")
    back = read_beeswarm_csv(tmp_path / "b.csv")
    for a, b in zip(recs, back):
        assert a.row_key == b.row_key and a.feature == b.feature and a.missing == b.missing
        assert a.jitter_seed == b.jitter_seed
        for x, y in ((a.shap, b.shap), (a.value, b.value), (a.color, b.color)):
            assert (math.isnan(x) and math.isnan(y)) or x == y
    with pytest.raises(KeyError):
        beeswarm_export(s, X, ["nope"])


def test_local_profiles():
    rng = np.random.default_rng(9)
    e = random_ensemble(rng, 4, 5, 3)
    X = random_rows(rng, 4, 30)
    s = shap_matrix(e, X)
    prof = local_profiles(s, X, top_k=2)
    assert prof.max_profile.row == int(np.argmax(e.predict_margin(X)))
    assert prof.min_profile.row == int(np.argmin(e.predict_margin(X)))
    assert len(prof.max_profile.contributions) == 2
    one = local_profiles(matrix([[0.2, -0.1]]), np.zeros((1, 2)))
    assert one.max_profile.row == one.min_profile.row == 0


def test_shap_csv_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    e = random_ensemble(rng, 3, 3, 2)
    s = shap_matrix(e, random_rows(rng, 3, 5), row_keys=list("abcde"))
    s.to_csv(tmp_path / "s.csv")
    back = ShapMatrix.read_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, s.values)
    assert back.base_value == s.base_value and back.row_keys == s.row_keys
