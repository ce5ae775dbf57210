import json
import math

import numpy as np
import pytest

from resilience.dataset import stratified_undersampled_folds
from resilience.gbt import (
    BoostedEnsemble,
    GbtParams,
    Tree,
    fit_gbt,
    grid_search,
    predict,
    split_gain,
)
from resilience.linear import LinearParams, fit_penalized_logit
from resilience.metrics import auroc


def xor_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(n, 2)).astype(float)
    return X, (X[:, 0] != X[:, 1]).astype(float)


def noisy_data(n=500, m=4, seed=1, missing=0.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    margin = X[:, 0] ** 2 - 1 + X[:, 1] * (X[:, 2] > 0)
    y = (rng.random(n) < 1 / (1 + np.exp(-2 * margin))).astype(float)
    if missing:
        X[rng.random(X.shape) < missing] = np.nan
    return X, y


def stump(feature=0, threshold=0.5, default_left=True, wl=-0.3, wr=0.7):
    return Tree(feature=np.array([feature, -1, -1]), threshold=np.array([threshold, 0.0, 0.0]),
                default_left=np.array([default_left, True, True]), left=np.array([1, -1, -1]),
                right=np.array([2, -1, -1]), cover=np.array([2.0, 1.0, 1.0]), weight=np.array([0.0, wl, wr]))


def ensemble(trees, base=0.0, m=1):
    return BoostedEnsemble(base_margin=base, trees=tuple(trees), params=GbtParams(), n_features=m)


def python_gain(GL, HL, GR, HR, lam, gamma):
    return 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - (GL + GR) ** 2 / (HL + HR + lam)) - gamma


def test_split_gain_examples():
    assert split_gain(-2, 3, 2, 3, 1, 0) == pytest.approx(1.0)
    assert split_gain(0, 5, 0, 7, 1, 0.4) == pytest.approx(-0.4)
    assert split_gain(-1, 2, 1, 2, 1, 10.0) < 0
    assert split_gain(1.5, 2.0, -0.5, 4.0, 0.7, 0.1) == pytest.approx(python_gain(1.5, 2.0, -0.5, 4.0, 0.7, 0.1))


def test_xor_nonlinear_versus_linear():
    X, y = xor_data()
    model = fit_gbt(X, y, GbtParams(n_estimators=50, max_depth=2, learning_rate=0.3))
    assert auroc(y, model.predict_proba(X)) >= 0.99
    assert auroc(y, fit_penalized_logit(X, y, "l2", 1.0).predict_proba(X)) <= 0.6


def test_all_one_labels_with_base_score():
    X, _ = xor_data(100)
    y = np.ones(100)
    with pytest.raises(ValueError, match="single class"):
        fit_gbt(X, y, GbtParams())
    model = fit_gbt(X, y, GbtParams(n_estimators=100, learning_rate=0.1, max_depth=1, base_score=0.5))
    assert np.all(model.predict_proba(X) >= 0.95)


def test_empty_ensemble_predicts_base():
    X, y = noisy_data()
    model = fit_gbt(X, y, GbtParams(n_estimators=0))
    assert model.base_margin == pytest.approx(math.log(y.mean() / (1 - y.mean())))
    np.testing.assert_array_equal(model.predict_margin(X), model.base_margin)
    assert predict(ensemble([]), [1.0]) == 0.5


def test_single_leaf_prediction():
    e = ensemble([stump(wr=0.7)])
    assert predict(e, [1.0], "margin") == pytest.approx(0.7)
    assert round(predict(e, [1.0]), 4) == 0.6682
    with pytest.raises(ValueError):
        predict(e, [1.0, 2.0])


def test_missing_follows_default_direction():
    left = ensemble([stump(default_left=True)])
    right = ensemble([stump(default_left=False)])
    assert predict(left, [np.nan], "margin") == pytest.approx(-0.3)
    assert predict(right, [np.nan], "margin") == pytest.approx(0.7)


def test_learned_default_direction():
    # missing rows behave like large values, so they should default right
    rng = np.random.default_rng(3)
    x = rng.normal(size=600)
    y = (x > 0).astype(float)
    x[rng.random(600) < 0.2] = np.nan
    y[np.isnan(x)] = 1.0
    model = fit_gbt(x[:, None], y, GbtParams(n_estimators=1, max_depth=1, learning_rate=1.0))
    root = model.trees[0]
    assert root.feature[0] == 0 and not root.default_left[0]


@pytest.mark.parametrize("subsample", [1.0, 0.7])
def test_covers_and_additivity(subsample):
    X, y = noisy_data(missing=0.1)
    model = fit_gbt(X, y, GbtParams(n_estimators=20, max_depth=3, subsample=subsample, seed=4))
    for t in model.trees:
        internal = np.flatnonzero(t.feature >= 0)
        np.testing.assert_allclose(t.cover[internal], t.cover[t.left[internal]] + t.cover[t.right[internal]],
                                   rtol=1e-12)
        assert t.n_leaves == len(internal) + 1
    contrib = model.tree_contributions(X)
    np.testing.assert_allclose(model.base_margin + contrib.sum(axis=1), model.predict_margin(X), atol=1e-12)


def test_training_loss_non_increasing():
    X, y = noisy_data(missing=0.05)
    for eta in (0.1, 0.3):
        model = fit_gbt(X, y, GbtParams(n_estimators=40, learning_rate=eta, max_depth=3))
        assert np.all(np.diff(model.training_loss) <= 1e-12)


def test_monotone_rescaling_invariance():
    X, y = noisy_data(missing=0.05)
    Z = X.copy()
    Z[:, 0] = np.exp(X[:, 0]) * 3 + 1
    p = GbtParams(n_estimators=15, max_depth=3, subsample=0.8, seed=2)
    a, b = fit_gbt(X, y, p), fit_gbt(Z, y, p)
    np.testing.assert_array_equal(a.predict_margin(X), b.predict_margin(Z))


def test_deterministic_and_json_round_trip(tmp_path):
    X, y = noisy_data(missing=0.05)
    p = GbtParams(n_estimators=10, subsample=0.6, seed=7)
    a, b = fit_gbt(X, y, p), fit_gbt(X, y, p)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    c = fit_gbt(X, y, GbtParams(n_estimators=10, subsample=0.6, seed=8))
    assert json.dumps(a.to_dict()) != json.dumps(c.to_dict())
    a.dump(tmp_path / "m.json")
    back = BoostedEnsemble.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict_margin(X), a.predict_margin(X))
    node = json.loads((tmp_path / "m.json").read_text())["trees"][0][0]
    assert set(node) == {"feature", "threshold", "default", "left", "right", "cover", "weight"}


def test_depth_and_min_child_respected():
    X, y = noisy_data()
    model = fit_gbt(X, y, GbtParams(n_estimators=5, max_depth=2, min_child_hessian=20))
    for t in model.trees:
        assert t.n_leaves <= 4
        assert np.all(t.cover[t.feature < 0] >= 20)


def test_gamma_prunes_everything():
    X, y = noisy_data()
    model = fit_gbt(X, y, GbtParams(n_estimators=3, gamma=1e6))
    assert all(t.n_nodes == 1 for t in model.trees)


def test_params_validation():
    for bad in (dict(learning_rate=0), dict(max_depth=0), dict(subsample=0), dict(subsample=1.5),
                dict(reg_lambda=-1), dict(n_estimators=-1)):
        with pytest.raises(ValueError):
            GbtParams(**bad)


# grid search


def test_grid_single_point_and_empty():
    X, y = noisy_data()
    folds = stratified_undersampled_folds(y.astype(int), k=3, seed=0)
    res = grid_search(X, y, [LinearParams("l2", 1.0)], folds)
    assert res.winner == 0
    with pytest.raises(ValueError):
        grid_search(X, y, [], folds)


def test_grid_identical_points_first_wins(tmp_path):
    X, y = noisy_data()
    folds = stratified_undersampled_folds(y.astype(int), k=3, seed=0)
    p = GbtParams(n_estimators=5, max_depth=2)
    res = grid_search(X, y, [p, p], folds)
    assert res.results[0].mean_auroc == res.results[1].mean_auroc
    assert res.winner == 0
    res.to_csv(tmp_path / "grid.csv")
    rows = (tmp_path / "grid.csv").read_text().splitlines()
    assert rows[1].split(",")[1] == "0" and rows[1].endswith(",1")


def test_grid_gbt_beats_linear_on_nonlinear_data():
    X, y = noisy_data(n=800, seed=5)
    folds = stratified_undersampled_folds(y.astype(int), k=5, seed=1)
    res = grid_search(X, y, [LinearParams("l2", 1.0), GbtParams(n_estimators=50, max_depth=3)], folds)
    assert res.winner == 1
    assert res.results[1].mean_auroc > res.results[0].mean_auroc
