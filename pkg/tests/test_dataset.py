import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import betainc

from resilience.dataset import (
    FeatureSpec,
    SchemaError,
    assign_quintiles,
    load_table,
    significance_stars,
    stratified_undersampled_folds,
    summarize_groups,
    write_table,
)
from resilience.synth import SynthConfig, synth_generate

SCHEMA = [
    FeatureSpec("StudBKGD_Gender", "binary"),
    FeatureSpec("StudBKGD_Books", "ordinal", low=0, high=5),
    FeatureSpec("StudBKGD_Curiosity", "continuous"),
    FeatureSpec("Lang", "categorical", categories=("es", "pt")),
]

GOOD = """student_id,school_id,country_id,StudBKGD_Gender,StudBKGD_Books,StudBKGD_Curiosity,Lang,weight
1,s1,AR,0,3,0.5,es,1.5
2,s1,AR,1,0,-1.25,pt,2
3,s2,BR,1,5,0.0,es,1
"""


def test_load_valid_table():
    t = load_table(io.StringIO(GOOD), SCHEMA, weight_column="weight")
    assert t.n_rows == 3
    assert not t.missing_mask.any()
    assert list(t.student_ids) == ["1", "2", "3"]
    assert t.values[1, 3] == 1.0
    assert list(t.weights) == [1.5, 2.0, 1.0]


def test_binary_column_rejects_two():
    bad = GOOD.replace("2,s1,AR,1,0", "2,s1,AR,2,0")
    with pytest.raises(SchemaError, match=r"row 2, column 'StudBKGD_Gender'"):
        load_table(io.StringIO(bad), SCHEMA, weight_column="weight")


def test_empty_continuous_cell_is_missing():
    holey = GOOD.replace("0,3,0.5,es", "0,3,,es")
    t = load_table(io.StringIO(holey), SCHEMA, weight_column="weight")
    assert t.missing_mask.sum() == 1
    assert t.missing_mask[0, 2]


def test_custom_missing_sentinel():
    holey = GOOD.replace("0,3,0.5,es", "0,3,NA,es")
    t = load_table(io.StringIO(holey), SCHEMA, weight_column="weight", missing_sentinel="NA")
    assert t.missing_mask[0, 2]


def test_duplicate_feature_names_rejected():
    with pytest.raises(SchemaError, match="duplicate"):
        load_table(io.StringIO(GOOD), SCHEMA + [FeatureSpec("Lang", "binary")])


def test_school_in_two_countries_rejected():
    bad = GOOD.replace("3,s2,BR", "3,s1,BR")
    with pytest.raises(SchemaError, match="two countries"):
        load_table(io.StringIO(bad), SCHEMA, weight_column="weight")


def test_ordinal_range_and_integer_checks():
    with pytest.raises(SchemaError):
        load_table(io.StringIO(GOOD.replace("0,3,0.5", "0,6,0.5")), SCHEMA)
    with pytest.raises(SchemaError):
        load_table(io.StringIO(GOOD.replace("0,3,0.5", "0,2.5,0.5")), SCHEMA)


def test_table_csv_round_trip(tmp_path):
    t = load_table(io.StringIO(GOOD), SCHEMA, weight_column="weight")
    path = tmp_path / "t.csv"
    write_table(t, path)
    back = load_table(path, SCHEMA, weight_column="weight")
    np.testing.assert_array_equal(back.values, t.values)
    np.testing.assert_array_equal(back.weights, t.weights)


# quintiles


def cdf_walk(values, weights):
    # oracle: explicit walk in (value, index) order
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    total = sum(weights)
    labels, acc = [0] * len(values), 0.0
    for i in order:
        share = acc / total
        labels[i] = next(q for q in range(1, 6) if share < q / 5 - 1e-9 or q == 5)
        acc += weights[i]
    return labels


def test_quintiles_one_per_rank():
    assert list(assign_quintiles([1, 2, 3, 4, 5])) == [1, 2, 3, 4, 5]


def test_quintiles_constant_values_by_index():
    labels = assign_quintiles([7.0] * 10)
    assert list(labels) == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5]


def test_quintiles_weighted_example():
    assert cdf_walk([1, 2, 3, 4], [0.7, 0.1, 0.1, 0.1]) == [1, 4, 5, 5]
    assert list(assign_quintiles([1, 2, 3, 4], [0.7, 0.1, 0.1, 0.1])) == [1, 4, 5, 5]


def test_quintiles_errors():
    with pytest.raises(ValueError):
        assign_quintiles([])
    with pytest.raises(ValueError):
        assign_quintiles([1, 2], [0, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 9)), min_size=1, max_size=40),
       st.sampled_from([0.5, 3.0, 1000.0]))
def test_quintiles_match_walk_and_scale_invariant(pairs, scale):
    values = [float(v) for v, _ in pairs]
    weights = [float(w) for _, w in pairs]
    labels = assign_quintiles(values, weights)
    assert list(labels) == cdf_walk(values, weights)
    np.testing.assert_array_equal(assign_quintiles(values, np.array(weights) * scale), labels)


# folds


def test_folds_exact_stratification_and_balance():
    y = np.array([1] * 20 + [0] * 80)
    folds = stratified_undersampled_folds(y, k=5, seed=1)
    for train, val in folds:
        assert y[val].sum() == 4
        assert y[train].sum() == 16
        assert (1 - y[train]).sum() == 16
        assert not set(train) & set(val)
    allval = np.concatenate(folds.validation)
    assert sorted(allval) == list(range(100))


def test_folds_deterministic():
    y = np.array([1] * 20 + [0] * 80)
    a = stratified_undersampled_folds(y, k=5, seed=9)
    b = stratified_undersampled_folds(y, k=5, seed=9)
    np.testing.assert_array_equal(a.fold_of, b.fold_of)
    for ta, tb in zip(a.train, b.train):
        np.testing.assert_array_equal(ta, tb)


def test_folds_small_class_rejected():
    with pytest.raises(ValueError):
        stratified_undersampled_folds([1, 1, 0, 0, 0, 0, 0], k=5)


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 40), st.integers(5, 60), st.integers(2, 5), st.integers(0, 2**31))
def test_fold_properties(n_pos, n_neg, k, seed):
    y = np.array([1] * n_pos + [0] * n_neg)
    np.random.default_rng(seed).shuffle(y)
    folds = stratified_undersampled_folds(y, k=k, seed=seed)
    assert sum(len(v) for v in folds.validation) == len(y)
    for train, val in folds:
        assert abs(y[val].sum() - n_pos / k) < 1
        assert y[train].sum() == (1 - y[train]).sum()
        assert not set(train) & set(val)


# group summaries


def _table_from_columns(**cols):
    n = len(next(iter(cols.values())))
    schema = tuple(FeatureSpec(name, "continuous") for name in cols)
    from resilience.dataset import FeatureTable
    return FeatureTable(
        schema=schema,
        values=np.column_stack([np.asarray(v, float) for v in cols.values()]),
        student_ids=np.arange(n).astype(str).astype(object),
        school_ids=np.array(["s"] * n, dtype=object),
        country_ids=np.array(["c"] * n, dtype=object),
        weights=np.ones(n),
    )


def test_summary_identical_groups():
    t = _table_from_columns(x=[1, 2, 3, 1, 2, 3])
    s = summarize_groups(t, [0, 0, 0, 1, 1, 1])["x"]
    assert s.difference == 0 and s.t == 0 and s.stars == ""


def test_summary_zero_variance_undefined():
    t = _table_from_columns(x=[0, 0, 0, 0, 1, 1, 1, 1])
    s = summarize_groups(t, [0, 0, 0, 0, 1, 1, 1, 1])["x"]
    assert s.difference == 1.0
    assert not s.defined and math.isnan(s.t)


def test_summary_welch_oracle():
    t = _table_from_columns(x=[1, 2, 3, 4, 5, 3, 4, 5, 6, 7])
    s = summarize_groups(t, [0] * 5 + [1] * 5)["x"]
    # by hand: means 3 and 5, both variances 2.5, se = sqrt(0.5 + 0.5) = 1, t = 2, df = 8
    assert s.difference == 2.0
    assert s.t == pytest.approx(2.0, abs=1e-12)
    df = 1.0 / (0.25 / 4 + 0.25 / 4)
    assert df == 8.0
    p_oracle = betainc(df / 2, 0.5, df / (df + 4.0))
    assert s.p == pytest.approx(p_oracle, rel=1e-10)
    assert s.stars == "*"


def test_summary_antisymmetric():
    rng = np.random.default_rng(0)
    t = _table_from_columns(x=rng.normal(size=40), y=rng.normal(size=40))
    g = np.array([0, 1] * 20)
    ab = summarize_groups(t, g)
    ba = summarize_groups(t, 1 - g)
    for r1, r2 in zip(ab.rows, ba.rows):
        assert r1.difference == -r2.difference


def test_summary_missing_pairwise_and_short_groups():
    t = _table_from_columns(x=[1, np.nan, 3, 4, np.nan, np.nan])
    s = summarize_groups(t, [0, 0, 0, 1, 1, 1])["x"]
    assert s.n_a == 2 and s.n_b == 1 and not s.defined


@pytest.mark.parametrize("p,stars", [(0.001, "***"), (0.01, "***"), (0.02, "**"), (0.05, "**"),
                                     (0.07, "*"), (0.10, "*"), (0.2, "")])
def test_stars(p, stars):
    assert significance_stars(p) == stars


# synthetic generator


def test_synth_null_outcome_rate():
    cfg = SynthConfig(n_countries=4, schools_per_country=10, students_per_school=50)
    table, truth = synth_generate(cfg, seed=1)
    rate = truth.outcome.mean()
    se = math.sqrt(0.25 / table.n_rows)
    assert abs(rate - 0.5) < 3 * se


def test_synth_interaction_regenerates():
    cfg = SynthConfig(interaction=True, interaction_strength=2.0)
    table, truth = synth_generate(cfg, seed=2)
    a, b = cfg.interaction_features
    expected = 2.0 * table.column(a) * table.column(b)
    np.testing.assert_allclose(truth.interaction_term, expected)
    rebuilt = truth.fixed_part + truth.feature_part + truth.nonlinear_term + truth.interaction_term
    school = np.searchsorted(truth.school_ids, table.school_ids)
    country = np.searchsorted(truth.country_ids, table.country_ids)
    rebuilt = rebuilt + truth.school_intercepts[school] + truth.country_intercepts[country]
    np.testing.assert_allclose(rebuilt, truth.margin)


def test_synth_school_variance():
    cfg = SynthConfig(n_countries=10, schools_per_country=20, students_per_school=30, sigma2_school=0.5)
    _, truth = synth_generate(cfg, seed=3)
    var = np.var(truth.school_intercepts, ddof=1)
    assert 0.35 <= var <= 0.65


def test_synth_scores_match_outcome():
    from resilience.indicators import composite_level2
    cfg = SynthConfig(beta_ses=1.0, sigma2_school=0.3)
    table, truth = synth_generate(cfg, seed=4)
    passed, _ = composite_level2(table, cfg.cutoffs)
    np.testing.assert_array_equal(passed, truth.outcome)


def test_synth_reproducible():
    cfg = SynthConfig(missing_rate=0.05, interaction=True, nonlinear=True, feature_effects={"StudBKGD_DD": 0.2})
    t1, l1 = synth_generate(cfg, seed=11)
    t2, l2 = synth_generate(cfg, seed=11)
    assert t1.values.tobytes() == t2.values.tobytes()
    assert l1.margin.tobytes() == l2.margin.tobytes()
    for k in t1.extras:
        assert t1.extras[k].tobytes() == t2.extras[k].tobytes()


def test_synth_config_errors():
    with pytest.raises(ValueError):
        SynthConfig(students_per_school=0)
    with pytest.raises(ValueError):
        SynthConfig(sigma2_school=-1)
