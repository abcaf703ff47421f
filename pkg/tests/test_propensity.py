import warnings

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit
from sklearn.base import clone

from metrovuln.propensity import (DEFAULT_FORMULA, DesignMatrix, LogisticPropensity,
                                  MissingCovariateError, RankDeficientError, SeparationError,
                                  SingleClassError, auc, auc_pairs, common_support,
                                  expand_polynomial, forward_select, mcfadden_r2)

TRUE_BETA = np.array([-2.0, 0.8, -0.5, 1.2])


def simulation_fixture(n=20_000, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.normal(size=n), rng.normal(3.0, 2.0, size=n),
                         rng.integers(0, 2, size=n)])
    y = rng.binomial(1, expit(TRUE_BETA[0] + X @ TRUE_BETA[1:]))
    return X, y


@pytest.fixture(scope="module")
def sim_fit():
    X, y = simulation_fixture()
    return X, y, LogisticPropensity().fit(X, y)


def test_recovers_coefficients_within_three_se(sim_fit):
    _, _, m = sim_fit
    est = np.r_[m.intercept_, m.coef_]
    assert np.all(np.abs(est - TRUE_BETA) <= 3 * m.se_)
    assert m.converged_


def test_matches_statsmodels_glm(sim_fit):
    sm = pytest.importorskip("statsmodels.api")
    X, y, m = sim_fit
    ref = sm.GLM(y, sm.add_constant(X), family=sm.families.Binomial()).fit()
    np.testing.assert_allclose(np.r_[m.intercept_, m.coef_], ref.params, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(m.se_, ref.bse, rtol=1e-5)
    assert m.deviance_ == pytest.approx(ref.deviance, rel=1e-9)


def test_standardisation_does_not_change_estimates(sim_fit):
    X, y, m = sim_fit
    raw = LogisticPropensity(standardize=False).fit(X, y)
    np.testing.assert_allclose(raw.coef_, m.coef_, rtol=1e-7)
    np.testing.assert_allclose(raw.se_, m.se_, rtol=1e-6)


def test_deviance_non_increasing(sim_fit):
    hist = np.array(sim_fit[2].deviance_history_)
    assert len(hist) >= 3
    assert np.all(np.diff(hist) <= 0)


def test_mean_score_equals_treated_fraction(sim_fit):
    X, y, m = sim_fit
    assert abs(m.predict_proba(X)[:, 1].mean() - y.mean()) <= 1e-10


def test_intercept_only_is_logit_of_base_rate():
    y = np.array([1] * 25 + [0] * 75)
    df = pd.DataFrame({"W": y})
    m = LogisticPropensity(terms=()).fit(df, y)
    assert m.intercept_ == pytest.approx(np.log(1 / 3), abs=1e-8)
    assert len(m.coef_) == 0


def test_single_class_refused():
    X = np.ones((5, 1))
    with pytest.raises(SingleClassError):
        LogisticPropensity().fit(X, np.zeros(5))


def test_score_examples():
    m = LogisticPropensity(terms=("x",))
    df = pd.DataFrame({"x": [0.0, 1.0, -1.0, 2.0], "W": [0, 1, 1, 0]})
    m.fit(df, df["W"])
    # set a known linear predictor and check the link
    m.intercept_, m.coef_ = 0.0, np.array([1.0])
    assert m.predict_proba(pd.DataFrame({"x": [0.0]}))[0, 1] == 0.5
    m.intercept_, m.coef_ = -4.547, np.array([0.0])
    p = m.predict_proba(pd.DataFrame({"x": [0.0]}))[0, 1]
    assert p == pytest.approx(0.01048, abs=1e-5)


def test_scores_strictly_inside_unit_interval(sim_fit):
    X, _, m = sim_fit
    p = m.predict_proba(X)[:, 1]
    assert np.all((p > 0) & (p < 1))


def test_design_matrix_terms():
    df = pd.DataFrame({"a": [1.0, 2.0, 3.0], "b": [0, 1, 1], "c": [1, 2, 3]})
    dm = DesignMatrix(("a", "C(c, ref=3)", "a:b", "a^2")).fit(df)
    X, names = dm.transform(df)
    assert names == ["a", "c[1]", "c[2]", "a:b", "a^2"]
    np.testing.assert_array_equal(X, [[1, 1, 0, 0, 1], [2, 0, 1, 2, 4], [3, 0, 0, 3, 9]])
    assert expand_polynomial(("a", "b"), 3, {"a"}) == ("a", "b", "a^2", "a^3")


def test_missing_covariate_named():
    df = pd.DataFrame({"a": [1.0, 2.0], "W": [0, 1]})
    with pytest.raises(MissingCovariateError, match="rain"):
        LogisticPropensity(terms=("a", "rain")).fit(df, df["W"])
    df2 = pd.DataFrame({"a": [1.0, np.nan], "W": [0, 1]})
    with pytest.raises(MissingCovariateError, match="a"):
        LogisticPropensity(terms=("a",)).fit(df2, df2["W"])


def test_rank_deficiency_named():
    rng = np.random.default_rng(1)
    x = rng.normal(size=200)
    df = pd.DataFrame({"x": x, "z": 2 * x + 1, "W": rng.integers(0, 2, 200)})
    with pytest.raises(RankDeficientError, match="z|x"):
        LogisticPropensity(terms=("x", "z")).fit(df, df["W"])


def test_perfect_separation_raises():
    x = np.arange(20.0)
    y = (x >= 10).astype(int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(SeparationError):
            LogisticPropensity().fit(x[:, None], y)


def test_sklearn_clone_round_trip(sim_fit):
    X, y, m = sim_fit
    c = clone(m)
    assert c.get_params() == m.get_params()
    assert not hasattr(c, "coef_")


# ---- AUC -----------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    # one tie between the middle pair, three clean wins: (3 + 0.5) / 4
    assert auc([0.9, 0.4, 0.4, 0.1], [1, 1, 0, 0]) == 0.875
    with pytest.raises(SingleClassError):
        auc([0.1, 0.2], [1, 1])


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(2)
    s = rng.random(300)
    y = rng.integers(0, 2, 300)
    assert auc(s, y) == auc(np.log(s) * 3 + 7, y) == auc(s ** 3, y)


def test_auc_pairs_equals_rank_formula():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 400))
        # coarse rounding forces ties
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        assert auc_pairs(s, y) == auc(s, y)


def test_mcfadden_bounds(sim_fit):
    X, y, m = sim_fit
    r2 = mcfadden_r2(m.predict_proba(X)[:, 1], y)
    assert 0 < r2 < 1
    assert mcfadden_r2(np.full(len(y), y.mean()), y) == pytest.approx(0.0, abs=1e-12)
    ll = -m.deviance_ / 2
    assert r2 == pytest.approx(1 + 2 * ll / m.null_deviance_, rel=1e-10)


# ---- common support --------------------------------------------------------

def test_common_support_flags_and_trims():
    scores = np.array([0.05, 0.2, 0.3, 0.95, 0.25, 0.1, 0.5])
    labels = np.array([1, 1, 1, 1, 0, 0, 0])
    with pytest.warns(UserWarning, match="outside common support"):
        rep = common_support(scores, labels, bins=10)
    assert list(rep.out_of_support) == [0, 3]
    assert rep.keep.all()
    assert rep.fraction_out == 0.5
    rep = common_support(scores, labels, bins=10, mode="trim")
    assert list(np.flatnonzero(~rep.keep)) == [0, 3]
    assert rep.histogram["count_treated"].sum() == 4
    assert rep.histogram["count_control"].sum() == 3
    with pytest.raises(ValueError):
        common_support(scores, labels, mode="drop")


# ---- formula on a panel ------------------------------------------------------

def test_default_formula_on_frozen_panel(frozen_panel):
    m = LogisticPropensity().fit(frozen_panel.units, frozen_panel.units["W"])
    names = m.feature_names_
    assert "time_band[8]" not in names and "time_band[0]" in names
    assert "overground:wind_kmh" in names
    assert len(names) == len(DEFAULT_FORMULA) - 1 + 8


def test_forward_select_keeps_informative_terms():
    rng = np.random.default_rng(4)
    n = 6000
    df = pd.DataFrame({"a": rng.normal(size=n), "noise": rng.normal(size=n),
                       "b": rng.normal(size=n)})
    df["W"] = rng.binomial(1, expit(-1 + 1.0 * df["a"] + 0.8 * df["b"]))
    terms, log = forward_select(df, base=("a",), candidates=("noise", "b"), alpha=0.01)
    assert "b" in terms
    assert set(log["term"]) == {"noise", "b"}
    assert log.set_index("term").loc["b", "p_value"] < 1e-10
