import numpy as np
import pandas as pd
import pytest

from conftest import make_panel
from metrovuln.effects import pooled_effect
from metrovuln.matching import (MatchConfig, MatchSet, PropensityMatcher, balance_report,
                                control_weights, nn_match, read_match_audit,
                                satisfies_pool_predicate, subclass_boundaries, subclass_match,
                                write_match_audit)

CONSECUTIVE = [f"2024-01-{k:02d}" for k in range(1, 32)]


def one_station(W_days, scores_days, slot=0, speed=None):
    """Single station, 3 slots/day; the given slot carries the test pattern."""
    D = len(W_days)
    W = np.zeros((1, D, 3), dtype=int)
    W[0, :, slot] = W_days
    sc = np.full((1, D, 3), 0.5)
    sc[0, :, slot] = scores_days
    sp = None
    if speed is not None:
        sp = np.full((1, D, 3), 30.0)
        sp[0, :, slot] = speed
    return make_panel(W, speed=sp, days=CONSECUTIVE[:D]), sc.reshape(-1)


def test_nearest_two_picked():
    panel, sc = one_station([1, 0, 0, 0], [0.50, 0.48, 0.55, 0.10])
    ms = nn_match(panel, sc, MatchConfig(M=2))
    t = panel.unit_index(0, 0, 0)
    days = panel.day_idx[ms.controls[t]]
    assert list(days) == [1, 2]
    np.testing.assert_allclose(ms.gaps[t], [0.02, 0.05])


def test_day_gap_breaks_score_ties():
    # candidates on day 1 (gap 1) and day 6 (gap 6), both 0.02 away; others treated
    W = [1, 0, 1, 1, 1, 1, 0]
    sc = [0.50, 0.48, 0.5, 0.5, 0.5, 0.5, 0.52]
    panel, s = one_station(W, sc)
    t = panel.unit_index(0, 0, 0)
    ms = nn_match(panel, s, MatchConfig(M=1))
    assert panel.day_idx[ms.controls[t]].tolist() == [1]
    # mirror: day-gap wins regardless of which side has the higher score
    panel, s = one_station(W, [0.50, 0.52, 0.5, 0.5, 0.5, 0.5, 0.48])
    ms = nn_match(panel, s, MatchConfig(M=1))
    assert panel.day_idx[ms.controls[t]].tolist() == [1]


def test_equal_day_gap_goes_to_earlier_day():
    panel, s = one_station([0, 1, 1, 1, 0], [0.3, 0.5, 0.5, 0.5, 0.3], slot=0)
    # treated day 2 sees days 0 and 4 at equal score and day gaps
    t = panel.unit_index(0, 2, 0)
    ms = nn_match(panel, s, MatchConfig(M=1))
    assert panel.day_idx[ms.controls[t]].tolist() == [0]


def test_unmatchable_flagged_and_reported():
    panel, s = one_station([1, 1, 1], [0.5, 0.5, 0.5])
    ms = nn_match(panel, s)
    assert len(ms.unmatchable) == 3 and len(ms.matched) == 0
    assert ms.report()["unmatchable"] == 3


def test_short_pool_counted():
    panel, s = one_station([1, 0, 1], [0.5, 0.4, 0.5])
    ms = nn_match(panel, s, MatchConfig(M=2))
    assert len(ms.short) == 2 and len(ms.unmatchable) == 0


def test_speed_pool_excludes_missing_speed():
    panel, s = one_station([1, 0, 0, 0], [0.5, 0.49, 0.3, 0.1],
                           speed=[25.0, np.nan, 30.0, 30.0])
    t = panel.unit_index(0, 0, 0)
    entry = nn_match(panel, s, MatchConfig(M=1))
    speed = nn_match(panel, s, MatchConfig(M=1), outcome="speed")
    assert panel.day_idx[entry.controls[t]].tolist() == [1]
    assert panel.day_idx[speed.controls[t]].tolist() == [2]
    assert satisfies_pool_predicate(panel, speed) == 1.0


def random_panel(seed, n=3, D=12, rate=0.25):
    rng = np.random.default_rng(seed)
    W = (rng.random((n, D, 3)) < rate).astype(int)
    return make_panel(W), rng.random(n * D * 3)


def test_pool_predicate_holds_exhaustively():
    for seed in range(20):
        panel, s = random_panel(seed)
        for cfg in (MatchConfig(M=2), MatchConfig(M=3, with_replacement=False),
                    MatchConfig(M=1, caliper=0.1), MatchConfig(method="subclassification")):
            ms = subclass_match(panel, s, cfg) if cfg.method != "nearest_neighbour" \
                else nn_match(panel, s, cfg)
            assert satisfies_pool_predicate(panel, ms) == 1.0


def test_without_replacement_uses_each_control_once():
    panel, s = random_panel(1, D=20, rate=0.3)
    ms = nn_match(panel, s, MatchConfig(M=2, with_replacement=False))
    used = np.concatenate([c for c in ms.controls.values()])
    assert len(used) == len(np.unique(used))
    with_r = nn_match(panel, s, MatchConfig(M=2))
    used_r = np.concatenate([c for c in with_r.controls.values()])
    assert len(used_r) > len(np.unique(used_r))  # replacement does reuse here


def test_caliper_drops_far_controls():
    panel, s = one_station([1, 0, 0], [0.5, 0.45, 0.1])
    ms = nn_match(panel, s, MatchConfig(M=2, caliper=0.1))
    t = panel.unit_index(0, 0, 0)
    assert panel.day_idx[ms.controls[t]].tolist() == [1]


def test_rerun_identical():
    panel, s = random_panel(5)
    a, b = nn_match(panel, s), nn_match(panel, s)
    assert all(np.array_equal(a.controls[k], b.controls[k]) for k in a.controls)


def test_matcher_wrapper():
    panel, s = random_panel(2)
    m = PropensityMatcher(n_neighbors=1).fit(panel, s)
    ref = nn_match(panel, s, MatchConfig(M=1))
    assert all(np.array_equal(m.match_set_.controls[k], ref.controls[k]) for k in ref.controls)
    with pytest.raises(ValueError):
        MatchConfig(method="kernel")


# ---- subclassification ---------------------------------------------------------

def test_subclass_boundaries_are_deciles():
    cuts = subclass_boundaries(np.linspace(0.0, 1.0, 1001), 10)
    np.testing.assert_allclose(cuts, np.arange(1, 10) / 10, atol=1e-12)


def test_subclass_degenerate_scores_use_whole_pool():
    panel, s = random_panel(3)
    s = np.full_like(s, 0.3)
    ms = subclass_match(panel, s)
    assert len(set(ms.strata.values())) == 1
    for t, cs in ms.controls.items():
        st, sl, dy = panel.station_idx[t], panel.slot_idx[t], panel.day_idx[t]
        pool = np.flatnonzero((panel.station_idx == st) & (panel.slot_idx == sl)
                              & (panel.day_idx != dy) & ~panel.treated)
        assert sorted(cs) == sorted(pool)


def test_subclass_flags_stratum_without_controls():
    # treated scores at 0.9 only find controls at 0.1: different strata
    panel, s = one_station([1, 1, 0, 0], [0.1, 0.9, 0.1, 0.1])
    ms = subclass_match(panel, s, MatchConfig(method="subclassification", subclass_count=2))
    rep = ms.strata_report.set_index("stratum")
    assert rep.loc[1, "flagged"] and not rep.loc[0, "flagged"]
    assert len(ms.unmatchable) == 1


# ---- balance -----------------------------------------------------------------------

def test_balance_identical_controls_is_perfect():
    X = pd.DataFrame({"a": [1.0, 2.0, 1.0, 2.0, 9.0], "b": [0, 1, 0, 1, 1]})
    treated = np.array([1, 1, 0, 0, 0], dtype=bool)
    ms = MatchSet("nearest_neighbour", 1, {0: np.array([2]), 1: np.array([3])},
                  {0: np.zeros(1), 1: np.zeros(1)})
    table, imp = balance_report(X, treated, ms)
    assert imp == 100.0
    assert (table["smd_after"] == 0).all()


def test_balance_full_pool_is_zero_improvement():
    rng = np.random.default_rng(0)
    X = pd.DataFrame({"a": rng.normal(size=30), "b": rng.normal(size=30)})
    treated = np.zeros(30, dtype=bool)
    treated[:10] = True
    pool = np.arange(10, 30)
    ms = MatchSet("nearest_neighbour", 20, {t: pool for t in range(10)},
                  {t: np.zeros(20) for t in range(10)})
    table, imp = balance_report(X, treated, ms)
    assert imp == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(table["smd_after"], table["smd_before"])
    # spot-check the pooled-sd definition by hand
    a = X["a"].to_numpy()
    sd = np.sqrt((a[:10].var() + a[10:].var()) / 2)
    assert table["smd_before"].iloc[0] == pytest.approx(abs(a[:10].mean() - a[10:].mean()) / sd)


def test_balance_degenerate_flag():
    X = pd.DataFrame({"c": [1.0, 1.0, 0.0, 0.0], "z": [2.0, 2.0, 2.0, 2.0]})
    treated = np.array([1, 1, 0, 0], dtype=bool)
    ms = MatchSet("nearest_neighbour", 1, {0: np.array([2]), 1: np.array([3])},
                  {0: np.zeros(1), 1: np.zeros(1)})
    table, _ = balance_report(X, treated, ms)
    row_c = table.set_index("covariate").loc["c"]
    row_z = table.set_index("covariate").loc["z"]
    assert row_c["degenerate"] and np.isnan(row_c["smd_before"])
    assert not row_z["degenerate"] and row_z["smd_before"] == 0.0


def test_control_weights_sum_to_matched_count():
    panel, s = random_panel(4)
    ms = nn_match(panel, s)
    assert control_weights(ms, panel.n_units).sum() == pytest.approx(len(ms.matched))


def test_audit_round_trip(tmp_path):
    panel, s = random_panel(6)
    for ms in (nn_match(panel, s), subclass_match(panel, s)):
        path = tmp_path / f"{ms.method}.csv"
        write_match_audit(panel, ms, path)
        back = read_match_audit(panel, path, M=ms.M)
        assert back.method == ms.method
        assert set(back.controls) == set(ms.controls)
        for t in ms.controls:
            assert np.array_equal(back.controls[t], ms.controls[t])
            np.testing.assert_array_equal(back.gaps[t], ms.gaps[t])
    with pytest.raises(FileNotFoundError):
        read_match_audit(panel, tmp_path / "nope.csv")


# ---- frozen scenario -------------------------------------------------------------------

@pytest.fixture(scope="module")
def frozen_scores(frozen_run):
    return pd.read_csv(frozen_run["out"] / "scores.csv")["score"].to_numpy()


def test_pair_gap_far_below_random_pairs(frozen_panel, frozen_scores):
    ms = nn_match(frozen_panel, frozen_scores)
    pair_gap = np.mean([ms.gaps[t].mean() for t in ms.matched])
    rng = np.random.default_rng(0)
    ctrl = np.flatnonzero(~frozen_panel.treated)
    t = ms.matched
    random_gap = np.abs(frozen_scores[t] - frozen_scores[rng.choice(ctrl, len(t))]).mean()
    assert random_gap >= 10 * pair_gap


def test_score_balance_improves(frozen_run):
    bal = pd.read_csv(frozen_run["out"] / "balance.csv").set_index("covariate")
    row = bal.loc["propensity_score"]
    assert row["smd_after"] <= row["smd_before"]


def test_subclassification_agrees_with_nn(frozen_panel, frozen_scores):
    tau_nn, se_nn, _ = pooled_effect(frozen_panel, nn_match(frozen_panel, frozen_scores))
    sub = subclass_match(frozen_panel, frozen_scores)
    tau_sc, se_sc, _ = pooled_effect(frozen_panel, sub)
    assert not sub.strata_report["flagged"].any()
    assert abs(tau_nn - tau_sc) <= 2 * np.hypot(se_nn, se_sc)
