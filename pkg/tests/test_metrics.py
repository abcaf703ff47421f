import numpy as np
import pandas as pd
import pytest

from metrovuln import synthgen
from metrovuln.config import PipelineConfig
from metrovuln.metrics import METRICS, MetricError, compute_metrics, rank_stations
from metrovuln.pipeline import run_stage


def effects_frame(rows):
    return pd.DataFrame(rows, columns=["station", "outcome", "tau", "T_d"]).assign(n_unmatched=0)


def baselines_frame(rows):
    return pd.DataFrame(rows, columns=["station", "base_entry", "base_speed", "r_i"]).set_index("station")


def test_demand_loss_and_normalisation():
    eff = effects_frame([("VIC", "entry", -103.4, 12), ("VIC", "speed", 0.0, 12)])
    base = baselines_frame([("VIC", 795.4, 30.0, 700.0)])
    rec = compute_metrics(eff, base).iloc[0]
    assert rec["d"] == pytest.approx(103.4)
    assert round(rec["d_pct"], 1) == 13.0
    assert rec["s_avg"] == 0 and rec["s_gross"] == 0
    assert rec["T_d"] == 12 and not rec["imputed"]


def test_gross_speed_loss():
    eff = effects_frame([("A", "entry", -1.0, 3), ("A", "speed", -2.0, 3)])
    base = baselines_frame([("A", 12.0, 25.0, 10.0)])
    rec = compute_metrics(eff, base).iloc[0]
    assert rec["s_avg"] == 2.0
    assert rec["s_gross"] == 20.0
    assert compute_metrics(eff, base, gross_ridership="baseline").iloc[0]["s_gross"] == 24.0
    assert rec["s_gross_pct"] == pytest.approx(100 * 20 / (25 * 12))


def test_flow_metrics_carried():
    eff = effects_frame([("A", "entry", -1.0, 3), ("A", "flow_HD_out", 0.25, 3),
                         ("A", "flow_KL_in", 0.1, 3)])
    rec = compute_metrics(eff, baselines_frame([("A", 5.0, 30.0, 4.0)])).iloc[0]
    assert rec["f_HD_out"] == 0.25 and rec["f_KL_in"] == 0.1
    assert np.isnan(rec["f_ED_out"])


def test_missing_baseline_is_fatal():
    eff = effects_frame([("A", "entry", -1.0, 3)])
    with pytest.raises(MetricError, match="A"):
        compute_metrics(eff, baselines_frame([("B", 5.0, 30.0, 4.0)]))


def records(values, col="d"):
    return pd.DataFrame({"station": list(values), col: list(values.values()),
                         "imputed": False})


def test_ranking_examples():
    rec = records({"A": 5.0, "B": 9.0, "C": 1.0})
    rec["d_pct"] = [50.0, 10.0, 90.0]
    top = rank_stations(rec, "d", k=2)
    assert top["absolute"]["station"].tolist() == ["B", "A"]
    assert top["absolute"]["rank"].tolist() == [1, 2]
    assert top["normalized"]["station"].tolist() == ["C", "A"]
    full = rank_stations(rec, "d", k=10)["absolute"]
    assert full["station"].tolist() == ["B", "A", "C"]


def test_ranking_ties_by_station_id_and_unknown_metric():
    rec = records({"Z": 3.0, "M": 3.0, "A": 1.0}, col="f_HD_out")
    top = rank_stations(rec, "f_HD_out", k=3)
    assert top["absolute"]["station"].tolist() == ["M", "Z", "A"]
    assert top["normalized"] is None
    with pytest.raises(ValueError, match="s_gross"):
        rank_stations(rec, "speed")


def test_argmax_invariant_under_rescaling():
    rng = np.random.default_rng(0)
    rec = records({f"S{i:02d}": v for i, v in enumerate(rng.random(30))})
    rec["d_pct"] = rec["d"]
    first = rank_stations(rec, "d", k=1)["absolute"]["station"].iloc[0]
    rec["d"] *= 37.5
    assert rank_stations(rec, "d", k=1)["absolute"]["station"].iloc[0] == first


def test_normalized_consistency_on_frozen_run(frozen_run):
    vuln = pd.read_csv(frozen_run["out"] / "vulnerability.csv")
    est = vuln[~vuln["imputed"]]
    np.testing.assert_allclose(est["d_pct"], 100 * est["d"] / est["base_entry"], rtol=1e-9)
    np.testing.assert_allclose(est["s_avg_pct"], 100 * est["s_avg"] / est["base_speed"], rtol=1e-9)
    np.testing.assert_allclose(est["s_gross"], est["s_avg"] * est["r_i"], rtol=1e-9)
    assert set(METRICS) <= set(vuln.columns)


def test_largest_injected_effect_ranks_first(tmp_path):
    base_cfg = dict(n_stations=8, n_days=10, delta_demand=-10.0)
    manifest = synthgen.generate_scenario(synthgen.ScenarioConfig(seed=3, **base_cfg)).manifest
    disrupted = [s for s in manifest["stations"] if not manifest["truth"][s]["never_disrupted"]]
    star = disrupted[len(disrupted) // 2]
    scale = [2.0 if s == star else 1.0 for s in manifest["stations"]]
    cfg = PipelineConfig(out=str(tmp_path), seed=3,
                         formula=["pre_entry", "temp_c", "rain", "wind_kmh"],
                         scenario=dict(base_cfg, station_effect_scale=scale))
    for stage in ("generate", "panel", "propensity", "match", "estimate"):
        run_stage(cfg, stage)
    eff = pd.read_csv(tmp_path / "effects.csv")
    base = pd.read_csv(tmp_path / "baselines.csv").set_index("station")
    top = rank_stations(compute_metrics(eff, base), "d", k=1)["absolute"]
    assert top["station"].iloc[0] == star
