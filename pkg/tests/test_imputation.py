import json

import numpy as np
import pandas as pd
import pytest

from metrovuln.imputation import cross_validate, impute_missing, station_features
from metrovuln.ingest import parse_static
from metrovuln.metrics import RECORD_COLUMNS
from metrovuln.network import NetworkGraph
from metrovuln.panel import Panel

HYPER = {"trees": 100, "mtry": 3, "min_node": 2, "seed": 0}


def toy(n_est, n_missing=2, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"S{i:02d}" for i in range(n_est + n_missing)]
    feats = pd.DataFrame(rng.normal(size=(len(ids), 4)), index=pd.Index(ids, name="station"),
                         columns=list("abcd"))
    rec = pd.DataFrame({c: np.nan for c in RECORD_COLUMNS}, index=range(n_est))
    rec["station"] = ids[:n_est]
    rec["d"] = 5 + 2 * feats["a"].to_numpy()[:n_est]
    rec["imputed"] = False
    base = pd.DataFrame({"base_entry": 50.0, "base_speed": 30.0}, index=feats.index)
    return rec, feats, base, ids[n_est:]


def test_no_missing_stations_leaves_records_unchanged():
    rec, feats, base, _ = toy(12, n_missing=0)
    out, report, oob = impute_missing(rec, feats, base, HYPER)
    assert not out["imputed"].any()
    np.testing.assert_array_equal(out["d"], rec["d"])
    assert len(report) == 0 and oob == {}


def test_too_few_disrupted_stations_refuses():
    rec, feats, base, missing = toy(9)
    with pytest.warns(UserWarning, match="not imputing"):
        out, report, _ = impute_missing(rec, feats, base, HYPER)
    assert out.set_index("station").loc[missing, "d"].isna().all()
    assert len(report) == 0


def test_imputed_rows_flagged_and_normalised():
    rec, feats, base, missing = toy(20)
    out, report, oob = impute_missing(rec, feats, base, HYPER)
    got = out.set_index("station")
    assert got.loc[missing, "imputed"].all() and not got.drop(missing)["imputed"].any()
    assert got.loc[missing, "d"].notna().all()
    np.testing.assert_allclose(got.loc[missing, "d_pct"], 100 * got.loc[missing, "d"] / 50.0)
    assert (got.loc[missing, "T_d"] == 0).all()
    assert set(report["method"]) == {"random_forest", "linear_regression"}
    assert "d" in oob


def test_cross_validation_is_out_of_fold():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 3))
    y = X[:, 0] * 3
    rf, lr = cross_validate(X, y, HYPER, folds=5, seed=0)
    # linear truth: LR out-of-fold is near exact, forest is not
    np.testing.assert_allclose(lr, y, atol=1e-9)
    assert np.abs(rf - y).mean() > 1e-3


@pytest.fixture(scope="module")
def frozen_imputation(frozen_run):
    out = frozen_run["out"]
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    return (pd.read_csv(out / "vulnerability.csv"), pd.read_csv(out / "imputation_report.csv"),
            manifest)


def test_frozen_withheld_stations_are_imputed(frozen_imputation):
    vuln, _, manifest = frozen_imputation
    never = sorted(s for s in manifest["stations"] if manifest["truth"][s]["never_disrupted"])
    assert sorted(vuln.loc[vuln["imputed"], "station"]) == never
    assert vuln.loc[vuln["imputed"], ["d", "s_avg", "f_HD_out"]].notna().all().all()


def test_imputed_demand_loss_inside_oof_error_band(frozen_run, frozen_imputation):
    vuln, _, manifest = frozen_imputation
    out = frozen_run["out"]
    est = vuln[~vuln["imputed"]].set_index("station")
    data = out / "data"
    static = parse_static(data / "stations.csv", data / "edges.csv", data / "weather.csv")
    panel = Panel.from_csv(out / "panel.csv", out / "flows.csv", 15)
    feats = station_features(static.stations, panel,
                             NetworkGraph.from_frame(static.stations, static.edges))
    X = feats.loc[est.index].to_numpy(dtype=float)
    y = est["d"].to_numpy()
    cfg = frozen_run["cfg"]
    hyper = dict(cfg.forest, seed=cfg.seed)
    rf, _ = cross_validate(X, y, hyper, folds=cfg.forest["folds"], seed=cfg.seed)
    lo, hi = np.quantile(rf - y, [0.05, 0.95])
    for s in vuln.loc[vuln["imputed"], "station"]:
        truth = -manifest["truth"][s]["delta_demand"]
        err = vuln.set_index("station").loc[s, "d"] - truth
        assert lo <= err <= hi, (s, err, lo, hi)


def test_forest_not_worse_than_linear_on_demand_loss(frozen_imputation):
    _, report, _ = frozen_imputation
    mae = report[report["metric"] == "d"].set_index("method")["MAE"]
    assert mae["random_forest"] <= mae["linear_regression"]
