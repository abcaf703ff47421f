"""Fill in metrics for stations that were never disrupted."""
import warnings

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression
from sklearn.model_selection import KFold

from .forest import RandomForestRegressor, eval_regression
from .metrics import METRICS, NORMALIZED, RECORD_COLUMNS

ENGINEERING = ["rail_connect", "overground", "terminal", "screen_door", "n_lines",
               "avg_adj_km", "station_age", "rolling_stock_age"]
SUPPLEMENTARY = ["population", "employment", "imd", "domestic_area", "nondomestic_area",
                 "other_landuse_area", "bus_stops", "biking", "parking", "road_area", "path_area"]
MIN_TRAIN = 10


def station_features(stations, panel, graph):
    """Station-level feature table for imputation, indexed by station id.

    Daily demand and speed come from the panel; zone is one-hot encoded.
    """
    ids = list(panel.stations)
    st = stations.set_index("id").loc[ids]
    units = panel.units
    n_days = len(panel.days)
    sidx = panel.station_idx
    entry = np.bincount(sidx, weights=units["entry"].to_numpy(dtype=float), minlength=len(ids))
    exit_ = np.bincount(sidx, weights=panel.inward.sum(axis=1).astype(float), minlength=len(ids))
    speed = units["avg_speed"].to_numpy(dtype=float)
    ok = ~np.isnan(speed)
    with np.errstate(invalid="ignore"):
        daily_speed = (np.bincount(sidx[ok], weights=speed[ok], minlength=len(ids))
                       / np.bincount(sidx[ok], minlength=len(ids)))
    feats = pd.DataFrame({
        "daily_entry": entry / n_days,
        "daily_exit": exit_ / n_days,
        "daily_speed": np.nan_to_num(daily_speed),
    }, index=pd.Index(ids, name="station"))
    adj = graph.mean_adjacent_km().reindex(ids).fillna(0.0)
    for c in ENGINEERING:
        feats[c] = adj.to_numpy() if c == "avg_adj_km" else st[c].to_numpy(dtype=float)
    for z in sorted(st["zone"].unique()):
        feats[f"zone_{z}"] = (st["zone"].to_numpy() == z).astype(float)
    for c in SUPPLEMENTARY:
        if c in st.columns:
            feats[c] = st[c].to_numpy(dtype=float)
    return feats


def _forest(hyper, n_features):
    return RandomForestRegressor(
        n_estimators=hyper.get("trees", 500),
        max_features=min(hyper.get("mtry", 7), n_features),
        min_samples_leaf=hyper.get("min_node", 2),
        random_state=hyper.get("seed", 0),
        n_jobs=hyper.get("n_jobs", 1),
    )


def cross_validate(X, y, hyper, folds=5, seed=0):
    """Out-of-fold predictions for the forest and a linear-regression baseline."""
    kf = KFold(n_splits=min(folds, len(y)), shuffle=True, random_state=seed)
    rf_pred = np.empty(len(y))
    lr_pred = np.empty(len(y))
    for train, test in kf.split(X):
        rf_pred[test] = _forest(hyper, X.shape[1]).fit(X[train], y[train]).predict(X[test])
        lr_pred[test] = LinearRegression().fit(X[train], y[train]).predict(X[test])
    return rf_pred, lr_pred


def impute_missing(records, features, baselines, hyper=None, folds=5):
    """Predict metrics of stations absent from ``records``.

    Parameters
    ----------
    records : DataFrame
        Estimated vulnerability records (one per disrupted station).
    features : DataFrame
        Station features indexed by station id, covering every station.
    baselines : DataFrame
        Per-station baselines, used for the %-of-baseline columns.
    hyper : dict
        ``trees``, ``mtry``, ``min_node``, ``seed``, ``n_jobs``.

    Returns
    -------
    completed : DataFrame
        One row per station in ``features`` order.
    report : DataFrame
        ``metric, MAE, RMSE, RAE, RSE, method`` from out-of-fold predictions.
    oob_r2 : dict
        Out-of-bag R^2 of the full forest per metric.
    """
    hyper = dict(hyper or {})
    est = records.set_index("station")
    missing = [s for s in features.index if s not in est.index]
    completed = est.reindex(features.index).reset_index()
    completed["imputed"] = completed["station"].isin(missing)
    report_rows = []
    oob = {}
    if not missing:
        return completed[RECORD_COLUMNS], pd.DataFrame(
            columns=["metric", "MAE", "RMSE", "RAE", "RSE", "method"]), oob
    if len(est) < MIN_TRAIN:
        warnings.warn(f"only {len(est)} disrupted stations (< {MIN_TRAIN}); not imputing")
        completed["imputed"] = False
        return completed[RECORD_COLUMNS], pd.DataFrame(
            columns=["metric", "MAE", "RMSE", "RAE", "RSE", "method"]), oob

    X_all = features.to_numpy(dtype=float)
    row = {s: i for i, s in enumerate(features.index)}
    miss_rows = [row[s] for s in missing]
    pos = completed.set_index("station")
    for metric in METRICS:
        y_ser = est[metric].astype(float).dropna()
        if len(y_ser) < MIN_TRAIN:
            continue
        train_rows = [row[s] for s in y_ser.index]
        X = X_all[train_rows]
        y = y_ser.to_numpy()
        rf_pred, lr_pred = cross_validate(X, y, hyper, folds, hyper.get("seed", 0))
        for method, pred in (("random_forest", rf_pred), ("linear_regression", lr_pred)):
            report_rows.append({"metric": metric, **eval_regression(y, pred), "method": method})
        model = _forest(hyper, X.shape[1]).fit(X, y)
        oob[metric] = model.oob_score_
        pos.loc[missing, metric] = model.predict(X_all[miss_rows])
    b = baselines.reindex(missing)
    pos.loc[missing, "base_entry"] = b["base_entry"].to_numpy()
    pos.loc[missing, "base_speed"] = b["base_speed"].to_numpy()
    pos.loc[missing, "base_gross"] = (b["base_entry"] * b["base_speed"]).to_numpy()
    pos.loc[missing, "T_d"] = 0
    base_for = {"d": "base_entry", "s_avg": "base_speed", "s_gross": "base_gross"}
    for m, pct in NORMALIZED.items():
        pos.loc[missing, pct] = 100.0 * pos.loc[missing, m] / pos.loc[missing, base_for[m]]
    completed = pos.reset_index()
    completed["T_d"] = completed["T_d"].fillna(0).astype(int)
    completed["imputed"] = completed["imputed"].astype(bool)
    return completed[RECORD_COLUMNS], pd.DataFrame(report_rows), oob
