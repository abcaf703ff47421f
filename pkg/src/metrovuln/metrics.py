"""Vulnerability metrics from effect estimates, and station rankings.

All metrics are losses: positive means worse service under disruption.
"""
import numpy as np
import pandas as pd

FLOW_METRICS = ["f_ED_out", "f_ED_in", "f_HD_out", "f_HD_in", "f_KL_out", "f_KL_in"]
METRICS = ["d", "s_avg", "s_gross"] + FLOW_METRICS
# metrics with a %-of-baseline counterpart
NORMALIZED = {"d": "d_pct", "s_avg": "s_avg_pct", "s_gross": "s_gross_pct"}
RECORD_COLUMNS = (["station"] + [c for m in METRICS for c in ([m, NORMALIZED[m]] if m in NORMALIZED else [m])]
                  + ["tau_entry", "tau_speed", "r_i", "base_entry", "base_speed", "base_gross",
                     "T_d", "imputed"])


class MetricError(ValueError):
    pass


def compute_metrics(effects, baselines, gross_ridership="disrupted"):
    """One record per station that has an entry-effect estimate.

    Parameters
    ----------
    effects : DataFrame
        ``station, outcome, tau, T_d, ...`` as produced by the effects module.
    baselines : DataFrame
        Indexed by station; needs ``base_entry``, ``base_speed``, ``r_i``.
    gross_ridership : {"disrupted", "baseline"}
        Ridership multiplying the speed loss in the gross metric: mean entry
        of the station's disrupted slots, or its undisrupted baseline.
    """
    if gross_ridership not in ("disrupted", "baseline"):
        raise ValueError("gross_ridership must be 'disrupted' or 'baseline'")
    tau = effects.pivot(index="station", columns="outcome", values="tau")
    t_d = effects.loc[effects["outcome"] == "entry"].set_index("station")["T_d"]
    rows = []
    for station in tau.index:
        if "entry" not in tau.columns or pd.isna(tau.at[station, "entry"]):
            continue
        if station not in baselines.index:
            raise MetricError(f"missing baseline for station {station!r}")
        b = baselines.loc[station]
        if pd.isna(b["base_entry"]):
            raise MetricError(f"missing baseline for station {station!r}")
        tau_entry = float(tau.at[station, "entry"])
        tau_speed = float(tau.at[station, "speed"]) if "speed" in tau.columns else np.nan
        ridership = b["r_i"] if gross_ridership == "disrupted" else b["base_entry"]
        d = -tau_entry
        s_avg = -tau_speed
        s_gross = s_avg * ridership
        base_gross = b["base_speed"] * b["base_entry"]
        rec = {
            "station": station,
            "d": d, "d_pct": 100.0 * d / b["base_entry"],
            "s_avg": s_avg, "s_avg_pct": 100.0 * s_avg / b["base_speed"],
            "s_gross": s_gross, "s_gross_pct": 100.0 * s_gross / base_gross,
            "tau_entry": tau_entry, "tau_speed": tau_speed, "r_i": b["r_i"],
            "base_entry": b["base_entry"], "base_speed": b["base_speed"],
            "base_gross": base_gross, "T_d": int(t_d.get(station, 0)), "imputed": False,
        }
        for m in FLOW_METRICS:
            rec[m] = float(tau.at[station, "flow" + m[1:]]) if "flow" + m[1:] in tau.columns else np.nan
        rows.append(rec)
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def rank_stations(records, metric, k=15):
    """Top-``k`` stations by ``metric`` (descending, ties by station id).

    Returns
    -------
    dict
        ``"absolute"``: ranking by the metric; ``"normalized"``: ranking by
        its %-of-baseline counterpart, or ``None`` when it has none.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; valid: {', '.join(METRICS)}")

    def top(col):
        df = records[["station", col] + ([NORMALIZED[metric]] if col == metric and metric in NORMALIZED else [])
                     + ["imputed"]].dropna(subset=[col])
        df = df.sort_values([col, "station"], ascending=[False, True], kind="mergesort")
        df = df.head(k).reset_index(drop=True)
        df.insert(0, "rank", np.arange(1, len(df) + 1))
        return df

    return {"absolute": top(metric),
            "normalized": top(NORMALIZED[metric]) if metric in NORMALIZED else None}
