"""Pipeline stages.  Each stage reads the previous stages' artifacts from the
output directory, writes its own, and appends one JSON line to ``run.log``.
"""
import json
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import effects, imputation, ingest, matching, metrics, propensity, report, synthgen
from .config import INPUT_FILES
from .network import NetworkGraph
from .panel import Panel, assign_treatment, baseline_stats, build_study_units

STAGES = ("generate", "panel", "propensity", "match", "estimate", "impute", "report")

ARTIFACTS = {
    "panel": ["panel.csv", "flows.csv", "baselines.csv", "panel_meta.json"],
    "propensity": ["scores.csv", "coefficients.csv", "diagnostics.json", "support_hist.csv"],
    "match": ["match_audit.csv", "match_audit_speed.csv", "balance.csv", "match_report.json"],
    "estimate": ["effects.csv", "estimate_summary.json"],
    "impute": ["vulnerability.csv", "imputation_report.csv"],
    "report": ["vulnerability.geojson"],
}
REQUIRES = {
    "propensity": ["panel.csv", "flows.csv", "panel_meta.json"],
    "match": ["panel.csv", "flows.csv", "panel_meta.json", "scores.csv"],
    "estimate": ["panel.csv", "flows.csv", "panel_meta.json", "baselines.csv",
                 "match_audit.csv", "match_audit_speed.csv"],
    "impute": ["panel.csv", "flows.csv", "panel_meta.json", "baselines.csv", "effects.csv"],
    "report": ["vulnerability.csv"],
}


class StageError(RuntimeError):
    """A stage cannot start; carries the exit status for the CLI."""

    def __init__(self, message, status=2):
        super().__init__(message)
        self.status = status


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, pd.DataFrame):
        return o.to_dict(orient="records")
    raise TypeError(f"not serializable: {type(o)}")


def _csv(df, path, index=False):
    df.to_csv(path, index=index, lineterminator="\n")


def _read_csv(path, **kw):
    return pd.read_csv(path, float_precision="round_trip", **kw)


def _require(cfg, stage):
    for name in REQUIRES.get(stage, []):
        path = cfg.out_dir / name
        if not path.is_file():
            raise StageError(f"{stage}: missing prerequisite {path} "
                             f"(run the stage that produces it first)")


def _load_panel(cfg):
    meta = json.loads((cfg.out_dir / "panel_meta.json").read_text())
    return Panel.from_csv(cfg.out_dir / "panel.csv", cfg.out_dir / "flows.csv",
                          interval_min=meta["interval_min"])


def _load_static(cfg):
    for name in ("stations", "edges"):
        if not cfg.input_path(name).is_file():
            raise StageError(f"missing input file {cfg.input_path(name)}")
    stations = ingest.parse_stations(cfg.input_path("stations"))
    edges = ingest.parse_edges(cfg.input_path("edges"), stations["id"])
    return stations, NetworkGraph.from_frame(stations, edges)


# -- stages -----------------------------------------------------------------

def stage_generate(cfg):
    scen = dict(cfg.scenario or {})
    scen.setdefault("seed", cfg.seed)
    scen.setdefault("interval_min", cfg.interval_min)
    scenario = synthgen.generate_scenario(synthgen.ScenarioConfig.from_dict(scen))
    hashes = scenario.write(cfg.data_path)
    m = scenario.manifest
    return {"trips": m["n_trips"], "incidents": m["n_incidents"],
            "treated_units": m["treated_units"], "sha256": hashes}


def stage_panel(cfg):
    for name in INPUT_FILES:
        if not cfg.input_path(name).is_file():
            raise StageError(f"panel: missing input file {cfg.input_path(name)}")
    static = ingest.parse_static(cfg.input_path("stations"), cfg.input_path("edges"),
                                 cfg.input_path("weather"), interval_min=cfg.interval_min)
    ids = static.stations["id"]
    trips = ingest.parse_trips(cfg.input_path("trips"), ids)
    incidents = ingest.parse_incidents(cfg.input_path("incidents"), cfg.threshold_min, ids)
    graph = NetworkGraph.from_frame(static.stations, static.edges)
    days = sorted(set(static.weather["slot_start"].dt.normalize()))
    W, past = assign_treatment(incidents.records, ids, days, cfg.interval_min)
    panel = build_study_units(trips.records, W, static.weather, static.stations, graph, days,
                              cfg.interval_min, past)
    out = cfg.out_dir
    panel.to_csv(out / "panel.csv", out / "flows.csv")
    baselines, _ = baseline_stats(panel)
    _csv(baselines, out / "baselines.csv", index=True)
    rejects = pd.concat([trips.rejects.assign(file="trips"),
                         incidents.rejects.assign(file="incidents"),
                         static.report["weather_rejects"].assign(file="weather")],
                        ignore_index=True)
    _csv(rejects, out / "rejects.csv")
    unreachable = graph.unreachable_pairs()
    counts = {
        "stations": len(ids), "days": len(days), **panel.report,
        "trips": trips.counts, "incidents": incidents.counts,
        "weather": {k: v for k, v in static.report.items() if k.startswith("weather_")
                    and k != "weather_rejects"},
        "unreachable_pairs": len(unreachable),
    }
    _write_json({"interval_min": cfg.interval_min, "threshold_min": cfg.threshold_min,
                 "stations": list(ids), "days": [str(d.date()) for d in days], "counts": counts},
                out / "panel_meta.json")
    if counts["weather"].get("weather_gaps"):
        warnings.warn(f"weather grid had {counts['weather']['weather_gaps']} gaps (filled)")
    return counts


def stage_propensity(cfg):
    _require(cfg, "propensity")
    panel = _load_panel(cfg)
    units = panel.units
    terms = list(cfg.formula)
    selection = None
    if cfg.select:
        terms, selection = propensity.forward_select(units, alpha=cfg.select_alpha)
        terms = list(terms)
        _csv(selection, cfg.out_dir / "selection.csv")
    if cfg.polynomial_degree > 1:
        cont = [t for t in terms if t in ("temp_c", "wind_kmh", "pre_entry", "pre_exit",
                                          "avg_adj_km", "station_age", "rolling_stock_age")]
        terms = list(propensity.expand_polynomial(terms, cfg.polynomial_degree, cont))
    model, diag = propensity.fit_logistic(panel, terms)
    scores = propensity.predict_scores(model, panel)
    support = propensity.common_support(scores, panel.treated, cfg.support_bins, cfg.support_mode)
    out = cfg.out_dir
    frame = units[["station", "day", "slot", "W"]].copy()
    frame["score"] = scores
    frame["keep"] = support.keep.astype(int)
    _csv(frame, out / "scores.csv")
    _csv(diag.coefficients, out / "coefficients.csv")
    _csv(support.histogram, out / "support_hist.csv")
    result = {"auc": diag.auc, "mcfadden_r2": diag.mcfadden_r2, "deviance": diag.deviance,
              "null_deviance": model.null_deviance_, "n_iter": diag.n_iter,
              "converged": bool(model.converged_), "terms": terms,
              "dropped_columns": diag.dropped_columns,
              "out_of_support": len(support.out_of_support),
              "out_of_support_fraction": support.fraction_out,
              "support_mode": cfg.support_mode}
    _write_json(result, out / "diagnostics.json")
    return {k: result[k] for k in ("auc", "mcfadden_r2", "n_iter", "out_of_support")}


def _balance_covariates(panel, scores, terms):
    design = propensity.DesignMatrix(terms).fit(panel.units)
    X, names = design.transform(panel.units)
    frame = pd.DataFrame(X, columns=names)
    frame["propensity_score"] = scores
    return frame


def stage_match(cfg):
    _require(cfg, "match")
    panel = _load_panel(cfg)
    out = cfg.out_dir
    sc = _read_csv(out / "scores.csv", dtype={"station": str, "day": str})
    scores = sc["score"].to_numpy()
    keep = sc["keep"].to_numpy().astype(bool)
    mcfg = matching.MatchConfig(**cfg.match)
    sets = {}
    for outcome, name in (("entry", "match_audit.csv"), ("speed", "match_audit_speed.csv")):
        ms = matching.match(panel, scores, mcfg, outcome)
        if not keep.all():
            # trimmed (out-of-support) treated units are dropped from estimation
            for t in np.flatnonzero(~keep):
                if t in ms.controls:
                    ms.controls[int(t)] = np.array([], dtype=np.int64)
                    ms.gaps[int(t)] = np.array([])
        matching.write_match_audit(panel, ms, out / name)
        sets[outcome] = ms
    diag = json.loads((out / "diagnostics.json").read_text()) if (out / "diagnostics.json").is_file() else {}
    terms = diag.get("terms", cfg.formula)
    X = _balance_covariates(panel, scores, terms)
    table, improvement = matching.balance_report(X, panel.treated, sets["entry"])
    _csv(table, out / "balance.csv")
    predicate = {k: matching.satisfies_pool_predicate(panel, ms) for k, ms in sets.items()}
    rep = {"entry": sets["entry"].report(), "speed": sets["speed"].report(),
           "balance_improvement_pct": improvement,
           "max_smd_after": float(np.nanmax(table["smd_after"])),
           "pool_predicate_fraction": predicate}
    if sets["entry"].strata_report is not None:
        _csv(sets["entry"].strata_report, out / "strata.csv")
    _write_json(rep, out / "match_report.json")
    n_unmatch = rep["entry"]["unmatchable"]
    if n_unmatch:
        warnings.warn(f"{n_unmatch} treated units had no eligible control")
    return {"matched": rep["entry"]["matched"], "unmatchable": n_unmatch,
            "balance_improvement_pct": improvement}


def stage_estimate(cfg):
    _require(cfg, "estimate")
    panel = _load_panel(cfg)
    out = cfg.out_dir
    M = cfg.match["M"]
    ms = matching.read_match_audit(panel, out / "match_audit.csv", "entry", M)
    ms_speed = matching.read_match_audit(panel, out / "match_audit_speed.csv", "speed", M)
    table = effects.estimate_all(panel, ms, ms_speed, cfg.kl_eps)
    _csv(table, out / "effects.csv")
    psm, psm_se, n = effects.pooled_effect(panel, ms, "entry")
    naive, naive_se, _ = effects.naive_effect(panel, "entry")
    sp, sp_se, n_sp = effects.pooled_effect(panel, ms_speed, "speed")
    summary = {"entry": {"psm": psm, "psm_se": psm_se, "n_matched": n,
                         "naive": naive, "naive_se": naive_se},
               "speed": {"psm": sp, "psm_se": sp_se, "n_matched": n_sp}}
    _write_json(summary, out / "estimate_summary.json")
    return {"rows": len(table), "stations": int(table["station"].nunique()),
            "pooled_entry_effect": psm}


def stage_impute(cfg):
    _require(cfg, "impute")
    panel = _load_panel(cfg)
    out = cfg.out_dir
    baselines = _read_csv(out / "baselines.csv", dtype={"station": str}).set_index("station")
    eff = _read_csv(out / "effects.csv", dtype={"station": str})
    records = metrics.compute_metrics(eff, baselines, cfg.gross_ridership)
    stations, graph = _load_static(cfg)
    features = imputation.station_features(stations, panel, graph)
    hyper = {**cfg.forest, "seed": cfg.seed}
    completed, rep, oob = imputation.impute_missing(records, features, baselines, hyper,
                                                   folds=cfg.forest["folds"])
    _csv(completed, out / "vulnerability.csv")
    _csv(rep, out / "imputation_report.csv")
    _write_json({"oob_r2": oob}, out / "imputation_oob.json")
    return {"stations": len(completed), "imputed": int(completed["imputed"].sum())}


def stage_report(cfg):
    _require(cfg, "report")
    out = cfg.out_dir
    records = _read_csv(out / "vulnerability.csv", dtype={"station": str})
    records["imputed"] = records["imputed"].astype(bool)
    stations = ingest.parse_stations(cfg.input_path("stations"))
    collection, skipped = report.emit_geojson(records, stations)
    report.write_geojson(collection, out / "vulnerability.geojson")
    report.write_rankings(records, out, cfg.top_k)
    return {"features": len(collection["features"]), "skipped": skipped}


STAGE_FUNCS = {
    "generate": stage_generate, "panel": stage_panel, "propensity": stage_propensity,
    "match": stage_match, "estimate": stage_estimate, "impute": stage_impute,
    "report": stage_report,
}


def run_stage(cfg, stage):
    """Run one stage, logging it to ``run.log``; errors propagate after logging."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    entry = {"stage": stage}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            counts = STAGE_FUNCS[stage](cfg)
            entry.update(status="ok", counts=counts)
        except Exception as exc:
            entry.update(status="error", error=f"{type(exc).__name__}: {exc}")
            raise
        finally:
            entry["duration_s"] = round(time.perf_counter() - start, 3)
            entry["warnings"] = sorted({str(w.message) for w in caught})
            with open(cfg.out_dir / "run.log", "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True, default=_json_default) + "\n")
    return entry


def run_all(cfg):
    stages = list(STAGES) if cfg.scenario is not None else list(STAGES[1:])
    return [run_stage(cfg, s) for s in stages]
