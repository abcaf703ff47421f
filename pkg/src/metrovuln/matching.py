"""Propensity score matching within station and slot, across days.

A control for treated unit (station i, day d, slot t) must be an undisrupted
unit of the same station and slot on another day.  For the speed outcome the
control must also have a non-missing average speed.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

METHODS = ("nearest_neighbour", "subclassification")


@dataclass
class MatchConfig:
    method: str = "nearest_neighbour"
    M: int = 2
    with_replacement: bool = True
    caliper: float | None = None
    subclass_count: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.caliper is not None and self.caliper <= 0:
            raise ValueError("caliper must be > 0")
        if self.subclass_count < 1:
            raise ValueError("subclass_count must be >= 1")


@dataclass
class MatchSet:
    """Matched controls (panel row indices) per treated unit.

    Treated units with an empty control list are unmatchable and do not enter
    effect estimates.
    """
    method: str
    M: int
    controls: dict
    gaps: dict
    outcome: str = "entry"
    strata: dict = field(default_factory=dict)
    strata_report: pd.DataFrame | None = None

    @property
    def treated(self):
        return np.array(sorted(self.controls), dtype=np.int64)

    @property
    def matched(self):
        return np.array([t for t in sorted(self.controls) if len(self.controls[t])],
                        dtype=np.int64)

    @property
    def unmatchable(self):
        return np.array([t for t in sorted(self.controls) if not len(self.controls[t])],
                        dtype=np.int64)

    @property
    def short(self):
        if self.method != "nearest_neighbour":
            return np.array([], dtype=np.int64)
        return np.array([t for t in sorted(self.controls)
                         if 0 < len(self.controls[t]) < self.M], dtype=np.int64)

    def report(self):
        return {"method": self.method, "M": self.M, "outcome": self.outcome,
                "treated": len(self.controls), "matched": len(self.matched),
                "unmatchable": len(self.unmatchable), "short": len(self.short)}


def _grid(panel, scores, outcome):
    n, D, S = len(panel.stations), len(panel.days), panel.slots_per_day
    W = panel.treated.reshape(n, D, S)
    valid = np.ones(panel.n_units, dtype=bool)
    if outcome == "speed":
        valid = ~np.isnan(panel.units["avg_speed"].to_numpy(dtype=float))
    elif outcome != "entry":
        raise ValueError(f"unknown outcome {outcome!r}")
    eligible = (~W) & valid.reshape(n, D, S)
    day_num = panel.days.values.astype("datetime64[D]").astype(np.int64)
    return W, eligible, np.asarray(scores, dtype=float).reshape(n, D, S), day_num


def _ranked_candidates(s, d, t, eligible, score, day_num, caliper):
    cand = np.flatnonzero(eligible[s, :, t])
    cand = cand[cand != d]
    gap = np.abs(score[s, cand, t] - score[s, d, t])
    if caliper is not None:
        ok = gap <= caliper
        cand, gap = cand[ok], gap[ok]
    day_gap = np.abs(day_num[cand] - day_num[d])
    order = np.lexsort((day_num[cand], day_gap, gap))
    return cand[order], gap[order]


def nn_match(panel, scores, cfg=None, outcome="entry"):
    """Nearest-neighbour matching on the propensity score.

    Ties in score distance go to the smaller calendar-day gap, then the
    earlier day.  Without replacement, treated units are served in ascending
    distance of their score from the median score of their candidate pool.
    """
    cfg = cfg or MatchConfig()
    W, eligible, score, day_num = _grid(panel, scores, outcome)
    n, D, S = W.shape
    treated = np.argwhere(W)  # (s, d, t) rows in unit order
    controls, gaps = {}, {}

    def unit(s, d, t):
        return int((s * D + d) * S + t)

    if cfg.with_replacement:
        for s, d, t in treated:
            cand, gap = _ranked_candidates(s, d, t, eligible, score, day_num, cfg.caliper)
            controls[unit(s, d, t)] = np.array([unit(s, c, t) for c in cand[:cfg.M]], dtype=np.int64)
            gaps[unit(s, d, t)] = gap[:cfg.M]
    else:
        keys = []
        for s, d, t in treated:
            pool = np.flatnonzero(eligible[s, :, t])
            pool = pool[pool != d]
            med = np.median(score[s, pool, t]) if len(pool) else score[s, d, t]
            keys.append(abs(score[s, d, t] - med))
        available = eligible.copy()
        for k in np.lexsort((np.arange(len(treated)), np.asarray(keys))):
            s, d, t = treated[k]
            cand, gap = _ranked_candidates(s, d, t, available, score, day_num, cfg.caliper)
            chosen = cand[:cfg.M]
            available[s, chosen, t] = False
            controls[unit(s, d, t)] = np.array([unit(s, c, t) for c in chosen], dtype=np.int64)
            gaps[unit(s, d, t)] = gap[:cfg.M]
    return MatchSet("nearest_neighbour", cfg.M, controls, gaps, outcome)


def subclass_boundaries(treated_scores, k):
    """Interior stratum cut points: the 1/k .. (k-1)/k quantiles of treated scores."""
    return np.quantile(np.asarray(treated_scores, dtype=float), np.arange(1, k) / k)


def subclass_match(panel, scores, cfg=None, outcome="entry"):
    """Subclassification on treated-score quantiles.

    Each treated unit is associated with every eligible control of its
    station and slot (other days) that falls in the same stratum.  Averaging
    unit effects over matched treated units is then the treated-count
    weighted average of stratum effects.
    """
    cfg = cfg or MatchConfig(method="subclassification")
    W, eligible, score, day_num = _grid(panel, scores, outcome)
    n, D, S = W.shape
    flat = score.reshape(-1)
    cuts = subclass_boundaries(flat[W.reshape(-1)], cfg.subclass_count)
    stratum = np.searchsorted(cuts, flat, side="right").reshape(n, D, S)
    controls, gaps, strata = {}, {}, {}
    for s, d, t in np.argwhere(W):
        u = int((s * D + d) * S + t)
        cand = np.flatnonzero(eligible[s, :, t] & (stratum[s, :, t] == stratum[s, d, t]))
        cand = cand[cand != d]
        day_gap = np.abs(day_num[cand] - day_num[d])
        cand = cand[np.lexsort((day_num[cand], day_gap))]
        controls[u] = np.array([(s * D + c) * S + t for c in cand], dtype=np.int64)
        gaps[u] = np.abs(score[s, cand, t] - score[s, d, t])
        strata[u] = int(stratum[s, d, t])
    rows = []
    for k in range(cfg.subclass_count):
        members = [u for u, g in strata.items() if g == k]
        n_matched = sum(1 for u in members if len(controls[u]))
        rows.append({"stratum": k, "n_treated": len(members), "n_matched": n_matched,
                     "n_control": int((eligible & (stratum == k)).sum()),
                     "flagged": bool(members) and n_matched == 0})
    return MatchSet("subclassification", cfg.M, controls, gaps, outcome, strata,
                    pd.DataFrame(rows))


def match(panel, scores, cfg=None, outcome="entry"):
    cfg = cfg or MatchConfig()
    if cfg.method == "subclassification":
        return subclass_match(panel, scores, cfg, outcome)
    return nn_match(panel, scores, cfg, outcome)


class PropensityMatcher(BaseEstimator):
    """Estimator-style wrapper: ``fit(panel, scores)`` sets ``match_set_``."""

    def __init__(self, method="nearest_neighbour", n_neighbors=2, with_replacement=True,
                 caliper=None, n_subclasses=10, outcome="entry"):
        self.method = method
        self.n_neighbors = n_neighbors
        self.with_replacement = with_replacement
        self.caliper = caliper
        self.n_subclasses = n_subclasses
        self.outcome = outcome

    def fit(self, panel, scores):
        cfg = MatchConfig(self.method, self.n_neighbors, self.with_replacement,
                          self.caliper, self.n_subclasses)
        self.match_set_ = match(panel, scores, cfg, self.outcome)
        return self


def satisfies_pool_predicate(panel, match_set):
    """Fraction of matched controls that respect the candidate-pool rule."""
    st, dy, sl = panel.station_idx, panel.day_idx, panel.slot_idx
    w = panel.treated
    speed = panel.units["avg_speed"].to_numpy(dtype=float)
    total = good = 0
    for t, cs in match_set.controls.items():
        for c in cs:
            total += 1
            ok = (st[c] == st[t] and sl[c] == sl[t] and dy[c] != dy[t] and not w[c])
            if match_set.outcome == "speed":
                ok = ok and not np.isnan(speed[c])
            good += ok
    return good / total if total else 1.0


def control_weights(match_set, n_units):
    """Weight of each unit as a matched control (each treated unit spreads 1)."""
    wts = np.zeros(n_units)
    for cs in match_set.controls.values():
        if len(cs):
            np.add.at(wts, cs, 1.0 / len(cs))
    return wts


def balance_report(X, treated, match_set):
    """Standardised mean differences before and after matching.

    Parameters
    ----------
    X : DataFrame
        Covariates, one row per panel unit.
    treated : ndarray of bool
    match_set : MatchSet

    Returns
    -------
    table : DataFrame
        ``covariate, smd_before, smd_after, diff_before, diff_after, degenerate``.
    improvement : float
        ``100 * (1 - sum|diff_after| / sum|diff_before|)``.
    """
    treated = np.asarray(treated, dtype=bool)
    vals = X.to_numpy(dtype=float)
    xt, xc = vals[treated], vals[~treated]
    pooled = np.sqrt((xt.var(axis=0) + xc.var(axis=0)) / 2.0)
    diff_before = xt.mean(axis=0) - xc.mean(axis=0)
    matched = match_set.matched
    wts = control_weights(match_set, len(vals))
    diff_after = vals[matched].mean(axis=0) - (wts @ vals) / wts.sum()

    def smd(diff):
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.abs(diff) / pooled
        zero = pooled == 0
        out[zero & (diff == 0)] = 0.0
        out[zero & (diff != 0)] = np.nan
        return out

    table = pd.DataFrame({
        "covariate": list(X.columns),
        "smd_before": smd(diff_before),
        "smd_after": smd(diff_after),
        "diff_before": diff_before,
        "diff_after": diff_after,
        "degenerate": (pooled == 0) & ((diff_before != 0) | (diff_after != 0)),
    })
    before = np.abs(diff_before).sum()
    improvement = 100.0 * (1.0 - np.abs(diff_after).sum() / before) if before > 0 else 100.0
    return table, float(improvement)


def write_match_audit(panel, match_set, path):
    """Audit CSV: one row per treated unit with control days and score gaps."""
    width = max([len(c) for c in match_set.controls.values()] + [match_set.M])
    days = np.asarray(panel.units["day"])
    stations = np.asarray(panel.units["station"])
    slots = panel.slot_idx
    rows = []
    for t in sorted(match_set.controls):
        cs, gs = match_set.controls[t], match_set.gaps[t]
        row = [stations[t], days[t], int(slots[t])]
        row += [days[c] for c in cs] + [""] * (width - len(cs))
        row += [repr(float(g)) for g in gs] + [""] * (width - len(gs))
        if match_set.method == "subclassification":
            row.append(match_set.strata[t])
        rows.append(row)
    cols = (["treated_station", "treated_day", "slot"]
            + [f"control_day_{k}" for k in range(1, width + 1)]
            + [f"score_gap_{k}" for k in range(1, width + 1)])
    if match_set.method == "subclassification":
        cols.append("stratum")
    pd.DataFrame(rows, columns=cols).to_csv(path, index=False, lineterminator="\n")


def read_match_audit(panel, path, outcome="entry", M=None):
    """Rebuild a :class:`MatchSet` from an audit CSV written for ``panel``."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"missing match artifact: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    day_cols = [c for c in df.columns if c.startswith("control_day_")]
    gap_cols = [c for c in df.columns if c.startswith("score_gap_")]
    s_map = {s: i for i, s in enumerate(panel.stations)}
    d_map = {d: i for i, d in enumerate(panel.days.strftime("%Y-%m-%d"))}
    controls, gaps, strata = {}, {}, {}
    for row in df.itertuples(index=False):
        rec = row._asdict()
        s = s_map[rec["treated_station"]]
        slot = int(rec["slot"])
        t = int(panel.unit_index(s, d_map[rec["treated_day"]], slot))
        cdays = [rec[c] for c in day_cols if rec[c] != ""]
        controls[t] = np.array([panel.unit_index(s, d_map[c], slot) for c in cdays], dtype=np.int64)
        gaps[t] = np.array([float(rec[c]) for c in gap_cols if rec[c] != ""])
        if "stratum" in rec:
            strata[t] = int(rec["stratum"])
    method = "subclassification" if "stratum" in df.columns else "nearest_neighbour"
    return MatchSet(method, M or len(day_cols), controls, gaps, outcome, strata)
