"""Station-level treatment effect estimates from matched sets."""
import numpy as np
import pandas as pd

from . import distances

SCALAR_OUTCOMES = {"entry": "entry", "speed": "avg_speed"}
FLOW_KINDS = [f"flow_{d}_{dr}" for d in ("ED", "HD", "KL") for dr in ("out", "in")]
EFFECT_COLUMNS = ["station", "outcome", "tau", "T_d", "n_unmatched"]


def _station_rows(panel, match_set, per_unit, outcome, extra=None):
    st = panel.station_idx
    rows = []
    by_station = {}
    for t, value in per_unit.items():
        by_station.setdefault(st[t], []).append(value)
    unmatched = {}
    for t in match_set.unmatchable:
        unmatched[st[t]] = unmatched.get(st[t], 0) + 1
    for s in sorted(by_station):
        vals = by_station[s]
        row = {"station": panel.stations[s], "outcome": outcome,
               "tau": float(np.mean(vals)), "T_d": len(vals),
               "n_unmatched": unmatched.get(s, 0)}
        if extra:
            row.update(extra.get(s, {}))
        rows.append(row)
    return pd.DataFrame(rows, columns=EFFECT_COLUMNS + (
        sorted({k for v in (extra or {}).values() for k in v}) if extra else []))


def unit_effects(panel, match_set, outcome="entry"):
    """Treated outcome minus mean matched-control outcome, per matched treated unit."""
    y = panel.units[SCALAR_OUTCOMES[outcome]].to_numpy(dtype=float)
    out = {}
    for t in match_set.matched:
        cs = match_set.controls[t]
        out[int(t)] = y[t] - y[cs].mean()
    return out


def ate_scalar(panel, match_set, outcome="entry"):
    """Matching estimate per station for ``entry`` or ``speed``.

    Stations without a matched treated unit get no row.
    """
    if outcome not in SCALAR_OUTCOMES:
        raise ValueError(f"outcome must be one of {sorted(SCALAR_OUTCOMES)}")
    return _station_rows(panel, match_set, unit_effects(panel, match_set, outcome), outcome)


def flow_distance(r1, r0, dist, eps=distances.DEFAULT_KL_EPS):
    """Distance between a treated flow vector and a composite control vector.

    Returns ``(value, status)`` where status is ``"ok"``, ``"smoothed"`` (one
    side was all-zero and was smoothed) or ``"skipped"`` (both all-zero;
    value is 0 for ED and nan otherwise).
    """
    r1 = np.asarray(r1, dtype=float)
    r0 = np.asarray(r0, dtype=float)
    if dist == "ED":
        return distances.euclidean(r1, r0), "ok"
    z1, z0 = r1.sum() == 0, r0.sum() == 0
    if z1 and z0:
        return float("nan"), "skipped"
    status = "smoothed" if (z1 or z0) else "ok"
    if dist == "HD":
        # only an all-zero side needs smoothing to become a distribution
        smooth = eps if eps > 0 else distances.DEFAULT_KL_EPS
        p1 = distances.normalize(r1, smooth if z1 else 0.0)
        p0 = distances.normalize(r0, smooth if z0 else 0.0)
        return distances.hellinger(p1, p0), status
    if dist == "KL":
        if eps == 0 and (z1 or z0):
            raise distances.UndefinedDivergence("all-zero flow vector with smoothing disabled")
        return distances.kl(distances.normalize(r1, eps), distances.normalize(r0, eps), eps=0.0), status
    raise ValueError(f"dist must be ED, HD or KL, got {dist!r}")


def ate_flow(panel, match_set, direction="outward", dist="ED", eps=distances.DEFAULT_KL_EPS):
    """Mean distance between treated and composite-control flow distributions."""
    flows = {"outward": panel.outward, "inward": panel.inward}[direction]
    outcome = f"flow_{dist}_{'out' if direction == 'outward' else 'in'}"
    per_unit = {}
    st = panel.station_idx
    extra = {}
    for t in match_set.matched:
        cs = match_set.controls[t]
        value, status = flow_distance(flows[t], flows[cs].mean(axis=0), dist, eps)
        s = st[t]
        counts = extra.setdefault(s, {"n_skipped": 0, "n_smoothed": 0})
        if status == "skipped":
            counts["n_skipped"] += 1
            if dist != "ED":
                continue
            value = 0.0
        elif status == "smoothed":
            counts["n_smoothed"] += 1
        per_unit[int(t)] = value
    return _station_rows(panel, match_set, per_unit, outcome, extra)


def estimate_all(panel, match_set, speed_match_set=None, eps=distances.DEFAULT_KL_EPS):
    """Every effect kind for every station, stacked in a fixed order."""
    frames = [ate_scalar(panel, match_set, "entry"),
              ate_scalar(panel, speed_match_set or match_set, "speed")]
    for dist in ("ED", "HD", "KL"):
        for direction in ("outward", "inward"):
            frames.append(ate_flow(panel, match_set, direction, dist, eps))
    out = pd.concat([f[EFFECT_COLUMNS] for f in frames], ignore_index=True)
    return out


def pooled_effect(panel, match_set, outcome="entry"):
    """Mean of unit effects over all matched treated units, with its standard error."""
    vals = np.array(list(unit_effects(panel, match_set, outcome).values()))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))), len(vals)


def naive_effect(panel, outcome="entry"):
    """Unadjusted contrast: disrupted minus undisrupted mean, within station.

    Station contrasts are pooled with weights equal to the station's number
    of disrupted units.  The standard error treats units as independent.

    Returns
    -------
    estimate, se : float
    per_station : DataFrame
    """
    y = panel.units[SCALAR_OUTCOMES[outcome]].to_numpy(dtype=float)
    w = panel.treated
    st = panel.station_idx
    rows = []
    for s in range(len(panel.stations)):
        mask = st == s
        yt = y[mask & w]
        yc = y[mask & ~w]
        yt, yc = yt[~np.isnan(yt)], yc[~np.isnan(yc)]
        if len(yt) == 0 or len(yc) < 2:
            continue
        var = (yt.var(ddof=1) / len(yt) if len(yt) > 1 else 0.0) + yc.var(ddof=1) / len(yc)
        rows.append((panel.stations[s], yt.mean() - yc.mean(), var, len(yt)))
    per_station = pd.DataFrame(rows, columns=["station", "tau", "var", "n_treated"])
    wts = per_station["n_treated"].to_numpy(dtype=float)
    wts = wts / wts.sum()
    est = float(wts @ per_station["tau"].to_numpy())
    se = float(np.sqrt(wts ** 2 @ per_station["var"].to_numpy()))
    return est, se, per_station
