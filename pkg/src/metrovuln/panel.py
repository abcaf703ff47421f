"""Study-unit panel: station x day x service-time slot.

Units are stored station-major, then day, then slot, so the row of
``(station s, day d, slot t)`` is ``(s * n_days + d) * slots_per_day + t``.
"""
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import SERVICE_END_MIN, SERVICE_START_MIN
from .network import trip_speeds

# slot-start minute boundaries of the nine time-of-day bands; band 8 (19:00-24:00)
# is the reference category in the propensity model
TIME_BAND_EDGES = np.array([
    6 * 60 + 30, 7 * 60 + 45, 8 * 60 + 45, 9 * 60 + 30,
    16 * 60, 17 * 60 + 15, 18 * 60 + 15, 19 * 60,
])
N_TIME_BANDS = 9

STATIC_COVARIATES = [
    "rail_connect", "overground", "terminal", "screen_door", "n_lines",
    "avg_adj_km", "station_age", "rolling_stock_age", "zone",
]
WEATHER_COVARIATES = ["temp_c", "wind_kmh", "rain"]
COVARIATES = (["pre_entry", "pre_exit"] + WEATHER_COVARIATES + STATIC_COVARIATES
              + ["time_band", "past_disruptions"])


class PanelError(ValueError):
    pass


def slots_per_day(interval_min=15):
    span = SERVICE_END_MIN - SERVICE_START_MIN
    if span % interval_min:
        raise ValueError(f"interval {interval_min} min does not divide the service day")
    return span // interval_min


def time_band(slot, interval_min=15):
    start = SERVICE_START_MIN + np.asarray(slot) * interval_min
    return np.searchsorted(TIME_BAND_EDGES, start, side="right")


def _day_index(ts, days):
    day_values = days.values.astype("datetime64[D]")
    d = ts.values.astype("datetime64[D]")
    pos = np.searchsorted(day_values, d)
    pos_c = np.clip(pos, 0, len(day_values) - 1)
    inside = day_values[pos_c] == d
    return np.where(inside, pos_c, -1)


def _slot_index(ts, interval_min):
    minute = ts.dt.hour.to_numpy() * 60 + ts.dt.minute.to_numpy()
    return (minute - SERVICE_START_MIN) // interval_min


def _as_days(days):
    return pd.DatetimeIndex(pd.to_datetime(days)).normalize().unique().sort_values()


def assign_treatment(incidents, stations, days, interval_min=15):
    """Treatment indicator per (station, day, slot).

    A unit is treated when any incident at its station overlaps its slot by at
    least one minute.

    Returns
    -------
    W : ndarray of int8, shape (n_stations, n_days, slots_per_day)
    past : ndarray of int, same shape
        Same-day count of incidents at the station that started before the
        slot start.
    """
    stations = list(stations)
    days = _as_days(days)
    S = slots_per_day(interval_min)
    W = np.zeros((len(stations), len(days), S), dtype=np.int8)
    past = np.zeros(W.shape, dtype=np.int64)
    if len(incidents) == 0:
        return W, past
    index = {s: i for i, s in enumerate(stations)}
    slot_start = SERVICE_START_MIN + interval_min * np.arange(S)
    day_values = days.values.astype("datetime64[D]")
    for st, start, end in incidents[["station", "start_ts", "end_ts"]].itertuples(index=False):
        i = index[st]
        start = np.datetime64(start, "m")
        end = np.datetime64(end, "m")
        d0 = start.astype("datetime64[D]")
        d1 = end.astype("datetime64[D]")
        for d in np.arange(d0, d1 + 1):
            k = np.searchsorted(day_values, d)
            if k >= len(day_values) or day_values[k] != d:
                continue
            base = d.astype("datetime64[m]")
            s_min = max(int((start - base).astype(int)), 0)
            e_min = int((end - base).astype(int))
            overlap = (s_min < slot_start + interval_min) & (e_min > slot_start)
            W[i, k, overlap] = 1
            if d == d0:
                past[i, k, slot_start > s_min] += 1
    return W, past


class Panel:
    """Study units with treatment, covariates, outcomes and flow vectors.

    Attributes
    ----------
    units : DataFrame
        One row per unit: ``station, day, slot, W``, covariates, ``entry``,
        ``avg_speed`` (nan = missing).
    outward, inward : ndarray, shape (n_units, n_stations)
        Trip counts to (outward) / from (inward) every station.
    """

    def __init__(self, stations, days, interval_min, units, outward, inward, report=None):
        self.stations = list(stations)
        self.days = _as_days(days)
        self.interval_min = interval_min
        self.slots_per_day = slots_per_day(interval_min)
        self.units = units
        self.outward = outward
        self.inward = inward
        self.report = report or {}

    @property
    def n_units(self):
        return len(self.units)

    def unit_index(self, station, day, slot):
        s = np.asarray(station)
        d = np.asarray(day)
        return (s * len(self.days) + d) * self.slots_per_day + np.asarray(slot)

    @property
    def station_idx(self):
        return np.arange(self.n_units) // (len(self.days) * self.slots_per_day)

    @property
    def day_idx(self):
        return (np.arange(self.n_units) // self.slots_per_day) % len(self.days)

    @property
    def slot_idx(self):
        return np.arange(self.n_units) % self.slots_per_day

    @property
    def treated(self):
        return self.units["W"].to_numpy().astype(bool)

    def to_csv(self, panel_path, flows_path):
        self.units.to_csv(panel_path, index=False, lineterminator="\n")
        rows = []
        for direction, mat in (("out", self.outward), ("in", self.inward)):
            u, k = np.nonzero(mat)
            rows.append(pd.DataFrame({
                "station": self.units["station"].to_numpy()[u],
                "day": self.units["day"].to_numpy()[u],
                "slot": self.units["slot"].to_numpy()[u],
                "direction": direction,
                "dest": np.asarray(self.stations, dtype=object)[k],
                "count": mat[u, k],
            }))
        pd.concat(rows, ignore_index=True).to_csv(flows_path, index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, panel_path, flows_path, interval_min=None):
        for p in (panel_path, flows_path):
            if not Path(p).is_file():
                raise FileNotFoundError(f"missing panel artifact: {p}")
        units = pd.read_csv(panel_path, dtype={"station": str, "day": str}, float_precision="round_trip")
        stations = list(dict.fromkeys(units["station"]))
        days = list(dict.fromkeys(units["day"]))
        S = int(units["slot"].max()) + 1
        if interval_min is None:
            interval_min = (SERVICE_END_MIN - SERVICE_START_MIN) // S
        panel = cls(stations, days, interval_min, units,
                    np.zeros((len(units), len(stations)), dtype=np.int64),
                    np.zeros((len(units), len(stations)), dtype=np.int64))
        flows = pd.read_csv(flows_path, dtype={"station": str, "day": str, "dest": str})
        s_map = {s: i for i, s in enumerate(stations)}
        d_map = {d: i for i, d in enumerate(days)}
        u = panel.unit_index(flows["station"].map(s_map).to_numpy(),
                             flows["day"].map(d_map).to_numpy(), flows["slot"].to_numpy())
        k = flows["dest"].map(s_map).to_numpy()
        out = flows["direction"].to_numpy() == "out"
        panel.outward[u[out], k[out]] = flows["count"].to_numpy()[out]
        panel.inward[u[~out], k[~out]] = flows["count"].to_numpy()[~out]
        return panel


def build_study_units(trips, W, weather, stations, graph, days, interval_min=15, past=None):
    """Assemble the panel from validated inputs.

    Parameters
    ----------
    trips : DataFrame
        Accepted trip records.
    W : ndarray (n_stations, n_days, slots_per_day)
        Treatment from :func:`assign_treatment`.
    weather : DataFrame
        Complete weather grid (station, slot_start, temp_c, wind_kmh, rain).
    stations : DataFrame
        Station attributes, in panel order.
    graph : NetworkGraph
    days : sequence of dates
    past : ndarray, optional
        Same-day past-disruption counts, same shape as ``W``.
    """
    ids = list(stations["id"])
    index = {s: i for i, s in enumerate(ids)}
    unknown = sorted(set(trips["entry_station"]).union(trips["exit_station"]) - set(ids))
    if unknown:
        raise PanelError(f"stations missing from attributes: {', '.join(unknown[:5])}")
    days = _as_days(days)
    n, D, S = len(ids), len(days), slots_per_day(interval_min)
    if W.shape != (n, D, S):
        raise PanelError(f"treatment shape {W.shape} does not match panel {(n, D, S)}")
    n_units = n * D * S

    o = trips["entry_station"].map(index).to_numpy()
    x = trips["exit_station"].map(index).to_numpy()
    d_in = _day_index(trips["entry_ts"], days)
    d_out = _day_index(trips["exit_ts"], days)
    in_window = (d_in >= 0) & (d_out >= 0)
    t_in = _slot_index(trips["entry_ts"], interval_min)
    t_out = _slot_index(trips["exit_ts"], interval_min)
    u_in = ((o * D + d_in) * S + t_in)[in_window]
    u_out = ((x * D + d_out) * S + t_out)[in_window]
    o, x = o[in_window], x[in_window]

    entry = np.bincount(u_in, minlength=n_units)
    exit_ = np.bincount(u_out, minlength=n_units)
    outward = np.bincount(u_in * n + x, minlength=n_units * n).reshape(n_units, n)
    inward = np.bincount(u_out * n + o, minlength=n_units * n).reshape(n_units, n)

    speed, km, degenerate = trip_speeds(trips.loc[in_window], graph)
    usable = ~degenerate & np.isfinite(speed)
    n_speed = np.bincount(u_in[usable], minlength=n_units)
    speed_sum = np.bincount(u_in[usable], weights=speed[usable], minlength=n_units)
    w_flat = W.reshape(-1).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_speed = speed_sum / n_speed
    avg_speed[(n_speed == 0) & (w_flat == 1)] = 0.0

    def prev_slot(a):
        p = np.zeros_like(a)
        a3 = a.reshape(n, D, S)
        p.reshape(n, D, S)[:, :, 1:] = a3[:, :, :-1]
        return p

    st_rep = np.repeat(np.arange(n), D * S)
    day_rep = np.tile(np.repeat(np.arange(D), S), n)
    slot_rep = np.tile(np.arange(S), n * D)

    wx = weather.copy()
    ws = wx["station"].map(index).to_numpy()
    wd = _day_index(wx["slot_start"], days)
    wt = _slot_index(wx["slot_start"], interval_min)
    keep = (wd >= 0) & ~np.isnan(ws.astype(float))
    wu = (ws[keep].astype(np.int64) * D + wd[keep]) * S + wt[keep]
    covered = np.zeros(n_units, dtype=bool)
    covered[wu] = True
    if not covered.all():
        raise PanelError(f"weather grid incomplete: {int((~covered).sum())} units uncovered")

    st_attrs = stations.set_index("id")
    adj = graph.mean_adjacent_km().reindex(ids).fillna(0.0).to_numpy()
    cols = {
        "station": np.asarray(ids, dtype=object)[st_rep],
        "day": np.asarray(days.strftime("%Y-%m-%d"), dtype=object)[day_rep],
        "slot": slot_rep,
        "W": w_flat,
        "pre_entry": prev_slot(entry),
        "pre_exit": prev_slot(exit_),
    }
    for c in WEATHER_COVARIATES:
        v = np.empty(n_units, dtype=float)
        v[wu] = wx[c].to_numpy(dtype=float)[keep]
        cols[c] = v.astype(int) if c == "rain" else v
    for c in STATIC_COVARIATES:
        if c == "avg_adj_km":
            cols[c] = adj[st_rep]
        else:
            cols[c] = st_attrs.loc[ids, c].to_numpy()[st_rep]
    cols["time_band"] = time_band(slot_rep, interval_min)
    cols["past_disruptions"] = (past.reshape(-1) if past is not None
                                else np.zeros(n_units, dtype=np.int64))
    cols["entry"] = entry
    cols["avg_speed"] = avg_speed
    units = pd.DataFrame(cols)

    report = {
        "n_units": n_units,
        "trips_in_window": int(in_window.sum()),
        "trips_out_of_window": int((~in_window).sum()),
        "trips_degenerate": int(degenerate.sum()),
        "trips_no_path": int(np.isnan(speed[~degenerate]).sum()),
        "treated_units": int(w_flat.sum()),
    }
    return Panel(ids, days, interval_min, units, outward, inward, report)


def baseline_stats(panel):
    """Per-station baselines over undisrupted units, plus ``r_i``.

    Returns
    -------
    baselines : DataFrame indexed by station
        ``base_entry``, ``base_speed``, ``base_exit``, ``r_i`` (mean entry of
        treated units; nan when the station was never disrupted),
        ``n_treated``, ``n_control``, ``disrupted``.
    flows : dict
        ``"outward"`` / ``"inward"`` arrays (n_stations, n_stations) of mean
        baseline flow vectors.
    """
    u = panel.units
    w = panel.treated
    s = panel.station_idx
    n = len(panel.stations)
    n_ctrl = np.bincount(s[~w], minlength=n)
    if (n_ctrl == 0).any():
        bad = [panel.stations[i] for i in np.flatnonzero(n_ctrl == 0)]
        raise PanelError(f"no undisrupted units for station(s): {', '.join(bad)}")
    n_trt = np.bincount(s[w], minlength=n)
    entry = u["entry"].to_numpy(dtype=float)
    exit_ = panel.inward.sum(axis=1).astype(float)
    speed = u["avg_speed"].to_numpy(dtype=float)
    ok_speed = ~w & ~np.isnan(speed)
    base_entry = np.bincount(s[~w], weights=entry[~w], minlength=n) / n_ctrl
    base_exit = np.bincount(s[~w], weights=exit_[~w], minlength=n) / n_ctrl
    with np.errstate(invalid="ignore", divide="ignore"):
        base_speed = (np.bincount(s[ok_speed], weights=speed[ok_speed], minlength=n)
                      / np.bincount(s[ok_speed], minlength=n))
        r_i = np.bincount(s[w], weights=entry[w], minlength=n) / n_trt
    r_i[n_trt == 0] = np.nan
    out_mean = np.zeros((n, n))
    in_mean = np.zeros((n, n))
    np.add.at(out_mean, s[~w], panel.outward[~w])
    np.add.at(in_mean, s[~w], panel.inward[~w])
    out_mean /= n_ctrl[:, None]
    in_mean /= n_ctrl[:, None]
    frame = pd.DataFrame({
        "base_entry": base_entry, "base_speed": base_speed, "base_exit": base_exit,
        "r_i": r_i, "n_treated": n_trt, "n_control": n_ctrl, "disrupted": n_trt > 0,
    }, index=pd.Index(panel.stations, name="station"))
    return frame, {"outward": out_mean, "inward": in_mean}
