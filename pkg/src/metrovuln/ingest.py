"""Readers and writers for the five input CSV tables.

Every reader is total: each data row ends up either in ``records`` or in
``rejects`` (with its 1-based file line number and a reason).  Structural
problems (missing file, wrong header, dangling references in static data)
raise :class:`IngestError`.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

TS_FORMAT = "%Y-%m-%dT%H:%M"
SERVICE_START_MIN = 6 * 60
SERVICE_END_MIN = 24 * 60

TRIP_COLUMNS = ["card_id", "entry_station", "entry_ts", "exit_station", "exit_ts"]
INCIDENT_COLUMNS = ["station", "start_ts", "end_ts"]
EDGE_COLUMNS = ["from", "to", "track_km"]
WEATHER_COLUMNS = ["station", "slot_start", "temp_c", "wind_kmh", "rain"]
STATION_COLUMNS = [
    "id", "name", "lat", "lon", "zone", "n_lines", "terminal", "overground",
    "screen_door", "rail_connect", "station_age", "rolling_stock_age",
]
STATION_BOOLEANS = ["terminal", "overground", "screen_door", "rail_connect"]
# optional supplementary columns; booleans among them are validated as 0/1
SUPPLEMENTARY_BOOLEANS = ["biking", "parking"]


class IngestError(ValueError):
    """Fatal input problem (missing file, bad header, broken references)."""


@dataclass
class ParseResult:
    records: pd.DataFrame
    rejects: pd.DataFrame
    counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)


@dataclass
class StaticData:
    stations: pd.DataFrame
    edges: pd.DataFrame
    weather: pd.DataFrame
    report: dict


def _read_table(path, columns, exact=True):
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"missing file: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    header = list(df.columns)
    if exact and header != columns:
        raise IngestError(
            f"{path.name}: malformed header {','.join(header)!r}, "
            f"expected {','.join(columns)!r}")
    if not exact and header[:len(columns)] != columns:
        raise IngestError(
            f"{path.name}: malformed header, must start with {','.join(columns)!r}")
    return df


def _parse_ts(values):
    return pd.to_datetime(values, format=TS_FORMAT, errors="coerce")


def _minute_of_day(ts):
    return ts.dt.hour * 60 + ts.dt.minute


def format_ts(ts):
    return ts.dt.strftime(TS_FORMAT)


class _Rejects:
    def __init__(self, n):
        self.reason = np.full(n, "", dtype=object)

    def flag(self, mask, reason):
        mask = np.asarray(mask, dtype=bool) & (self.reason == "")
        self.reason[mask] = reason

    @property
    def ok(self):
        return self.reason == ""

    def frame(self):
        bad = np.flatnonzero(~self.ok)
        # header is line 1
        return pd.DataFrame({"line": bad + 2, "reason": self.reason[bad]})


def parse_trips(path, stations=None):
    """Parse a trips CSV into typed records.

    Parameters
    ----------
    path : path-like
        CSV with header ``card_id,entry_station,entry_ts,exit_station,exit_ts``.
    stations : iterable of str, optional
        Known station ids. When given, trips touching an unknown station are
        rejected.

    Returns
    -------
    ParseResult
        ``records`` has datetime64 ``entry_ts``/``exit_ts`` columns.
    """
    raw = _read_table(path, TRIP_COLUMNS)
    rej = _Rejects(len(raw))
    rej.flag(raw["exit_station"].eq("") | raw["exit_ts"].eq(""), "missing exit tap")
    rej.flag(raw["entry_station"].eq("") | raw["entry_ts"].eq(""), "missing entry tap")
    entry = _parse_ts(raw["entry_ts"])
    exit_ = _parse_ts(raw["exit_ts"])
    rej.flag(entry.isna() | exit_.isna(), "unparseable timestamp")
    if stations is not None:
        known = set(stations)
        rej.flag(~raw["entry_station"].isin(known) | ~raw["exit_station"].isin(known),
                 "unknown station")
    rej.flag((exit_ <= entry).to_numpy(), "non-positive duration")
    entry_min = _minute_of_day(entry)
    exit_min = _minute_of_day(exit_)
    same_day = entry.dt.normalize() == exit_.dt.normalize()
    outside = (entry_min < SERVICE_START_MIN) | (exit_min < SERVICE_START_MIN) | ~same_day
    rej.flag(outside.to_numpy(), "outside service hours")

    ok = rej.ok
    records = pd.DataFrame({
        "card_id": raw["card_id"].to_numpy()[ok],
        "entry_station": raw["entry_station"].to_numpy()[ok],
        "entry_ts": entry.to_numpy()[ok],
        "exit_station": raw["exit_station"].to_numpy()[ok],
        "exit_ts": exit_.to_numpy()[ok],
    })
    rejects = rej.frame()
    return ParseResult(records, rejects,
                       {"rows": len(raw), "accepted": len(records), "rejected": len(rejects)})


def serialize_trips(records, path):
    """Write trip records back out with ISO 8601 minute timestamps."""
    out = pd.DataFrame({
        "card_id": records["card_id"],
        "entry_station": records["entry_station"],
        "entry_ts": format_ts(records["entry_ts"]),
        "exit_station": records["exit_station"],
        "exit_ts": format_ts(records["exit_ts"]),
    })
    out.to_csv(path, index=False, lineterminator="\n")


def parse_incidents(path, threshold_min=10, stations=None):
    """Parse incidents, dropping those shorter than ``threshold_min``.

    Short incidents are not errors: they are counted under ``counts["filtered"]``.
    """
    raw = _read_table(path, INCIDENT_COLUMNS)
    rej = _Rejects(len(raw))
    start = _parse_ts(raw["start_ts"])
    end = _parse_ts(raw["end_ts"])
    rej.flag(start.isna() | end.isna(), "unparseable timestamp")
    if stations is not None:
        rej.flag(~raw["station"].isin(set(stations)), "unknown station")
    rej.flag((end < start).to_numpy(), "end before start")
    ok = rej.ok
    minutes = ((end - start).dt.total_seconds() / 60.0).to_numpy()
    short = ok & (minutes < threshold_min)
    keep = ok & ~short
    records = pd.DataFrame({
        "station": raw["station"].to_numpy()[keep],
        "start_ts": start.to_numpy()[keep],
        "end_ts": end.to_numpy()[keep],
    })
    rejects = rej.frame()
    return ParseResult(records, rejects, {
        "rows": len(raw), "accepted": len(records),
        "rejected": len(rejects), "filtered": int(short.sum()),
    })


def serialize_incidents(records, path):
    out = pd.DataFrame({
        "station": records["station"],
        "start_ts": format_ts(records["start_ts"]),
        "end_ts": format_ts(records["end_ts"]),
    })
    out.to_csv(path, index=False, lineterminator="\n")


def _to_float(df, cols, name):
    out = {}
    for c in cols:
        vals = pd.to_numeric(df[c], errors="coerce")
        if vals.isna().any() or not np.isfinite(vals.to_numpy(dtype=float)).all():
            line = int(np.flatnonzero(vals.isna().to_numpy() | ~np.isfinite(vals.to_numpy(dtype=float)))[0]) + 2
            raise IngestError(f"{name}: non-finite value in column {c!r} at line {line}")
        out[c] = vals.astype(float)
    return out


def parse_stations(path):
    raw = _read_table(path, STATION_COLUMNS, exact=False)
    if raw["id"].duplicated().any():
        dup = raw.loc[raw["id"].duplicated(), "id"].iloc[0]
        raise IngestError(f"stations: duplicate station id {dup!r}")
    numeric = [c for c in raw.columns if c not in ("id", "name")]
    vals = _to_float(raw, numeric, "stations")
    st = pd.DataFrame({"id": raw["id"], "name": raw["name"], **vals})
    for c in STATION_BOOLEANS + [c for c in SUPPLEMENTARY_BOOLEANS if c in st]:
        if not st[c].isin([0.0, 1.0]).all():
            raise IngestError(f"stations: column {c!r} must be 0/1")
        st[c] = st[c].astype(int)
    if (st["zone"] < 1).any():
        raise IngestError("stations: zone must be >= 1")
    if ((st["station_age"] < 0) | (st["rolling_stock_age"] < 0)).any():
        raise IngestError("stations: ages must be >= 0")
    st["zone"] = st["zone"].astype(int)
    st["n_lines"] = st["n_lines"].astype(int)
    return st


def parse_edges(path, station_ids):
    raw = _read_table(path, EDGE_COLUMNS)
    known = set(station_ids)
    for col in ("from", "to"):
        unknown = raw.loc[~raw[col].isin(known), col]
        if len(unknown):
            raise IngestError(f"edges: unknown station {unknown.iloc[0]!r}")
    km = pd.to_numeric(raw["track_km"], errors="coerce")
    bad = km.isna() | ~(km > 0)
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise IngestError(f"edges: track_km must be > 0 (line {line})")
    return pd.DataFrame({"from": raw["from"], "to": raw["to"], "track_km": km.astype(float)})


def slot_starts(days, interval_min=15):
    """All slot start timestamps over ``days`` within service hours."""
    per_day = (SERVICE_END_MIN - SERVICE_START_MIN) // interval_min
    offsets = pd.to_timedelta(SERVICE_START_MIN + interval_min * np.arange(per_day), unit="min")
    days = pd.DatetimeIndex(pd.to_datetime(days)).normalize()
    return (days.values[:, None] + offsets.values[None, :]).ravel()


def parse_weather(path, station_ids, days=None, interval_min=15):
    """Parse weather and complete it to a full (station, slot) grid.

    Missing grid cells take the value of the nearest-in-time slot of the same
    station (earlier slot wins a tie).
    """
    raw = _read_table(path, WEATHER_COLUMNS)
    rej = _Rejects(len(raw))
    ts = _parse_ts(raw["slot_start"])
    rej.flag(ts.isna(), "unparseable timestamp")
    rej.flag(~raw["station"].isin(set(station_ids)), "unknown station")
    temp = pd.to_numeric(raw["temp_c"], errors="coerce")
    wind = pd.to_numeric(raw["wind_kmh"], errors="coerce")
    rain = pd.to_numeric(raw["rain"], errors="coerce")
    rej.flag(temp.isna() | wind.isna() | rain.isna(), "unparseable value")
    rej.flag((wind < 0).to_numpy(), "negative wind speed")
    rej.flag(~rain.isin([0, 1]).to_numpy(), "rain must be 0/1")
    ok = rej.ok
    w = pd.DataFrame({
        "station": raw["station"].to_numpy()[ok],
        "slot_start": ts.to_numpy()[ok],
        "temp_c": temp.to_numpy(dtype=float)[ok],
        "wind_kmh": wind.to_numpy(dtype=float)[ok],
        "rain": rain.to_numpy()[ok].astype(int),
    })
    dup = w.duplicated(["station", "slot_start"])
    w = w.loc[~dup]
    if days is None:
        days = np.unique(w["slot_start"].dt.normalize())
    grid_ts = slot_starts(days, interval_min)
    stations = list(station_ids)
    grid = pd.DataFrame({
        "station": np.repeat(stations, len(grid_ts)),
        "slot_start": np.tile(grid_ts, len(stations)),
    })
    merged = grid.merge(w, on=["station", "slot_start"], how="left")
    missing = merged["temp_c"].isna().to_numpy()
    gaps = int(missing.sum())
    if gaps:
        merged = _fill_nearest(merged, w)
    merged["rain"] = merged["rain"].astype(int)
    rejects = rej.frame()
    return merged, rejects, {"rows": len(raw), "rejected": len(rejects),
                             "duplicates": int(dup.sum()), "gaps": gaps}


def _fill_nearest(merged, observed):
    filled = []
    obs_by_station = dict(tuple(observed.sort_values("slot_start").groupby("station")))
    for station, block in merged.groupby("station", sort=False):
        block = block.copy()
        need = block["temp_c"].isna().to_numpy()
        if need.any():
            obs = obs_by_station.get(station)
            if obs is None or obs.empty:
                raise IngestError(f"weather: no observations for station {station!r}")
            t_obs = obs["slot_start"].to_numpy().astype("datetime64[m]").astype(np.int64)
            t_need = block["slot_start"].to_numpy()[need].astype("datetime64[m]").astype(np.int64)
            pos = np.searchsorted(t_obs, t_need)
            lo = np.clip(pos - 1, 0, len(t_obs) - 1)
            hi = np.clip(pos, 0, len(t_obs) - 1)
            pick = np.where(np.abs(t_need - t_obs[lo]) <= np.abs(t_obs[hi] - t_need), lo, hi)
            for c in ("temp_c", "wind_kmh", "rain"):
                col = block[c].to_numpy(dtype=float)
                col[need] = obs[c].to_numpy(dtype=float)[pick]
                block[c] = col
        filled.append(block)
    return pd.concat(filled, ignore_index=True)


def parse_static(stations_path, edges_path, weather_path, days=None, interval_min=15):
    """Load stations, edges and weather; see module docstring for failure modes."""
    stations = parse_stations(stations_path)
    edges = parse_edges(edges_path, stations["id"])
    weather, w_rejects, w_counts = parse_weather(
        weather_path, stations["id"], days=days, interval_min=interval_min)
    report = {"stations": len(stations), "edges": len(edges),
              "weather_rejects": w_rejects, **{f"weather_{k}": v for k, v in w_counts.items()}}
    return StaticData(stations, edges, weather, report)
