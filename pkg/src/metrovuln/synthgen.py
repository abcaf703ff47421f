"""Seeded synthetic metro scenarios with known disruption effects.

Disruptions start with a probability that rises with current expected
demand, rain and wind, so a naive disrupted-vs-undisrupted comparison is
confounded (peaks are busier and more often disrupted) while matching on the
same station and slot across days, plus the propensity score, is not.

Generative model, per (station i, day d, slot t):

* expected undisrupted entries ``mu0 = rate_i * profile(t) * m_id * rain_boost^rain``
  with ``m_id`` uniform on ``day_demand``;
* an incident starts (if none is ongoing) with probability
  ``expit(g0 + g_demand * z(mu0) + g_rain * rain + g_wind * wind / 10)``, lasts a
  uniform whole number of minutes in ``incident_minutes``; with
  ``contained`` the start is placed so the incident ends inside its slot;
* entries ~ Poisson(mu0 + delta_demand_i * W);
* destinations ~ a fixed gravity distribution per origin; on disrupted units a
  fraction ``phi_flow`` is sent to the origin's nearest station instead;
* journey minutes = round(60 * km / speed), speed = base speed + delta_speed * W.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.special import expit

from . import distances
from .network import NetworkGraph
from .panel import slots_per_day

GENERATOR_VERSION = "1.0"
LAST_MINUTE = 24 * 60 - 1


@dataclass
class ScenarioConfig:
    n_stations: int = 24
    n_days: int = 20
    seed: int = 20131028
    start_date: str = "2013-10-28"
    interval_min: int = 15
    base_rate: tuple = (50.0, 80.0)
    day_demand: tuple = (0.95, 1.05)
    rain_boost: float = 1.0
    rain_start: float = 0.08
    rain_stop: float = 0.12
    gamma_intercept: float = -3.75
    gamma_demand: float = 1.2
    gamma_rain: float = 0.12
    gamma_wind: float = 0.03
    incident_minutes: tuple = (10, 14)
    contained: bool = True
    delta_demand: float = -20.0
    delta_speed: float = -8.0
    phi_flow: float = 0.0
    base_speed_kmh: float = 30.0
    n_undisrupted: int = 3
    station_effect_scale: list | None = None

    def __post_init__(self):
        self.base_rate = tuple(self.base_rate)
        self.day_demand = tuple(self.day_demand)
        self.incident_minutes = tuple(self.incident_minutes)
        if self.base_rate[0] <= 0 or self.base_rate[1] < self.base_rate[0]:
            raise ValueError("base_rate must be a positive (low, high) range")
        if not 0 <= self.phi_flow <= 1:
            raise ValueError("phi_flow must lie in [0, 1]")
        if self.base_speed_kmh + self.delta_speed <= 0:
            raise ValueError("disrupted speed must stay positive")
        if self.incident_minutes[0] < 1 or self.incident_minutes[1] < self.incident_minutes[0]:
            raise ValueError("incident_minutes must be a (low, high) range of whole minutes")
        if self.contained and self.incident_minutes[1] > self.interval_min:
            raise ValueError("contained incidents cannot outlast one slot")
        scale = self.effect_scale()
        worst = self.base_rate[0] * PROFILE_MIN * self.day_demand[0] + self.delta_demand * scale.max()
        if worst < 0:
            raise ValueError(f"delta_demand {self.delta_demand} drives expected entries "
                             f"below zero (minimum expectation {worst:.2f})")

    def effect_scale(self):
        if self.station_effect_scale is None:
            return np.ones(self.n_stations)
        scale = np.asarray(self.station_effect_scale, dtype=float)
        if scale.shape != (self.n_stations,) or (scale < 0).any():
            raise ValueError("station_effect_scale needs one non-negative value per station")
        return scale

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PROFILE_MIN = 0.5


def diurnal_profile(interval_min=15):
    """Relative demand per slot: base 0.5 with morning and evening peaks."""
    S = slots_per_day(interval_min)
    hours = 6 + (np.arange(S) + 0.5) * interval_min / 60.0
    am = np.exp(-0.5 * ((hours - 8.5) / 0.9) ** 2)
    pm = np.exp(-0.5 * ((hours - 17.75) / 1.0) ** 2)
    midday = np.exp(-0.5 * ((hours - 13.0) / 2.5) ** 2)
    return PROFILE_MIN + 1.0 * am + 0.8 * pm + 0.2 * midday


def station_ids(n):
    return [f"S{i + 1:02d}" for i in range(n)]


def _haversine_km(lat, lon):
    la, lo = np.radians(lat), np.radians(lon)
    dlat = la[:, None] - la[None, :]
    dlon = lo[:, None] - lo[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(la[:, None]) * np.cos(la[None, :]) * np.sin(dlon / 2) ** 2
    return 2 * 6371.0 * np.arcsin(np.sqrt(np.clip(a, 0, 1)))


def _network(rng, n):
    ids = station_ids(n)
    radius = rng.uniform(0.3, 15.0, n)
    angle = rng.uniform(0, 2 * np.pi, n)
    lat = np.round(51.5074 + radius * np.sin(angle) / 111.0, 5)
    lon = np.round(-0.1278 + radius * np.cos(angle) / 69.0, 5)
    crow = _haversine_km(lat, lon)
    tree = minimum_spanning_tree(crow).toarray()
    adj = (tree > 0) | (tree.T > 0)
    # a few chords so the network has loops
    for _ in range(max(1, n // 6)):
        i = int(rng.integers(n))
        order = np.argsort(crow[i])
        for j in order[1:4]:
            if not adj[i, j]:
                adj[i, j] = adj[j, i] = True
                break
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j]:
                edges.append((ids[i], ids[j], round(max(0.3, 1.25 * crow[i, j]), 2)))
    return ids, lat, lon, radius, edges


def _stations(rng, ids, lat, lon, radius, graph):
    n = len(ids)
    degree = np.array([sum(1 for e in graph.edges if s in e[:2]) for s in ids])
    zone = np.clip(1 + (radius // 4).astype(int), 1, 6)
    frame = pd.DataFrame({
        "id": ids,
        "name": [f"Station {s}" for s in ids],
        "lat": lat, "lon": lon, "zone": zone,
        "n_lines": np.clip(1 + degree // 2 + rng.integers(0, 2, n), 1, 6),
        "terminal": (degree == 1).astype(int),
        "overground": (rng.random(n) < 0.45).astype(int),
        "screen_door": (rng.random(n) < 0.2).astype(int),
        "rail_connect": (rng.random(n) < 0.3).astype(int),
        "station_age": rng.integers(15, 150, n),
        "rolling_stock_age": np.round(rng.uniform(5, 40, n), 1),
        "population": rng.integers(2000, 15000, n),
        "employment": rng.integers(500, 40000, n),
        "imd": np.round(rng.uniform(5, 45, n), 2),
        "domestic_area": np.round(rng.uniform(50, 400, n), 1),
        "nondomestic_area": np.round(rng.uniform(20, 600, n), 1),
        "other_landuse_area": np.round(rng.uniform(50, 500, n), 1),
        "bus_stops": rng.integers(2, 40, n),
        "biking": (rng.random(n) < 0.5).astype(int),
        "parking": (rng.random(n) < 0.4).astype(int),
        "road_area": rng.integers(20000, 150000, n),
        "path_area": rng.integers(5000, 60000, n),
    })
    return frame


def _weather(rng, n_stations, n_days, S, interval_min, rain_start, rain_stop):
    hours = 6 + np.arange(S) * interval_min / 60.0
    day_temp = rng.uniform(2, 14, n_days)
    temp = day_temp[:, None] + 4.0 * np.sin((hours[None, :] - 9.0) / 12.0 * np.pi)
    day_wind = rng.uniform(5, 35, n_days)
    wind = day_wind[:, None] + rng.normal(0, 3, (n_days, S))
    rain = np.zeros((n_days, S), dtype=int)
    for d in range(n_days):
        state = rng.random() < rain_start / (rain_start + rain_stop)
        for t in range(S):
            state = (rng.random() >= rain_stop) if state else (rng.random() < rain_start)
            rain[d, t] = state
    temp_st = np.round(temp[None] + rng.normal(0, 0.5, (n_stations, n_days, S)), 1)
    wind_st = np.round(np.clip(wind[None] + rng.normal(0, 1.5, (n_stations, n_days, S)), 0, None), 1)
    rain_st = np.broadcast_to(rain, (n_stations, n_days, S)).copy()
    return temp_st, wind_st, rain_st


@dataclass
class Scenario:
    """Generated tables plus the ground-truth manifest."""
    trips: pd.DataFrame
    incidents: pd.DataFrame
    weather: pd.DataFrame
    stations: pd.DataFrame
    edges: pd.DataFrame
    manifest: dict = field(repr=False)

    FILES = ("trips", "incidents", "weather", "stations", "edges")

    def write(self, out_dir):
        """Write the five CSVs and ``manifest.json``; returns SHA-256 per file."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in self.FILES:
            getattr(self, name).to_csv(out / f"{name}.csv", index=False, lineterminator="\n")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return {p: hashlib.sha256((out / p).read_bytes()).hexdigest()
                for p in [f"{n}.csv" for n in self.FILES] + ["manifest.json"]}


def generate_scenario(cfg=None):
    """Draw a full scenario from ``cfg`` (deterministic given ``cfg.seed``)."""
    cfg = cfg or ScenarioConfig()
    rng = np.random.default_rng(cfg.seed)
    n, D, S, I = cfg.n_stations, cfg.n_days, slots_per_day(cfg.interval_min), cfg.interval_min
    days = pd.bdate_range(cfg.start_date, periods=D)

    ids, lat, lon, radius, edges = _network(rng, n)
    graph = NetworkGraph(ids, edges)
    stations = _stations(rng, ids, lat, lon, radius, graph)
    temp, wind, rain = _weather(rng, n, D, S, I, cfg.rain_start, cfg.rain_stop)

    rate = rng.uniform(cfg.base_rate[0], cfg.base_rate[1], n)
    profile = diurnal_profile(I)
    m = rng.uniform(cfg.day_demand[0], cfg.day_demand[1], (n, D))
    mu0 = (rate[:, None, None] * profile[None, None, :] * m[:, :, None]
           * np.where(rain == 1, cfg.rain_boost, 1.0))
    z = (mu0 - mu0.mean()) / mu0.std()
    p_start = expit(cfg.gamma_intercept + cfg.gamma_demand * z + cfg.gamma_rain * rain
                    + cfg.gamma_wind * wind / 10.0)
    never = np.zeros(n, dtype=bool)
    if cfg.n_undisrupted:
        never[rng.choice(n, cfg.n_undisrupted, replace=False)] = True
    p_start[never] = 0.0

    # incidents, slot by slot so an ongoing incident blocks new starts
    slot_start = 6 * 60 + I * np.arange(S)
    ongoing_until = np.full((n, D), -1, dtype=np.int64)
    W = np.zeros((n, D, S), dtype=np.int8)
    incidents = []
    u_start = rng.random((n, D, S))
    durations = rng.integers(cfg.incident_minutes[0], cfg.incident_minutes[1] + 1, (n, D, S))
    room = I - durations + 1 if cfg.contained else np.full((n, D, S), I)
    offsets = (rng.random((n, D, S)) * room).astype(np.int64)
    for t in range(S):
        a = slot_start[t]
        free = ongoing_until <= a
        start = free & (u_start[:, :, t] < p_start[:, :, t])
        latest = LAST_MINUTE - cfg.incident_minutes[0]
        for i, d in np.argwhere(start):
            s_min = min(a + int(offsets[i, d, t]), latest)
            if s_min < a:
                continue
            e_min = min(s_min + int(durations[i, d, t]), LAST_MINUTE)
            ongoing_until[i, d] = e_min
            incidents.append((i, d, s_min, e_min))
    for i, d, s_min, e_min in incidents:
        W[i, d, (s_min < slot_start + I) & (e_min > slot_start)] = 1

    scale = cfg.effect_scale()
    delta_d = cfg.delta_demand * scale
    delta_s = cfg.delta_speed * scale
    mu = mu0 + delta_d[:, None, None] * W
    counts = rng.poisson(np.clip(mu, 0, None))

    # trips
    unit = np.repeat(np.arange(n * D * S), counts.reshape(-1))
    o = unit // (D * S)
    d_idx = (unit // S) % D
    t_idx = unit % S
    treated = W.reshape(-1)[unit].astype(bool)
    k = len(unit)
    width = np.where(t_idx == S - 1, I - 1, I)
    entry_min = slot_start[t_idx] + (rng.random(k) * width).astype(np.int64)

    dist = graph.dist
    attract = rate[None, :] * np.exp(-dist / 8.0)
    np.fill_diagonal(attract, 0.0)
    probs = attract / attract.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(k)
    dest = (u[:, None] > cum[o]).sum(axis=1)
    nearest = np.array([ids.index(graph.nearest_neighbour(s)) for s in ids])
    redirect = treated & (rng.random(k) < cfg.phi_flow)
    dest[redirect] = nearest[o[redirect]]

    km = dist[o, dest]
    speed = cfg.base_speed_kmh + np.where(treated, delta_s[o], 0.0)
    dur = np.maximum(1, np.rint(60.0 * km / speed).astype(np.int64))
    exit_min = np.minimum(entry_min + dur, LAST_MINUTE)

    day_base = days.values.astype("datetime64[m]")
    entry_ts = np.datetime_as_string(day_base[d_idx] + entry_min.astype("timedelta64[m]"), unit="m")
    exit_ts = np.datetime_as_string(day_base[d_idx] + exit_min.astype("timedelta64[m]"), unit="m")
    id_arr = np.asarray(ids, dtype=object)
    trips = pd.DataFrame({
        "card_id": np.char.add("c", np.char.zfill(np.arange(k).astype(str), 8)),
        "entry_station": id_arr[o],
        "entry_ts": entry_ts,
        "exit_station": id_arr[dest],
        "exit_ts": exit_ts,
    })

    inc = sorted(incidents, key=lambda r: (r[1], r[2], r[0]))
    incidents_df = pd.DataFrame({
        "station": [ids[i] for i, _, _, _ in inc],
        "start_ts": np.datetime_as_string(
            np.array([day_base[d] + np.timedelta64(s, "m") for _, d, s, _ in inc],
                     dtype="datetime64[m]"), unit="m"),
        "end_ts": np.datetime_as_string(
            np.array([day_base[d] + np.timedelta64(e, "m") for _, d, _, e in inc],
                     dtype="datetime64[m]"), unit="m"),
    })

    slot_ts = np.datetime_as_string(
        (day_base[:, None] + slot_start[None, :].astype("timedelta64[m]")).ravel(), unit="m")
    weather = pd.DataFrame({
        "station": np.repeat(id_arr, D * S),
        "slot_start": np.tile(slot_ts, n),
        "temp_c": [f"{v:.1f}" for v in temp.reshape(-1)],
        "wind_kmh": [f"{v:.1f}" for v in wind.reshape(-1)],
        "rain": rain.reshape(-1),
    })
    edges_df = pd.DataFrame(edges, columns=["from", "to", "track_km"])
    edges_df["track_km"] = [f"{v:.2f}" for v in edges_df["track_km"]]

    w_flat = W.reshape(n, -1).astype(bool)
    mu0_flat = mu0.reshape(n, -1)
    per_station = {}
    for i, s in enumerate(ids):
        tr = w_flat[i]
        per_station[s] = {
            "delta_demand": float(delta_d[i]),
            "delta_speed": float(delta_s[i]),
            "phi_flow": cfg.phi_flow,
            "never_disrupted": bool(never[i]),
            "treated_units": int(tr.sum()),
            "expected_base_entry": float(mu0_flat[i, ~tr].mean()),
            "expected_r_i": float((mu0_flat[i, tr] + delta_d[i]).mean()) if tr.any() else None,
            "dest_probs": [float(x) for x in probs[i]],
            "nearest": ids[nearest[i]],
        }
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "config": _jsonable(asdict(cfg)),
        "stations": ids,
        "days": [str(x.date()) for x in days],
        "n_incidents": len(incidents_df),
        "treated_units": int(W.sum()),
        "n_trips": int(k),
        "truth": per_station,
    }
    return Scenario(trips, incidents_df, weather, stations, edges_df, manifest)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def shifted_distribution(p, target, phi):
    """Destination distribution after sending a fraction ``phi`` to ``target``."""
    q = (1.0 - phi) * np.asarray(p, dtype=float)
    q[target] += phi
    return q


def expected_effects(manifest):
    """Closed-form per-station metric values implied by the generator settings.

    Flow entries are population values (no sampling noise): the distance
    between the shifted and the regular destination distribution.
    """
    ids = manifest["stations"]
    rows = []
    for s in ids:
        truth = manifest["truth"][s]
        p = np.asarray(truth["dest_probs"])
        q = shifted_distribution(p, ids.index(truth["nearest"]), truth["phi_flow"])
        s_avg = -truth["delta_speed"]
        r_i = truth["expected_r_i"]
        rows.append({
            "station": s,
            "d": -truth["delta_demand"],
            "s_avg": s_avg,
            "s_gross": s_avg * r_i if r_i is not None else np.nan,
            "f_HD_out": distances.hellinger(q, p),
            "f_KL_out": distances.kl(q, p, eps=0.0),
            "never_disrupted": truth["never_disrupted"],
        })
    return pd.DataFrame(rows)
