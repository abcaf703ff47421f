"""Report emission: GeoJSON for mapping and top-k ranking tables."""
import json
import math
import warnings

import numpy as np
import pandas as pd

from .metrics import METRICS, rank_stations


def _clean(value):
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if math.isnan(value) else float(value)
    return value


def emit_geojson(records, stations):
    """FeatureCollection of station points carrying every record column.

    Stations without finite coordinates are skipped with a warning.

    Returns
    -------
    collection : dict
    n_skipped : int
    """
    coords = stations.set_index("id")[["lat", "lon"]]
    features = []
    skipped = 0
    for rec in records.to_dict(orient="records"):
        sid = rec["station"]
        if sid not in coords.index:
            skipped += 1
            continue
        lat, lon = (float(v) for v in coords.loc[sid])
        if not (np.isfinite(lat) and np.isfinite(lon)):
            skipped += 1
            continue
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [lon, lat]},
            "properties": {k: _clean(v) for k, v in rec.items()},
        })
    if skipped:
        warnings.warn(f"{skipped} station(s) without coordinates left out of the GeoJSON")
    return {"type": "FeatureCollection", "features": features}, skipped


def write_geojson(collection, path):
    with open(path, "w") as fh:
        json.dump(collection, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_rankings(records, out_dir, k=15):
    """One ``topk_<metric>.csv`` per metric; normalized ranking stacked below when defined."""
    paths = []
    for metric in METRICS:
        ranks = rank_stations(records, metric, k)
        frames = [ranks["absolute"].assign(ranking="absolute")]
        if ranks["normalized"] is not None:
            frames.append(ranks["normalized"].assign(ranking="normalized"))
        table = pd.concat(frames, ignore_index=True)
        cols = ["ranking"] + [c for c in table.columns if c != "ranking"]
        path = out_dir / f"topk_{metric}.csv"
        table[cols].to_csv(path, index=False, lineterminator="\n")
        paths.append(path)
    return paths
