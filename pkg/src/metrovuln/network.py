"""Station graph, all-pairs track distances and trip speeds."""
import math

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


class NetworkGraph:
    """Undirected graph of stations weighted by track length in km.

    All-pairs shortest distances are computed once at construction; queries
    are table lookups afterwards.
    """

    def __init__(self, nodes, edges):
        self.nodes = list(nodes)
        self.index = {s: i for i, s in enumerate(self.nodes)}
        n = len(self.nodes)
        edges = list(edges)
        w = np.full((n, n), np.inf)
        for u, v, km in edges:
            if km <= 0:
                raise ValueError(f"edge {u}-{v}: track_km must be > 0")
            i, j = self.index[u], self.index[v]
            if i == j:
                continue
            if km < w[i, j]:
                w[i, j] = w[j, i] = km
        self.edges = edges
        self._adjacent = w
        finite = np.isfinite(w)
        rows, cols = np.nonzero(finite)
        mat = csr_matrix((w[rows, cols], (rows, cols)), shape=(n, n))
        self.dist = shortest_path(mat, method="D", directed=False)
        self.n_components = connected_components(mat, directed=False)[0] if n else 0

    @classmethod
    def from_frame(cls, stations, edges):
        ids = stations["id"] if isinstance(stations, pd.DataFrame) else stations
        return cls(ids, edges[["from", "to", "track_km"]].itertuples(index=False, name=None))

    def __len__(self):
        return len(self.nodes)

    def shortest_path_km(self, origin, dest):
        """Shortest track distance, or ``None`` when no path exists."""
        d = self.dist[self.index[origin], self.index[dest]]
        return None if math.isinf(d) else float(d)

    def unreachable_pairs(self, stations=None):
        idx = [self.index[s] for s in (stations if stations is not None else self.nodes)]
        sub = self.dist[np.ix_(idx, idx)]
        a, b = np.nonzero(np.isinf(np.triu(sub)))
        return [(self.nodes[idx[i]], self.nodes[idx[j]]) for i, j in zip(a, b)]

    def mean_adjacent_km(self):
        """Mean length of the edges incident to each station (nan if isolated)."""
        w = np.where(np.isfinite(self._adjacent), self._adjacent, np.nan)
        with np.errstate(invalid="ignore"):
            counts = np.isfinite(self._adjacent).sum(axis=1)
            out = np.nansum(w, axis=1) / np.where(counts > 0, counts, np.nan)
        return pd.Series(out, index=self.nodes, name="avg_adj_km")

    def nearest_neighbour(self, station):
        """Closest other station by shortest-path distance (ties: node order)."""
        i = self.index[station]
        d = self.dist[i].copy()
        d[i] = np.inf
        j = int(np.argmin(d))
        return None if math.isinf(d[j]) else self.nodes[j]


def trip_speed(trip, graph):
    """Speed in km/h of one trip along the shortest path.

    ``trip`` needs ``entry_station``, ``exit_station``, ``entry_ts``, ``exit_ts``
    (mapping or attribute access).  Returns ``nan`` when the stations are not
    connected.  Same-station trips give 0.0.
    """
    get = trip.get if hasattr(trip, "get") else lambda k: getattr(trip, k)
    minutes = (pd.Timestamp(get("exit_ts")) - pd.Timestamp(get("entry_ts"))).total_seconds() / 60
    if minutes <= 0:
        raise ValueError("journey time must be positive")
    km = graph.shortest_path_km(get("entry_station"), get("exit_station"))
    if km is None:
        return math.nan
    return km / (minutes / 60.0)


def trip_speeds(trips, graph):
    """Vectorised :func:`trip_speed` over a trips frame.

    Returns
    -------
    speed : ndarray
        km/h; nan for unreachable pairs.
    km : ndarray
    degenerate : ndarray of bool
        Same-station trips (distance 0).
    """
    o = trips["entry_station"].map(graph.index).to_numpy()
    d = trips["exit_station"].map(graph.index).to_numpy()
    km = graph.dist[o, d]
    minutes = (trips["exit_ts"] - trips["entry_ts"]).dt.total_seconds().to_numpy() / 60.0
    if (minutes <= 0).any():
        raise ValueError("journey time must be positive")
    speed = np.where(np.isinf(km), np.nan, km) / (minutes / 60.0)
    return speed, km, o == d
