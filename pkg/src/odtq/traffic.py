"""Per-edge traversal observations extracted from (training) trips.

Both models read recent traffic through this index. Only observations whose
edge-entry timestamp is strictly before the query time are ever returned.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .roadnet import RoadNetwork, Trip


class TripIndex:
    """Sorted ``(entry_time, traversal_time)`` observations for every edge."""

    def __init__(self, net: RoadNetwork, trips: Iterable[Trip]):
        per_edge: list[list[tuple[float, float]]] = [[] for _ in range(net.n_edges)]
        for trip in trips:
            for (u, t0), (v, t1) in zip(trip.points, trip.points[1:]):
                per_edge[net.edge_id(u, v)].append((float(t0), float(t1 - t0)))
        self.n_edges = net.n_edges
        self.entry: list[np.ndarray] = []
        self.duration: list[np.ndarray] = []
        for obs in per_edge:
            obs.sort()
            arr = np.asarray(obs, dtype=np.float64).reshape(-1, 2)
            self.entry.append(arr[:, 0].copy())
            self.duration.append(arr[:, 1].copy())
        all_d = np.concatenate(self.duration) if self.duration else np.empty(0)
        self.mean_edge_time = float(all_d.mean()) if all_d.size else 1.0
        self._mean_cache: dict[tuple[float, float], np.ndarray] = {}

    def window(self, edge: int, t: float, width: float) -> np.ndarray:
        """Traversal times on ``edge`` entered within ``[t - width, t)``."""
        e = self.entry[edge]
        lo = np.searchsorted(e, t - width, side="left")
        hi = np.searchsorted(e, t, side="left")
        return self.duration[edge][lo:hi]

    def mean_times(self, t: float, width: float) -> np.ndarray:
        """Mean traversal time per edge over ``[t - width, t)``; 0 where unobserved."""
        key = (float(t), float(width))
        out = self._mean_cache.get(key)
        if out is None:
            out = np.zeros(self.n_edges)
            for e in range(self.n_edges):
                w = self.window(e, t, width)
                if w.size:
                    out[e] = w.mean()
            self._mean_cache[key] = out
        return out
