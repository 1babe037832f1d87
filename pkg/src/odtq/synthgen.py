"""Deterministic synthetic road networks, congestion, trips and splits."""

from __future__ import annotations

import heapq
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ContractError, ReachabilityError
from .roadnet import (
    SPLIT_NAMES,
    OdtQuery,
    RoadNetwork,
    Trip,
    load_network,
    load_queries,
    load_splits,
    load_trips,
    nearest_node,
    round_sig,
    save_network,
    save_queries,
    save_splits,
    save_trips,
)

MAX_GRID_NODES = 10_000

# SeedSequence stream tags, one per independent consumer of randomness
_NET, _PROFILE, _QUERY, _TRIP, _SPLIT = range(5)


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *stream])


def generate_grid_network(rows: int, cols: int, spacing: float = 500.0, seed: int = 0,
                          max_nodes: int = MAX_GRID_NODES) -> RoadNetwork:
    """Bidirectional ``rows x cols`` lattice with node positions jittered by up to 10%."""
    if rows < 2 or cols < 2:
        raise ContractError(f"grid needs rows, cols >= 2, got {rows}x{cols}")
    if rows * cols > max_nodes:
        raise ContractError(f"grid of {rows * cols} nodes exceeds the limit of {max_nodes}")
    if not spacing > 0:
        raise ContractError("spacing must be positive")
    rng = _rng(seed, _NET)
    jitter = rng.uniform(-0.1, 0.1, size=(rows * cols, 2)) * spacing
    coords = np.empty((rows * cols, 2))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            coords[i] = (round_sig(c * spacing + jitter[i, 0]),
                         round_sig(r * spacing + jitter[i, 1]))
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            for v in ((u + 1) if c + 1 < cols else None, (u + cols) if r + 1 < rows else None):
                if v is None:
                    continue
                ln = round_sig(float(np.hypot(*(coords[u] - coords[v]))))
                edges.append((u, v, ln))
                edges.append((v, u, ln))
    return RoadNetwork(coords, edges)


@dataclass
class CongestionProfile:
    """Per-(edge, time-slice) speed multipliers and log-normal dispersion.

    Slices index ``(t - start_time) // slice_len`` and wrap around the horizon.
    """

    slice_len: float
    base_speed: np.ndarray
    multiplier: np.ndarray
    noise_scale: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        if self.multiplier.shape != self.noise_scale.shape:
            raise ContractError("multiplier and noise_scale shapes differ")
        if self.multiplier.shape[0] != self.base_speed.shape[0]:
            raise ContractError("profile edge count mismatch")
        if not (self.multiplier > 0).all() or not (self.base_speed > 0).all():
            raise ContractError("speeds and multipliers must be positive")
        if (self.noise_scale < 0).any():
            raise ContractError("noise_scale must be non-negative")

    @property
    def n_slices(self) -> int:
        return self.multiplier.shape[1]

    def slice_index(self, t: float) -> int:
        return int((t - self.start_time) // self.slice_len) % self.n_slices

    def traversal_time(self, net: RoadNetwork, edge: int, t: float) -> float:
        """Median (noise-free) time to traverse ``edge`` when entering at ``t``."""
        s = self.slice_index(t)
        return float(net.edge_length[edge] / (self.base_speed[edge] * self.multiplier[edge, s]))


def high_noise_edges(net: RoadNetwork) -> np.ndarray:
    """Boolean mask of edges whose midpoint lies in the right half of the network."""
    mid = 0.5 * (net.norm_coords[net.edge_src] + net.norm_coords[net.edge_dst])
    return mid[:, 0] >= 0.5


def make_congestion_profile(net: RoadNetwork, n_slices: int, slice_len: float = 600.0,
                            seed: int = 0, speed_mean: float = 10.0,
                            noise_scale: float = 0.15, noise_scale_high: float | None = None,
                            peak_amplitude: float = 0.5,
                            start_time: float = 0.0) -> CongestionProfile:
    """Random per-edge speeds with a single mid-horizon rush period.

    When ``noise_scale_high`` is given, edges in the right half of the network
    use it instead of ``noise_scale``.
    """
    rng = _rng(seed, _PROFILE)
    E = net.n_edges
    base_speed = speed_mean * rng.uniform(0.7, 1.3, size=E)
    sensitivity = rng.uniform(0.2, 1.0, size=E)
    phase = (np.arange(n_slices) + 0.5) / n_slices
    rush = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    jitter = rng.normal(0.0, 0.05, size=(E, n_slices))
    multiplier = np.clip(1.0 - peak_amplitude * sensitivity[:, None] * rush[None, :] + jitter,
                         0.2, 1.5)
    base_noise = np.full(E, float(noise_scale))
    if noise_scale_high is not None:
        base_noise[high_noise_edges(net)] = float(noise_scale_high)
    noise = base_noise[:, None] * (1.0 + 0.5 * sensitivity[:, None] * rush[None, :])
    return CongestionProfile(float(slice_len), base_speed, multiplier, noise, float(start_time))


def sample_edge_time(median: float, noise: float, rng) -> float:
    """Log-normal traversal time rounded to whole seconds (at least 1 s)."""
    t = median * np.exp(noise * rng.standard_normal()) if noise > 0 else median
    return float(max(1, int(np.rint(t))))


def shortest_path(net: RoadNetwork, src: int, dst: int, weights) -> list[int]:
    """Dijkstra over per-edge ``weights``; raises if ``dst`` is unreachable."""
    dist = {src: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, src)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == dst:
            break
        for v in net.adjacency[u]:
            nd = d + weights[net.edge_id(u, v)]
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if dst not in done:
        raise ReachabilityError(f"node {dst} is unreachable from {src}")
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


def hop_distances(net: RoadNetwork, src: int) -> dict[int, int]:
    seen = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in net.adjacency[u]:
            if v not in seen:
                seen[v] = seen[u] + 1
                q.append(v)
    return seen


def simulate_trip(net: RoadNetwork, profile: CongestionProfile, query: OdtQuery,
                  rng_seed, epsilon: float = 0.3) -> tuple[Trip, tuple[int, ...]]:
    """Drive ``query`` over ``net``: perturbed fastest path, log-normal edge times."""
    o, d = nearest_node(net, query.origin), nearest_node(net, query.destination)
    if o == d:
        raise ContractError(f"query {query.query_id}: origin and destination share node {o}")
    rng = np.random.default_rng(rng_seed)
    t0 = query.departure_time
    s0 = profile.slice_index(t0)
    median0 = net.edge_length / (profile.base_speed * profile.multiplier[:, s0])
    weights = median0 * rng.uniform(1.0, 1.0 + epsilon, size=net.n_edges)
    path = shortest_path(net, o, d, weights)
    t = float(t0)
    points = [(path[0], t)]
    for u, v in zip(path, path[1:]):
        e = net.edge_id(u, v)
        s = profile.slice_index(t)
        t += sample_edge_time(profile.traversal_time(net, e, t), profile.noise_scale[e, s], rng)
        points.append((v, t))
    return Trip(query.query_id, tuple(points)), tuple(path)


@dataclass
class DataConfig:
    rows: int = 5
    cols: int = 5
    spacing: float = 500.0
    n_trips: int = 1000
    split_train: float = 0.6
    split_val: float = 0.1
    split_calib: float = 0.15
    split_test: float = 0.15
    seed: int = 0
    start_time: int = 0
    horizon: int = 14400
    slice_len: int = 600
    speed_mean: float = 10.0
    noise_scale: float = 0.15
    noise_scale_high: float | None = None
    peak_amplitude: float = 0.5
    epsilon: float = 0.3
    min_hops: int = 2

    def validate(self):
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fr}")
        if self.n_trips < 1:
            raise ConfigError("n_trips must be positive")
        if self.horizon <= 0 or self.slice_len <= 0:
            raise ConfigError("horizon and slice_len must be positive")
        if self.epsilon < 0 or self.noise_scale < 0:
            raise ConfigError("epsilon and noise_scale must be non-negative")
        if self.min_hops < 1:
            raise ConfigError("min_hops must be >= 1")
        return self

    @property
    def fractions(self):
        return (self.split_train, self.split_val, self.split_calib, self.split_test)

    @property
    def n_slices(self) -> int:
        return max(1, -(-self.horizon // self.slice_len))


@dataclass
class Dataset:
    network: RoadNetwork
    trips: list[Trip]
    queries: list[OdtQuery]
    split_labels: dict[int, str]
    profile: CongestionProfile | None = field(default=None, repr=False)

    def split(self, name: str) -> list[int]:
        """Positions (not trip ids) of the trips in split ``name``, in trip order."""
        if name not in SPLIT_NAMES:
            raise ContractError(f"unknown split {name!r}")
        return [i for i, t in enumerate(self.trips) if self.split_labels[t.trip_id] == name]

    def subset(self, name: str) -> tuple[list[Trip], list[OdtQuery]]:
        idx = self.split(name)
        return [self.trips[i] for i in idx], [self.queries[i] for i in idx]

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        save_network(self.network, os.path.join(directory, "network.txt"))
        save_trips(self.trips, os.path.join(directory, "trips.txt"))
        save_queries(self.queries, os.path.join(directory, "queries.txt"))
        save_splits(self.split_labels, os.path.join(directory, "splits.txt"))

    @classmethod
    def load(cls, directory) -> "Dataset":
        net = load_network(os.path.join(directory, "network.txt"))
        trips = load_trips(os.path.join(directory, "trips.txt"))
        queries = load_queries(os.path.join(directory, "queries.txt"))
        labels = load_splits(os.path.join(directory, "splits.txt"))
        if [t.trip_id for t in trips] != [q.query_id for q in queries]:
            raise ContractError("trips and queries are not aligned")
        missing = {t.trip_id for t in trips} - set(labels)
        if missing:
            raise ContractError(f"trips without split label: {sorted(missing)[:5]}")
        return cls(net, trips, queries, labels)


def split_counts(n: int, fractions) -> list[int]:
    counts = [int(np.floor(f * n + 1e-9)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def build_dataset(config: DataConfig) -> Dataset:
    """Generate network, congestion, ``n_trips`` trips and their split labels."""
    config.validate()
    seed = config.seed
    net = generate_grid_network(config.rows, config.cols, config.spacing, seed)
    profile = make_congestion_profile(
        net, config.n_slices, config.slice_len, seed, config.speed_mean,
        config.noise_scale, config.noise_scale_high, config.peak_amplitude,
        config.start_time)
    hops = [hop_distances(net, v) for v in range(net.n_nodes)]
    trips, queries = [], []
    for tid in range(config.n_trips):
        rng = _rng(seed, _QUERY, tid)
        while True:
            o, d = rng.choice(net.n_nodes, size=2, replace=False)
            if hops[o].get(d, 0) >= config.min_hops:
                break
        dep = config.start_time + int(rng.integers(0, config.horizon))
        q = OdtQuery(tid, tuple(map(float, net.coords[o])), tuple(map(float, net.coords[d])), dep)
        trip, _ = simulate_trip(net, profile, q, [seed, _TRIP, tid], config.epsilon)
        trips.append(trip)
        queries.append(q)

    order = _rng(seed, _SPLIT).permutation(config.n_trips)
    labels: dict[int, str] = {}
    pos = 0
    for name, cnt in zip(SPLIT_NAMES, split_counts(config.n_trips, config.fractions)):
        for i in order[pos:pos + cnt]:
            labels[trips[i].trip_id] = name
        pos += cnt
    return Dataset(net, trips, queries, labels, profile)
