"""Road network graph, trip/query records and their text file formats.

Network file::

    #nodes N #edges E
    N <id> <lng> <lat>
    E <id> <from> <to> <length>

Trips file, one trip per line: ``<trip_id>;<node:ts>,<node:ts>,...``.
Queries file: ``<query_id>;<lng_o>,<lat_o>;<lng_d>,<lat_d>;<departure_ts>``.
Splits file: ``<trip_id> <train|val|calib|test>``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ContractError, ParseError, ValidationError

SPLIT_NAMES = ("train", "val", "calib", "test")


def fmt_float(x: float) -> str:
    """Serialize a float with 9 significant digits."""
    return "%.9g" % x


def round_sig(x: float) -> float:
    """Round ``x`` to what survives a save/load cycle."""
    return float(fmt_float(x))


class RoadNetwork:
    """Directed road graph with dense node and edge ids.

    Parameters
    ----------
    coords : array-like of shape (n_nodes, 2)
        Raw ``(lng, lat)`` per node; node ``i`` is row ``i``.
    edges : sequence of (from_node, to_node, length)
        Edge ``j`` is element ``j``.
    """

    def __init__(self, coords, edges: Sequence[tuple[int, int, float]]):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValidationError(f"coords must have shape (n, 2), got {coords.shape}")
        n = coords.shape[0]
        if n == 0:
            raise ValidationError("network has no nodes")
        src = np.empty(len(edges), dtype=np.int64)
        dst = np.empty(len(edges), dtype=np.int64)
        length = np.empty(len(edges), dtype=np.float64)
        lookup: dict[tuple[int, int], int] = {}
        for eid, (u, v, ln) in enumerate(edges):
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValidationError(
                    f"edge {eid} references node outside 0..{n - 1}: ({u}, {v})")
            if u == v:
                raise ValidationError(f"edge {eid} is a self-loop on node {u}")
            if not ln > 0:
                raise ValidationError(f"edge {eid} has non-positive length {ln}")
            if (u, v) in lookup:
                raise ValidationError(f"edge {eid} duplicates edge {lookup[(u, v)]}")
            lookup[(u, v)] = eid
            src[eid], dst[eid], length[eid] = u, v, float(ln)

        self.coords = coords
        self.coords.setflags(write=False)
        self.edge_src, self.edge_dst, self.edge_length = src, dst, length
        for arr in (src, dst, length):
            arr.setflags(write=False)
        self._edge_lookup = lookup
        out: list[list[int]] = [[] for _ in range(n)]
        for (u, v) in lookup:
            out[u].append(v)
        self._adjacency = tuple(tuple(sorted(a)) for a in out)

        lo = coords.min(axis=0)
        span = coords.max(axis=0) - lo
        self._lo = lo
        self._span = np.where(span > 0, span, 1.0)
        self.norm_coords = (coords - lo) / self._span
        self.norm_coords.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_src.shape[0]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """``(min_lng, min_lat, max_lng, max_lat)`` of the raw coordinates."""
        lo = self.coords.min(axis=0)
        hi = self.coords.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        return self._adjacency

    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(v), float(ln)) for u, v, ln in
                zip(self.edge_src, self.edge_dst, self.edge_length)]

    def edge_id(self, u: int, v: int) -> int:
        try:
            return self._edge_lookup[(int(u), int(v))]
        except KeyError:
            raise ValidationError(f"({u}, {v}) is not an edge") from None

    def has_edge(self, u: int, v: int) -> bool:
        return (int(u), int(v)) in self._edge_lookup

    def normalize(self, point) -> np.ndarray:
        """Map raw ``(lng, lat)`` into the unit-box frame of this network."""
        return (np.asarray(point, dtype=np.float64) - self._lo) / self._span

    def structurally_equal(self, other: "RoadNetwork") -> bool:
        return (np.array_equal(self.coords, other.coords)
                and np.array_equal(self.edge_src, other.edge_src)
                and np.array_equal(self.edge_dst, other.edge_dst)
                and np.array_equal(self.edge_length, other.edge_length))

    def __repr__(self):
        return f"RoadNetwork(n_nodes={self.n_nodes}, n_edges={self.n_edges})"


def out_neighbors(net: RoadNetwork, v: int) -> tuple[int, ...]:
    """Sorted out-neighbors of ``v``; empty for a dead end."""
    v = int(v)
    if not 0 <= v < net.n_nodes:
        raise IndexError(f"node {v} not in network of {net.n_nodes} nodes")
    return net.adjacency[v]


def normalized_distance(a, b) -> float:
    """Euclidean distance between two points already in the unit-box frame."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(d @ d))


def nearest_node(net: RoadNetwork, point) -> int:
    """Closest node to ``point`` in normalized coordinates, smallest id on ties."""
    p = net.normalize(point)
    d2 = ((net.norm_coords - p) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def check_path(net: RoadNetwork, nodes: Sequence[int]) -> tuple[int, ...]:
    """Validate a node sequence as a path of ``net`` and return it as a tuple."""
    path = tuple(int(v) for v in nodes)
    if len(path) < 2:
        raise ValidationError(f"path needs at least 2 nodes, got {len(path)}")
    for v in path:
        if not 0 <= v < net.n_nodes:
            raise ValidationError(f"path node {v} is not in the network")
    for u, v in zip(path, path[1:]):
        if not net.has_edge(u, v):
            raise ValidationError(f"path step ({u}, {v}) is not an edge")
    return path


def path_edges(net: RoadNetwork, nodes: Sequence[int]) -> list[int]:
    return [net.edge_id(u, v) for u, v in zip(nodes, nodes[1:])]


@dataclass(frozen=True)
class Trip:
    """A map-matched trip: timestamped nodes along a path."""

    trip_id: int
    points: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValidationError(f"trip {self.trip_id} has fewer than 2 points")
        ts = [t for _, t in self.points]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"trip {self.trip_id} timestamps decrease")

    @property
    def path(self) -> tuple[int, ...]:
        return tuple(v for v, _ in self.points)

    @property
    def departure_time(self) -> float:
        return self.points[0][1]

    @property
    def travel_time(self) -> float:
        return self.points[-1][1] - self.points[0][1]

    def edge_times(self) -> list[float]:
        ts = [t for _, t in self.points]
        return [b - a for a, b in zip(ts, ts[1:])]


@dataclass(frozen=True)
class OdtQuery:
    """Origin point, destination point and departure time."""

    query_id: int
    origin: tuple[float, float]
    destination: tuple[float, float]
    departure_time: float


def check_query(net: RoadNetwork, q: OdtQuery, tol: float = 1e-9) -> OdtQuery:
    x0, y0, x1, y1 = net.bbox
    for name, (x, y) in (("origin", q.origin), ("destination", q.destination)):
        if not (x0 - tol <= x <= x1 + tol and y0 - tol <= y <= y1 + tol):
            raise ValidationError(f"query {q.query_id} {name} {(x, y)} outside network bbox")
    return q


def resolve_query(net: RoadNetwork, q: OdtQuery) -> tuple[int, int]:
    return nearest_node(net, q.origin), nearest_node(net, q.destination)


# ---------------------------------------------------------------- file I/O

def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line:
                yield lineno, line


def save_network(net: RoadNetwork, path) -> None:
    lines = [f"#nodes {net.n_nodes} #edges {net.n_edges}"]
    for i, (x, y) in enumerate(net.coords):
        lines.append(f"N {i} {fmt_float(x)} {fmt_float(y)}")
    for j, (u, v, ln) in enumerate(net.edges()):
        lines.append(f"E {j} {u} {v} {fmt_float(ln)}")
    _write_text(path, lines)


def load_network(path) -> RoadNetwork:
    """Parse and validate a network file."""
    it = _read_lines(path)
    try:
        lineno, header = next(it)
    except StopIteration:
        raise ParseError("empty network file", path=path) from None
    parts = header.split()
    if len(parts) != 4 or parts[0] != "#nodes" or parts[2] != "#edges":
        raise ParseError("expected header '#nodes N #edges E'", lineno, path)
    try:
        n_nodes, n_edges = int(parts[1]), int(parts[3])
    except ValueError:
        raise ParseError("non-integer counts in header", lineno, path) from None

    nodes: dict[int, tuple[float, float]] = {}
    edges: dict[int, tuple[int, int, float]] = {}
    for lineno, line in it:
        f = line.split()
        try:
            if f[0] == "N" and len(f) == 4:
                nid = int(f[1])
                if nid in nodes:
                    raise ParseError(f"duplicate node id {nid}", lineno, path)
                nodes[nid] = (float(f[2]), float(f[3]))
            elif f[0] == "E" and len(f) == 5:
                eid = int(f[1])
                if eid in edges:
                    raise ParseError(f"duplicate edge id {eid}", lineno, path)
                edges[eid] = (int(f[2]), int(f[3]), float(f[4]))
            else:
                raise ParseError(f"malformed record {line!r}", lineno, path)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad number in {line!r}", lineno, path) from None

    if len(nodes) != n_nodes or len(edges) != n_edges:
        raise ValidationError(
            f"{path}: header declares {n_nodes} nodes/{n_edges} edges, "
            f"found {len(nodes)}/{len(edges)}")
    if set(nodes) != set(range(n_nodes)):
        raise ValidationError(f"{path}: node ids are not dense 0..{n_nodes - 1}")
    if set(edges) != set(range(n_edges)):
        raise ValidationError(f"{path}: edge ids are not dense 0..{n_edges - 1}")
    coords = [nodes[i] for i in range(n_nodes)]
    return RoadNetwork(coords, [edges[j] for j in range(n_edges)])


def save_trips(trips: Iterable[Trip], path) -> None:
    lines = []
    for trip in trips:
        pts = ",".join(f"{v}:{_fmt_ts(t)}" for v, t in trip.points)
        lines.append(f"{trip.trip_id};{pts}")
    _write_text(path, lines)


def load_trips(path) -> list[Trip]:
    trips = []
    for lineno, line in _read_lines(path):
        try:
            tid, body = line.split(";")
            pts = []
            for tok in body.split(","):
                v, t = tok.split(":")
                pts.append((int(v), int(t)))
            trips.append(Trip(int(tid), tuple(pts)))
        except ValidationError as exc:
            raise ParseError(str(exc), lineno, path) from None
        except ValueError:
            raise ParseError(f"malformed trip record {line!r}", lineno, path) from None
    return trips


def save_queries(queries: Iterable[OdtQuery], path) -> None:
    lines = []
    for q in queries:
        lines.append(
            f"{q.query_id};{fmt_float(q.origin[0])},{fmt_float(q.origin[1])};"
            f"{fmt_float(q.destination[0])},{fmt_float(q.destination[1])};"
            f"{_fmt_ts(q.departure_time)}")
    _write_text(path, lines)


def load_queries(path) -> list[OdtQuery]:
    out = []
    for lineno, line in _read_lines(path):
        try:
            qid, o, d, ts = line.split(";")
            ox, oy = (float(s) for s in o.split(","))
            dx, dy = (float(s) for s in d.split(","))
            out.append(OdtQuery(int(qid), (ox, oy), (dx, dy), int(ts)))
        except ValueError:
            raise ParseError(f"malformed query record {line!r}", lineno, path) from None
    return out


def save_splits(labels: dict[int, str], path) -> None:
    _write_text(path, [f"{tid} {labels[tid]}" for tid in sorted(labels)])


def load_splits(path) -> dict[int, str]:
    out = {}
    for lineno, line in _read_lines(path):
        f = line.split()
        if len(f) != 2 or f[1] not in SPLIT_NAMES:
            raise ParseError(f"malformed split record {line!r}", lineno, path)
        try:
            out[int(f[0])] = f[1]
        except ValueError:
            raise ParseError(f"bad trip id in {line!r}", lineno, path) from None
    return out


def _fmt_ts(t) -> str:
    if float(t) != int(t):
        raise ContractError(f"timestamp {t} is not a whole second")
    return str(int(t))


def _write_text(path, lines) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
