import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odtq.exceptions import ParseError, ValidationError
from odtq.roadnet import (OdtQuery, RoadNetwork, Trip, check_path, load_network, load_queries,
                          load_splits, load_trips, nearest_node, out_neighbors, path_edges,
                          save_network, save_queries, save_splits, save_trips)
from odtq.synthgen import generate_grid_network


def _write(tmp_path, text, name="net.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_minimal_network(tmp_path):
    p = _write(tmp_path, "#nodes 2 #edges 1\nN 0 0.0 0.0\nN 1 1.0 0.0\nE 0 0 1 100\n")
    net = load_network(p)
    assert (net.n_nodes, net.n_edges) == (2, 1)
    assert out_neighbors(net, 0) == (1,)


def test_edge_to_missing_node_rejected(tmp_path):
    nodes = "".join(f"N {i} {i}.0 0.0\n" for i in range(5))
    p = _write(tmp_path, f"#nodes 5 #edges 1\n{nodes}E 0 0 99 10\n")
    with pytest.raises(ValidationError):
        load_network(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = _write(tmp_path, "#nodes 2 #edges 1\nN 0 0.0 0.0\nN 1 oops 0.0\nE 0 0 1 100\n")
    with pytest.raises(ParseError) as exc:
        load_network(p)
    assert exc.value.line == 3


@pytest.mark.parametrize("edges", [[(0, 0, 1.0)], [(0, 1, 0.0)], [(0, 1, 1.0), (0, 1, 2.0)]])
def test_invalid_edges(edges):
    with pytest.raises(ValidationError):
        RoadNetwork(np.zeros((2, 2)) + [[0, 0], [1, 1]], edges)


def test_round_trip_100_nodes(tmp_path):
    net = generate_grid_network(10, 10, 250.0, seed=7)
    save_network(net, tmp_path / "n.txt")
    back = load_network(tmp_path / "n.txt")
    assert back.structurally_equal(net)
    save_network(back, tmp_path / "n2.txt")
    assert (tmp_path / "n.txt").read_bytes() == (tmp_path / "n2.txt").read_bytes()


def test_adjacency_sorted_and_interior_degree(grid3):
    # node 4 is the centre of a 3x3 lattice
    assert out_neighbors(grid3, 4) == (1, 3, 5, 7)
    for adj in grid3.adjacency:
        assert list(adj) == sorted(adj)


def test_out_neighbors_sink_and_chain(chain2):
    assert out_neighbors(chain2, 0) == (1,)
    assert out_neighbors(chain2, 1) == ()
    with pytest.raises(IndexError):
        out_neighbors(chain2, 2)


def test_normalized_coords_span_unit_box(grid5):
    nc = grid5.norm_coords
    assert np.allclose(nc.min(axis=0), 0) and np.allclose(nc.max(axis=0), 1)


def test_nearest_node_exact_and_tie():
    coords = np.array([[0, 0], [2, 0], [0, 3], [3, 3], [1, 3], [2, 1], [3, 0], [1, 2]], float)
    net = RoadNetwork(coords, [(0, 1, 1.0)])
    assert nearest_node(net, coords[7]) == 7
    # (2, 0.5) is equidistant from nodes 1 and 5 -> smaller id wins
    assert nearest_node(net, (2.0, 0.5)) == 1


def test_nearest_node_brute_force(rng):
    net = generate_grid_network(10, 10, 100.0, seed=1)
    x0, y0, x1, y1 = net.bbox
    for _ in range(200):
        p = (rng.uniform(x0, x1), rng.uniform(y0, y1))
        q = net.normalize(p)
        d = [float(np.hypot(*(net.norm_coords[i] - q))) for i in range(net.n_nodes)]
        assert nearest_node(net, p) == min(range(net.n_nodes), key=lambda i: (d[i], i))


def test_check_path(grid3):
    assert check_path(grid3, [0, 1, 2, 5]) == (0, 1, 2, 5)
    with pytest.raises(ValidationError):
        check_path(grid3, [0])
    with pytest.raises(ValidationError):
        check_path(grid3, [0, 4])
    assert len(path_edges(grid3, [0, 1, 2])) == 2


def test_trip_invariants():
    t = Trip(1, ((0, 10.0), (1, 15.0), (2, 15.0)))
    assert t.travel_time == 5.0 and t.path == (0, 1, 2) and t.edge_times() == [5.0, 0.0]
    with pytest.raises(ValidationError):
        Trip(2, ((0, 10.0), (1, 9.0)))


def test_trips_queries_splits_round_trip(tmp_path):
    trips = [Trip(3, ((0, 0), (1, 12), (4, 40))), Trip(9, ((5, 600), (4, 700)))]
    save_trips(trips, tmp_path / "t.txt")
    assert load_trips(tmp_path / "t.txt") == trips
    qs = [OdtQuery(3, (0.5, 1.25), (3.0, 4.0), 0), OdtQuery(9, (1e-3, 2.0), (5.5, 6.5), 600)]
    save_queries(qs, tmp_path / "q.txt")
    back = load_queries(tmp_path / "q.txt")
    assert [(q.query_id, q.origin, q.destination, q.departure_time) for q in back] == \
        [(q.query_id, q.origin, q.destination, q.departure_time) for q in qs]
    save_splits({3: "train", 9: "test"}, tmp_path / "s.txt")
    assert load_splits(tmp_path / "s.txt") == {3: "train", 9: "test"}


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(2, 6), cols=st.integers(2, 6), seed=st.integers(0, 2**32 - 1))
def test_save_load_identity_property(tmp_path_factory, rows, cols, seed):
    net = generate_grid_network(rows, cols, 300.0, seed=seed)
    p = tmp_path_factory.mktemp("rt") / "n.txt"
    save_network(net, p)
    assert load_network(p).structurally_equal(net)
