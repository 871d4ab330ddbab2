"""
Unit tests for path_analysis.py

Path counting is checked against a recursive enumerator over the simple
graph weighted by parallel-link multiplicity.
"""

import math
from collections import Counter
from pathlib import Path

import networkx as nx
import pytest

from path_analysis import (
    PathAnalysisError,
    PathCount,
    PathGroup,
    SynthesisError,
    add_cross_links,
    add_parallel_links,
    augment_topology,
    augmentation_report,
    bearing_deg,
    build_path_group,
    cdf_from_counts,
    count_all_paths,
    count_paths,
    distance_m,
    load_coordinates,
    path_count_cdf,
    port_weights,
    synthesis_summary,
    synthesize_topology,
    upstream_neighbors,
    write_cdf_csv,
)
from tests.graph_corpus import corpus
from topo_model import BACKHAUL, EDGE, GATEWAY, Link, Node, Topology, load_topology, path_spec, validate

SAMPLES = Path(__file__).resolve().parent.parent / "samples"
GOLDEN = Path(__file__).resolve().parent / "golden"


# --- Fixtures ---

@pytest.fixture
def tree64() -> Topology:
    return load_topology(SAMPLES / "tree64.json")


@pytest.fixture
def small_mesh() -> Topology:
    """Ten nodes: a tree plus a few cross and parallel links."""
    nodes = [Node("g", GATEWAY)] + [Node(f"b{i}", BACKHAUL) for i in range(1, 5)] + [
        Node(f"e{i}", EDGE) for i in range(1, 6)
    ]
    links = [
        Link("g", "b1", 100.0), Link("g", "b2", 100.0), Link("b1", "b3", 50.0), Link("b2", "b4", 50.0),
        Link("b3", "e1", 10.0), Link("b3", "e2", 10.0), Link("b4", "e3", 10.0), Link("b4", "e4", 10.0),
        Link("b1", "e5", 10.0),
        # cross links
        Link("b3", "b4", 20.0), Link("e2", "e3", 10.0), Link("b1", "b2", 40.0),
        # parallel links
        Link("g", "b1", 100.0), Link("b3", "e1", 10.0),
    ]
    return Topology.build(nodes, links)


def enumerate_paths(topo: Topology, src: str, dst: str) -> int:
    """Recursive simple-path enumeration weighted by link multiplicity."""
    multiplicity = Counter(link.endpoints for link in topo.links)
    graph = topo.simple_graph()

    def walk(node: str, visited: set[str]) -> int:
        if node == dst:
            return 1
        total = 0
        for nxt in graph.neighbors(node):
            if nxt not in visited:
                m = multiplicity[(node, nxt) if node <= nxt else (nxt, node)]
                total += m * walk(nxt, visited | {nxt})
        return total

    return walk(src, {src})


def coordinates_csv(path: Path, rows: list[tuple[str, float, float]]) -> Path:
    path.write_text("id,lat,lon\n" + "".join(f"{i},{lat},{lon}\n" for i, lat, lon in rows))
    return path


# --- Tests for count_paths ---

def test_count_paths_matches_recursive_enumeration(small_mesh: Topology):
    for edge in small_mesh.edge_nodes:
        assert count_paths(small_mesh, edge) == PathCount(enumerate_paths(small_mesh, edge, "g"), False)


def test_count_paths_on_augmented_tree_matches_enumeration(tree64: Topology):
    augmented = augment_topology(tree64, "both", 4, rng_seed=3)

    for edge in augmented.edge_nodes[:10]:
        assert count_paths(augmented, edge).count == enumerate_paths(augmented, edge, "g00")


def test_count_paths_matches_enumeration_on_corpus():
    for topo in corpus():
        for edge in topo.edge_nodes:
            assert count_paths(topo, edge) == PathCount(enumerate_paths(topo, edge, "g"), False)


def test_count_paths_tree_has_one_path_per_edge(tree64: Topology):
    assert {count_paths(tree64, e) for e in tree64.edge_nodes} == {PathCount(1, False)}


def test_count_paths_truncates_at_cap(small_mesh: Topology):
    exact = enumerate_paths(small_mesh, "e2", "g")
    assert exact > 3

    assert count_paths(small_mesh, "e2", cap=3) == PathCount(3, True)
    assert count_paths(small_mesh, "e2", cap=exact) == PathCount(exact, True)
    assert count_paths(small_mesh, "e2", cap=exact + 1) == PathCount(exact, False)


def test_count_paths_reaching_cap_exactly_is_truncated():
    # diamond: two routes from e to g
    topo = Topology.build(
        [Node("g", GATEWAY), Node("a", BACKHAUL), Node("b", BACKHAUL), Node("e", EDGE)],
        [Link("g", "a", 10.0), Link("g", "b", 10.0), Link("a", "e", 10.0), Link("b", "e", 10.0)],
    )

    assert count_paths(topo, "e", cap=2) == PathCount(2, True)
    assert count_paths(topo, "e", cap=3) == PathCount(2, False)
    assert count_paths(topo, "e", cap=1) == PathCount(1, True)


def test_count_paths_unreachable_edge_is_zero():
    topo = Topology.build([Node("g", GATEWAY), Node("e", EDGE)], [])

    assert count_paths(topo, "e") == PathCount(0, False)


def test_count_paths_rejects_non_edge(small_mesh: Topology):
    with pytest.raises(PathAnalysisError, match="not an edge node"):
        count_paths(small_mesh, "b1")


def test_count_all_paths_is_the_same_with_worker_processes(small_mesh: Topology):
    serial = count_all_paths(small_mesh, workers=1)
    pooled = count_all_paths(small_mesh, workers=2)

    assert serial == pooled
    assert list(serial) == sorted(small_mesh.edge_nodes)


# --- Tests for augmentation ---

def test_add_cross_links_joins_non_adjacent_pairs(tree64: Topology):
    augmented = add_cross_links(tree64, 20, rng_seed=42)

    added = augmented.links[len(tree64.links):]
    original = {link.endpoints for link in tree64.links}
    assert len(added) == 20
    assert all(link.endpoints not in original for link in added)
    assert len({link.endpoints for link in added}) == 20


def test_add_cross_links_copies_smallest_incident_capacity():
    topo = Topology.build(
        [Node("g", GATEWAY), Node("a", BACKHAUL), Node("e", EDGE)],
        [Link("g", "a", 100.0), Link("a", "e", 30.0)],
    )

    augmented = add_cross_links(topo, 1, rng_seed=0)

    # The only non-adjacent pair is (e, g)
    assert augmented.links[-1].endpoints == ("e", "g")
    assert augmented.links[-1].capacity == pytest.approx(30.0)


def test_add_parallel_links_duplicates_upstream_link():
    topo = Topology.build(
        [Node("g", GATEWAY), Node("b", BACKHAUL), Node("e", EDGE)],
        [Link("g", "b", 100.0), Link("b", "e", 10.0)],
    )

    augmented = add_parallel_links(topo, 1, rng_seed=5)

    assert len(augmented.links) == 3
    assert augmented.links[-1].endpoints in {("b", "g"), ("b", "e")}
    assert augmented.links[-1].capacity == pytest.approx(10.0)
    assert count_paths(augmented, "e") == PathCount(2, False)


def test_parallel_link_takes_smallest_incident_capacity():
    topo = Topology.build(
        [Node("g", GATEWAY), Node("b", BACKHAUL), Node("e", EDGE)],
        [Link("g", "b", 100.0, loss_rate=0.01, delay=3.0), Link("b", "e", 10.0)],
    )

    augmented = add_parallel_links(topo, 20, rng_seed=1)

    upstream = [link for link in augmented.links[2:] if link.endpoints == ("b", "g")]
    assert upstream
    assert all(link.capacity == 10.0 for link in upstream)
    assert all((link.loss_rate, link.delay) == (0.01, 3.0) for link in upstream)


def test_add_parallel_links_needs_a_tree(small_mesh: Topology):
    with pytest.raises(PathAnalysisError, match="not a tree"):
        add_parallel_links(small_mesh, 3, rng_seed=1)


def test_upstream_neighbors_of_tree(tree64: Topology):
    parents = upstream_neighbors(tree64)

    assert parents["b01"] == "g00"
    assert parents["b05"] == "b01"
    assert parents["e01"] == "b05"
    assert "g00" not in parents


def test_augment_topology_rejects_unknown_kind(tree64: Topology):
    with pytest.raises(PathAnalysisError, match="unknown augmentation"):
        augment_topology(tree64, "diagonal", 3, rng_seed=0)


def test_augment_zero_links_is_identity(tree64: Topology):
    for kind in ("cross", "parallel", "both"):
        assert augment_topology(tree64, kind, 0, rng_seed=0) == tree64


def test_both_lies_right_of_parallel(tree64: Topology):
    # Arrange
    parallel = augment_topology(tree64, "parallel", 20, rng_seed=42)
    both = augment_topology(tree64, "both", 20, rng_seed=42)

    # Act
    parallel_counts = count_all_paths(parallel)
    both_counts = count_all_paths(both)

    # Assert
    assert all(both_counts[e].count >= parallel_counts[e].count for e in tree64.edge_nodes)
    parallel_cdf = dict(cdf_from_counts(c.count for c in parallel_counts.values()))
    both_cdf = cdf_from_counts(c.count for c in both_counts.values())
    for value, fraction in both_cdf:
        below = [f for v, f in parallel_cdf.items() if v <= value]
        assert fraction <= (max(below) if below else 0.0) + 1e-12


def test_augmentation_report_frame(tree64: Topology):
    augmented = add_cross_links(tree64, 5, rng_seed=9)

    report = augmentation_report(tree64, augmented)
    frame = report.to_frame()

    assert len(report.links_added) == 5
    assert frame.columns == ["edge", "paths_before", "paths_after", "truncated_before", "truncated_after"]
    assert frame.height == 41
    assert set(frame["paths_before"].to_list()) == {1}
    assert (frame["paths_after"] >= frame["paths_before"]).all()


# --- Tests for the CDF ---

def test_cdf_from_counts():
    assert cdf_from_counts([4, 1, 2, 1]) == [(1, 0.5), (2, 0.75), (4, 1.0)]
    assert cdf_from_counts([]) == []


def test_tree_cdf_matches_golden_file(tmp_path: Path, tree64: Topology):
    cdf = path_count_cdf(tree64)

    path = write_cdf_csv(cdf, tmp_path / "path_cdf.csv")

    assert cdf == [(1, 1.0)]
    assert path.read_text() == (GOLDEN / "path_cdf_tree64.csv").read_text()


def test_cross_augmentation_is_reproducible(tmp_path: Path, tree64: Topology):
    first = write_cdf_csv(path_count_cdf(add_cross_links(tree64, 20, 42)), tmp_path / "a.csv")
    second = write_cdf_csv(path_count_cdf(add_cross_links(tree64, 20, 42)), tmp_path / "b.csv")

    assert first.read_bytes() == second.read_bytes()


# --- Tests for geometry helpers ---

def test_distance_and_bearing():
    north = distance_m(39.0, -123.0, 39.009, -123.0)

    assert north == pytest.approx(1000.8, rel=1e-3)
    assert bearing_deg(39.0, -123.0, 39.01, -123.0) == pytest.approx(0.0, abs=1e-9)
    assert bearing_deg(39.0, -123.0, 39.0, -122.99) == pytest.approx(90.0)
    assert bearing_deg(39.0, -123.0, 38.99, -123.0) == pytest.approx(180.0)


# --- Tests for synthesize_topology ---

def test_synthesize_collinear_points_gives_chain():
    coordinates = [("p1", 39.0, -123.0), ("p2", 39.009, -123.0), ("p3", 39.018, -123.0)]

    topo = synthesize_topology(coordinates, rng_seed=0)

    assert len(topo.nodes) == 3
    assert topo.gateway == "p2"
    assert sorted(link.endpoints for link in topo.links) == [("p1", "p2"), ("p2", "p3")]
    assert nx.is_isomorphic(topo.simple_graph(), nx.path_graph(3))
    assert validate(topo) == []


def test_synthesize_link_attributes():
    coordinates = [("p1", 39.0, -123.0), ("p2", 39.009, -123.0), ("p3", 39.018, -123.0)]

    topo = synthesize_topology(coordinates, rng_seed=0)
    link = next(link for link in topo.links if link.endpoints == ("p2", "p3"))

    assert link.capacity == pytest.approx(10.0)
    assert link.delay == pytest.approx(1000.8 / 299_792.458, rel=1e-3)
    assert link.bearing_a == pytest.approx(0.0, abs=1e-6)
    assert link.bearing_b == pytest.approx(180.0)


def test_synthesize_two_close_points_is_degenerate():
    # About 300 m apart, inside the 500 m clustering radius
    coordinates = [("a", 39.0, -123.0), ("b", 39.0027, -123.0)]

    with pytest.raises(SynthesisError, match="degenerate"):
        synthesize_topology(coordinates)


def test_synthesize_needs_two_sites():
    with pytest.raises(SynthesisError, match="at least 2"):
        synthesize_topology([("a", 39.0, -123.0)])


def test_synthesize_bundled_sample_is_valid_and_layered():
    # Arrange
    coordinates = load_coordinates(SAMPLES / "coordinates_sample.csv")

    # Act
    topo = synthesize_topology(coordinates, fanout=10, rng_seed=7)

    # Assert
    assert validate(topo) == []
    summary = synthesis_summary(topo)
    assert sum(summary["depth_histogram"].values()) == summary["nodes"]
    assert summary["nodes"] <= 50
    depth = nx.single_source_shortest_path_length(topo.simple_graph(), topo.gateway)
    layer_sizes = Counter(depth.values())
    for node_id in topo.node_ids:
        if node_id == topo.gateway:
            continue
        parents = [v for v in topo.neighbors(node_id) if depth[v] == depth[node_id] - 1]
        assert len(parents) == min(10, layer_sizes[depth[node_id] - 1])


def test_synthesize_is_reproducible():
    coordinates = load_coordinates(SAMPLES / "coordinates_sample.csv")

    assert synthesize_topology(coordinates, rng_seed=7) == synthesize_topology(coordinates, rng_seed=7)


def test_load_coordinates_reports_bad_row(tmp_path: Path):
    path = tmp_path / "coords.csv"
    path.write_text("id,lat,lon\na,39.0,-123.0\nb,north,-123.0\n")

    with pytest.raises(PathAnalysisError, match=":3:"):
        load_coordinates(path)


def test_load_coordinates_roundtrip(tmp_path: Path):
    rows = [("a", 39.0, -123.0), ("b", 39.5, -123.5)]

    assert load_coordinates(coordinates_csv(tmp_path / "c.csv", rows)) == rows


# --- Tests for path groups ---

def test_build_path_group_weights_by_capacity():
    topo = load_topology(SAMPLES / "five_paths.json")

    group = build_path_group(topo, "s", "d", 3)

    assert group.k == 3
    assert group.weights == pytest.approx((1 / 3, 1 / 3, 1 / 3))


def test_build_path_group_disconnected_pair():
    topo = Topology.build([Node("g", GATEWAY), Node("e", EDGE)], [])

    with pytest.raises(PathAnalysisError, match="disconnected pair"):
        build_path_group(topo, "g", "e", 2)


def test_path_group_rejects_bad_weights_and_shared_interiors():
    topo = load_topology(SAMPLES / "five_paths.json")
    p1 = path_spec(topo, ["s", "m1", "d"])
    p2 = path_spec(topo, ["s", "m2", "d"])

    with pytest.raises(PathAnalysisError, match="sum to"):
        PathGroup(paths=(p1, p2), weights=(0.5, 0.6))
    with pytest.raises(PathAnalysisError, match="share interior"):
        PathGroup(paths=(p1, p1), weights=(0.5, 0.5))
    with pytest.raises(PathAnalysisError, match="negative"):
        PathGroup(paths=(p1, p2), weights=(1.5, -0.5))


def test_port_weights_normalize_per_switch():
    topo = load_topology(SAMPLES / "five_paths.json")
    group = build_path_group(topo, "s", "d", 5)

    weights = port_weights([group])

    for i in range(1, 6):
        assert weights[("s", f"m{i}")] == pytest.approx(0.2)
        assert weights[(f"m{i}", "d")] == pytest.approx(1.0)
    assert math.fsum(w for (u, _), w in weights.items() if u == "s") == pytest.approx(1.0)
