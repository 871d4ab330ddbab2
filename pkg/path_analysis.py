"""
Path multiplicity analysis.

- Augmentation of tree topologies with "cross" links (between non-adjacent
  sites) and "parallel" links (duplicating a site's upstream link)
- Counting simple paths from every edge node to the gateway, and their CDF
- Synthesis of a layered topology from site coordinates
- Controller-side path groups: disjoint paths weighted by capacity and the
  per-switch outbound port weights they induce

Coordinates CSV: id,lat,lon.  CDF CSV: path_count,cum_fraction.
"""

import math
import multiprocessing as mp
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import networkx as nx
import numpy as np
import polars as pl

from topo_model import (
    BACKHAUL,
    EDGE,
    GATEWAY,
    MAX_MULTIPLICITY,
    Link,
    Node,
    PathSpec,
    Topology,
    shortest_disjoint_paths,
)
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_PATH_CAP = 10**6
DEFAULT_FANOUT = 10
DEFAULT_CLUSTER_RADIUS_M = 500.0
SYNTH_CAPACITY_MBPS = 10.0

EARTH_RADIUS_M = 6_371_000.0
LIGHT_M_PER_MS = 299_792.458

AUGMENT_KINDS = ("cross", "parallel", "both")
COORDINATE_COLUMNS = ["id", "lat", "lon"]
WEIGHT_TOLERANCE = 1e-9


class PathAnalysisError(ValueError):
    """Invalid augmentation, counting or grouping request."""


class SynthesisError(PathAnalysisError):
    """Coordinates cannot be turned into a usable topology."""


class PathCount(NamedTuple):
    count: int
    truncated: bool


@dataclass(frozen=True)
class PathGroup:
    paths: tuple[PathSpec, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not 1 <= len(self.paths) <= MAX_MULTIPLICITY:
            raise PathAnalysisError(f"path group needs 1..{MAX_MULTIPLICITY} paths, got {len(self.paths)}")
        if len(self.weights) != len(self.paths):
            raise PathAnalysisError(f"{len(self.weights)} weights for {len(self.paths)} paths")
        if any(w < 0 for w in self.weights):
            raise PathAnalysisError(f"negative weight in {list(self.weights)}")
        if abs(sum(self.weights) - 1.0) > WEIGHT_TOLERANCE:
            raise PathAnalysisError(f"weights sum to {sum(self.weights)}, not 1")
        seen: set[str] = set()
        for path in self.paths:
            shared = seen & set(path.interior)
            if shared:
                raise PathAnalysisError(f"paths share interior nodes {sorted(shared)}")
            seen |= set(path.interior)

    @property
    def k(self) -> int:
        return len(self.paths)

    def with_weights(self, weights: Iterable[float]) -> "PathGroup":
        return PathGroup(paths=self.paths, weights=tuple(weights))


@dataclass(frozen=True)
class AugmentationReport:
    links_added: tuple[Link, ...]
    before: dict[str, PathCount]
    after: dict[str, PathCount]

    def to_frame(self) -> pl.DataFrame:
        edges = sorted(self.before)
        return pl.DataFrame(
            {
                "edge": edges,
                "paths_before": [self.before[e].count for e in edges],
                "paths_after": [self.after[e].count for e in edges],
                "truncated_before": [self.before[e].truncated for e in edges],
                "truncated_after": [self.after[e].truncated for e in edges],
            },
            schema={
                "edge": pl.String,
                "paths_before": pl.Int64,
                "paths_after": pl.Int64,
                "truncated_before": pl.Boolean,
                "truncated_after": pl.Boolean,
            },
        )


# --- Augmentation ---

def _min_incident_link(topo: Topology, nodes: Iterable[str]) -> Link:
    incident = [link for node in nodes for link in topo.incident_links(node)]
    if not incident:
        raise PathAnalysisError(f"no links incident to {sorted(set(nodes))} to copy capacity from")
    return min(incident, key=lambda link: (link.capacity, link.index))


def add_cross_links(topo: Topology, n: int, rng_seed: int) -> Topology:
    """Add up to n links between randomly drawn non-adjacent node pairs.

    A new link takes the capacity (and loss, delay and channel width) of the
    smallest original link incident to either endpoint.
    """
    if n < 0:
        raise PathAnalysisError(f"link count must be >= 0, got {n}")
    if n == 0:
        return topo

    adjacent = {link.endpoints for link in topo.links}
    ids = topo.node_ids
    candidates = [
        (u, v) for i, u in enumerate(ids) for v in ids[i + 1:] if (u, v) not in adjacent
    ]
    count = min(n, len(candidates))
    if count < n:
        logger.warning(f"Only {count} non-adjacent pairs available for {n} cross links")
    if count == 0:
        return topo

    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(candidates), size=count, replace=False)
    new_links = []
    for pick in picks:
        u, v = candidates[int(pick)]
        template = _min_incident_link(topo, (u, v))
        new_links.append(
            Link(
                a=u,
                b=v,
                capacity=template.capacity,
                loss_rate=template.loss_rate,
                delay=template.delay,
                channel_width=template.channel_width,
            )
        )
    return topo.with_links(new_links)


def upstream_neighbors(topo: Topology) -> dict[str, str]:
    """Parent of every non-gateway node when the topology is a tree."""
    graph = topo.simple_graph()
    if not nx.is_tree(graph):
        raise PathAnalysisError("upstream neighbor undefined: topology is not a tree")
    return dict(nx.bfs_predecessors(graph, topo.gateway, sort_neighbors=sorted))


def add_parallel_links(topo: Topology, n: int, rng_seed: int) -> Topology:
    """Duplicate the upstream link of n uniformly drawn non-gateway nodes.

    Draws are with replacement. Parallel links already present do not count
    against tree-ness.
    A duplicate keeps the loss, delay and channel width of the link it
    copies but takes the capacity of the smallest link incident to the
    child or its parent.
    """
    if n < 0:
        raise PathAnalysisError(f"link count must be >= 0, got {n}")
    parents = upstream_neighbors(topo)
    if n == 0:
        return topo
    children = sorted(parents)
    if not children:
        raise PathAnalysisError("no non-gateway node to attach a parallel link to")

    rng = np.random.default_rng(rng_seed)
    new_links = []
    for pick in rng.integers(0, len(children), size=n):
        child = children[int(pick)]
        parent = parents[child]
        upstream = min(topo.links_between(child, parent), key=lambda link: link.index)
        capacity = _min_incident_link(topo, (child, parent)).capacity
        new_links.append(replace(upstream, capacity=capacity))
    return topo.with_links(new_links)


def augment_topology(topo: Topology, kind: str, n: int, rng_seed: int) -> Topology:
    """Apply one augmentation setting; "both" adds n parallel then n cross links."""
    if kind == "cross":
        return add_cross_links(topo, n, rng_seed)
    if kind == "parallel":
        return add_parallel_links(topo, n, rng_seed)
    if kind == "both":
        return add_cross_links(add_parallel_links(topo, n, rng_seed), n, rng_seed)
    raise PathAnalysisError(f"unknown augmentation '{kind}' (expected one of {AUGMENT_KINDS})")


# --- Path counting ---

def _count_in_block(
    adjacency: dict[str, list[tuple[str, int]]], src: str, dst: str, cap: int
) -> PathCount:
    """Simple src→dst paths inside one block, weighted by link multiplicity."""
    total = 0
    on_path = {src}
    stack = [(src, iter(adjacency[src]), 1)]
    while stack:
        node, neighbors, weight = stack[-1]
        step = next(neighbors, None)
        if step is None:
            stack.pop()
            on_path.discard(node)
            continue
        nxt, multiplicity = step
        if nxt in on_path:
            continue
        reached = weight * multiplicity
        if nxt == dst:
            total += reached
            if total >= cap:
                return PathCount(cap, True)
            continue
        on_path.add(nxt)
        stack.append((nxt, iter(adjacency[nxt]), reached))
    return PathCount(total, False)


def count_paths(topo: Topology, edge: str, cap: int = DEFAULT_PATH_CAP) -> PathCount:
    """Number of simple edge→gateway paths, capped.

    Parallel links count as distinct paths. A simple path crosses the
    biconnected blocks between its endpoints in a fixed order, so the total
    is the product of per-block counts. Returns (cap, truncated=True) as soon
    as cap paths are found; an unreachable edge gives 0.
    """
    if cap < 1:
        raise PathAnalysisError(f"path cap must be >= 1, got {cap}")
    if topo.node(edge).role != EDGE:
        raise PathAnalysisError(f"'{edge}' is not an edge node")
    gateway = topo.gateway

    multiplicity = Counter(link.endpoints for link in topo.links)
    graph = topo.simple_graph()
    if not nx.has_path(graph, edge, gateway):
        return PathCount(0, False)

    # Block/vertex incidence forest; its unique route orders the blocks
    incidence = nx.Graph()
    blocks = [list(edges) for edges in nx.biconnected_component_edges(graph)]
    for i, edges in enumerate(blocks):
        for u, v in edges:
            incidence.add_edge(("block", i), ("node", u))
            incidence.add_edge(("block", i), ("node", v))
    route = nx.shortest_path(incidence, ("node", edge), ("node", gateway))

    total = 1
    for position in range(1, len(route) - 1, 2):
        block = route[position][1]
        entry, exit_ = route[position - 1][1], route[position + 1][1]
        adjacency: dict[str, list[tuple[str, int]]] = defaultdict(list)
        for u, v in sorted(blocks[block]):
            m = multiplicity[(u, v) if u <= v else (v, u)]
            adjacency[u].append((v, m))
            adjacency[v].append((u, m))
        for node in adjacency:
            adjacency[node].sort()
        part = _count_in_block(adjacency, entry, exit_, cap)
        total *= part.count
        if part.truncated or total >= cap:
            return PathCount(cap, True)
    return PathCount(total, False)


def _count_one(args: tuple) -> tuple[str, PathCount]:
    topo, edge, cap = args
    return edge, count_paths(topo, edge, cap)


def count_all_paths(topo: Topology, cap: int = DEFAULT_PATH_CAP, workers: int = 1) -> dict[str, PathCount]:
    """count_paths for every edge node, keyed and ordered by node id."""
    edges = topo.edge_nodes
    args = [(topo, edge, cap) for edge in edges]
    if workers > 1 and len(edges) > 1:
        with mp.Pool(workers) as pool:
            results = pool.map(_count_one, args, chunksize=4)
    else:
        results = [_count_one(a) for a in args]
    return dict(sorted(results))


def cdf_from_counts(counts: Iterable[int]) -> list[tuple[int, float]]:
    values = sorted(counts)
    if not values:
        return []
    total = len(values)
    tally = Counter(values)
    cdf, running = [], 0
    for value in sorted(tally):
        running += tally[value]
        cdf.append((value, running / total))
    return cdf


def path_count_cdf(topo: Topology, cap: int = DEFAULT_PATH_CAP, workers: int = 1) -> list[tuple[int, float]]:
    """Empirical CDF of per-edge-node path counts; truncated counts sit at cap."""
    counts = count_all_paths(topo, cap, workers)
    return cdf_from_counts(c.count for c in counts.values())


def cdf_frame(cdf: list[tuple[int, float]]) -> pl.DataFrame:
    return pl.DataFrame(
        {"path_count": [c for c, _ in cdf], "cum_fraction": [f for _, f in cdf]},
        schema={"path_count": pl.Int64, "cum_fraction": pl.Float64},
    )


def write_cdf_csv(cdf: list[tuple[int, float]], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cdf_frame(cdf).write_csv(path, float_precision=6)
    return path


def augmentation_report(before: Topology, after: Topology, cap: int = DEFAULT_PATH_CAP, workers: int = 1) -> AugmentationReport:
    return AugmentationReport(
        links_added=after.links[len(before.links):],
        before=count_all_paths(before, cap, workers),
        after=count_all_paths(after, cap, workers),
    )


# --- Topology synthesis ---

def load_coordinates(path: Path) -> list[tuple[str, float, float]]:
    """Read an id,lat,lon CSV. Errors name the offending line."""
    path = Path(path)
    try:
        df = pl.read_csv(path, infer_schema=False)
    except pl.exceptions.NoDataError:
        return []
    except pl.exceptions.ComputeError as e:
        raise PathAnalysisError(f"{path}: malformed CSV: {e}") from e
    if df.columns != COORDINATE_COLUMNS:
        raise PathAnalysisError(f"{path}:1: header {df.columns} != {COORDINATE_COLUMNS}")
    rows = []
    for i, (node_id, lat, lon) in enumerate(df.iter_rows()):
        try:
            rows.append((node_id, float(lat), float(lon)))
        except (TypeError, ValueError):
            raise PathAnalysisError(f"{path}:{i + 2}: lat '{lat}' / lon '{lon}' not numeric")
        if not node_id:
            raise PathAnalysisError(f"{path}:{i + 2}: empty id")
    return rows


def _offset_m(lat1: float, lon1: float, lat2: float, lon2: float) -> tuple[float, float]:
    """Equirectangular (east, north) offset in meters from point 1 to point 2."""
    mean_lat = math.radians((lat1 + lat2) / 2)
    east = math.radians(lon2 - lon1) * math.cos(mean_lat) * EARTH_RADIUS_M
    north = math.radians(lat2 - lat1) * EARTH_RADIUS_M
    return east, north


def distance_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    return math.hypot(*_offset_m(lat1, lon1, lat2, lon2))


def bearing_deg(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    east, north = _offset_m(lat1, lon1, lat2, lon2)
    bearing = math.degrees(math.atan2(east, north)) % 360.0
    return 0.0 if bearing >= 360.0 else bearing


def cluster_sites(
    coordinates: list[tuple[str, float, float]], cluster_radius: float
) -> list[tuple[str, float, float]]:
    """Greedy single pass in id order: each unassigned site seeds a cluster
    and absorbs every unassigned site within cluster_radius of it."""
    ordered = sorted(coordinates)
    assigned = [False] * len(ordered)
    seeds = []
    for i, (node_id, lat, lon) in enumerate(ordered):
        if assigned[i]:
            continue
        assigned[i] = True
        seeds.append((node_id, lat, lon))
        for j in range(i + 1, len(ordered)):
            if not assigned[j] and distance_m(lat, lon, ordered[j][1], ordered[j][2]) <= cluster_radius:
                assigned[j] = True
    return seeds


def synthesize_topology(
    coordinates: list[tuple[str, float, float]],
    fanout: int = DEFAULT_FANOUT,
    cluster_radius: float = DEFAULT_CLUSTER_RADIUS_M,
    rng_seed: int = 0,
) -> Topology:
    """Build a layered backhaul topology from site coordinates.

    Sites are clustered, the site closest to the centroid becomes the
    gateway and depths come from BFS over the Euclidean minimum spanning
    tree. Each site at depth d links to min(fanout, available) randomly
    drawn sites at depth d-1. Links are 10 Mbps with propagation delay and
    bearings from the site geometry.
    """
    if len(coordinates) < 2:
        raise SynthesisError(f"need at least 2 sites, got {len(coordinates)}")
    duplicated = [node_id for node_id, n in Counter(c[0] for c in coordinates).items() if n > 1]
    if duplicated:
        raise SynthesisError(f"duplicate site ids {sorted(duplicated)}")
    if fanout < 1:
        raise SynthesisError(f"fanout must be >= 1, got {fanout}")

    sites = cluster_sites(coordinates, cluster_radius)
    if len(sites) == 1:
        raise SynthesisError("degenerate single-node topology: all sites fall in one cluster")
    logger.info(f"Clustered {len(coordinates)} sites into {len(sites)} nodes")
    position = {node_id: (lat, lon) for node_id, lat, lon in sites}

    centroid_lat = sum(c[1] for c in coordinates) / len(coordinates)
    centroid_lon = sum(c[2] for c in coordinates) / len(coordinates)
    gateway = min(
        position,
        key=lambda s: (distance_m(centroid_lat, centroid_lon, *position[s]), s),
    )

    complete = nx.Graph()
    complete.add_nodes_from(sorted(position))
    ids = sorted(position)
    for i, u in enumerate(ids):
        for v in ids[i + 1:]:
            complete.add_edge(u, v, weight=distance_m(*position[u], *position[v]))
    spanning = nx.minimum_spanning_tree(complete)
    depth = nx.single_source_shortest_path_length(spanning, gateway)

    layers: dict[int, list[str]] = defaultdict(list)
    for node_id in ids:
        layers[depth[node_id]].append(node_id)

    rng = np.random.default_rng(rng_seed)
    links = []
    has_children: set[str] = set()
    for d in range(1, max(layers) + 1):
        upper = layers[d - 1]
        for child in layers[d]:
            picks = rng.choice(len(upper), size=min(fanout, len(upper)), replace=False)
            for pick in sorted(int(p) for p in picks):
                parent = upper[pick]
                has_children.add(parent)
                links.append(
                    Link(
                        a=parent,
                        b=child,
                        capacity=SYNTH_CAPACITY_MBPS,
                        delay=distance_m(*position[parent], *position[child]) / LIGHT_M_PER_MS,
                        channel_width=20,
                        bearing_a=bearing_deg(*position[parent], *position[child]),
                        bearing_b=bearing_deg(*position[child], *position[parent]),
                    )
                )

    def role(node_id: str) -> str:
        if node_id == gateway:
            return GATEWAY
        return BACKHAUL if node_id in has_children else EDGE

    nodes = [Node(id=s, role=role(s), lat=position[s][0], lon=position[s][1]) for s in ids]
    topo = Topology.build(nodes, links)
    logger.info(f"Synthesized {len(nodes)} nodes, {len(links)} links, depth {max(layers)}, gateway {gateway}")
    return topo


def synthesis_summary(topo: Topology) -> dict:
    """Node/link counts and the depth histogram from the gateway."""
    depth = nx.single_source_shortest_path_length(topo.simple_graph(), topo.gateway)
    histogram = Counter(depth.values())
    return {
        "nodes": len(topo.nodes),
        "links": len(topo.links),
        "gateway": topo.gateway,
        "edge_nodes": len(topo.edge_nodes),
        "depth_histogram": {str(d): histogram[d] for d in sorted(histogram)},
    }


# --- Path groups ---

def capacity_weights(paths: list[PathSpec]) -> tuple[float, ...]:
    """Weight each path by its share of the summed bottleneck capacity."""
    if not paths:
        raise PathAnalysisError("capacity weights need at least one path")
    total = sum(p.bottleneck_capacity for p in paths)
    return tuple(p.bottleneck_capacity / total for p in paths)


def port_weights(groups: list[PathGroup]) -> dict[tuple[str, str], float]:
    """Per-switch outbound port weights, normalized per switch."""
    raw: dict[tuple[str, str], float] = defaultdict(float)
    for group in groups:
        for path, weight in zip(group.paths, group.weights):
            for u, v in path.hops:
                raw[(u, v)] += weight

    per_node: dict[str, float] = defaultdict(float)
    for (u, _), w in raw.items():
        per_node[u] += w

    weights = {}
    for (u, v), w in sorted(raw.items()):
        # A switch whose paths all carry zero weight splits evenly
        if per_node[u] > 0:
            weights[(u, v)] = w / per_node[u]
        else:
            weights[(u, v)] = 1.0 / sum(1 for (x, _) in raw if x == u)
    return weights


def build_path_group(topo: Topology, src: str, dst: str, k: int) -> PathGroup:
    """Up to k shortest interior-disjoint paths weighted by capacity."""
    paths = shortest_disjoint_paths(topo, src, dst, k)
    if not paths:
        raise PathAnalysisError(f"disconnected pair: no path from '{src}' to '{dst}'")
    return PathGroup(paths=tuple(paths), weights=capacity_weights(paths))
