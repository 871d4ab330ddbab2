"""
WISP topology model: sites, wireless links, JSON I/O and the graph
algorithms shared by the planner, the path analysis and the simulator.

Topology JSON:
    {"nodes": [{"id": str, "role": "gateway|backhaul|edge", "lat": num?, "lon": num?}],
     "links": [{"a": str, "b": str, "capacity_mbps": num, "loss": num,
                "delay_ms": num, "channel_mhz": 20|40,
                "bearing_a": num?, "bearing_b": num?}]}

A link's index is its position in the "links" array. Links are undirected
with one symmetric capacity; parallel links between the same pair are
allowed.
"""

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import networkx as nx
from networkx.algorithms.flow import edmonds_karp

from utils.logger import get_logger

logger = get_logger(__name__)

GATEWAY = "gateway"
BACKHAUL = "backhaul"
EDGE = "edge"
ROLES = (GATEWAY, BACKHAUL, EDGE)

CHANNEL_WIDTHS = (20, 40)
MAX_MULTIPLICITY = 16

# Virtual terminal joined to every edge node by uncapacitated arcs
SUPER_SINK = "__super_sink__"

RESIDUAL_EPS = 1e-9


class TopologyError(ValueError):
    """Invalid topology input or an operation impossible on this topology."""


@dataclass(frozen=True)
class Node:
    id: str
    role: str
    lat: float | None = None
    lon: float | None = None


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    capacity: float
    loss_rate: float = 0.0
    delay: float = 0.0
    channel_width: int = 20
    index: int = 0
    bearing_a: float | None = None
    bearing_b: float | None = None

    @property
    def endpoints(self) -> tuple[str, str]:
        """Endpoint pair in canonical (sorted) order."""
        return (self.a, self.b) if self.a <= self.b else (self.b, self.a)

    @property
    def label(self) -> str:
        return f"{self.a}-{self.b}#{self.index}"

    def joins(self, u: str, v: str) -> bool:
        return (self.a == u and self.b == v) or (self.a == v and self.b == u)

    def other(self, node: str) -> str:
        if node == self.a:
            return self.b
        if node == self.b:
            return self.a
        raise TopologyError(f"node '{node}' is not an endpoint of link {self.label}")

    def bearing_at(self, node: str) -> float | None:
        """Azimuth of this link as seen from the given endpoint."""
        return self.bearing_a if node == self.a else self.bearing_b


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]

    @classmethod
    def build(cls, nodes: Iterable[Node], links: Iterable[Link]) -> "Topology":
        """Create a topology, numbering links by position."""
        return cls(
            nodes=tuple(nodes),
            links=tuple(replace(link, index=i) for i, link in enumerate(links)),
        )

    @property
    def node_ids(self) -> list[str]:
        return sorted(n.id for n in self.nodes)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise TopologyError(f"unknown node '{node_id}'")

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    @property
    def gateway(self) -> str:
        gateways = [n.id for n in self.nodes if n.role == GATEWAY]
        if len(gateways) != 1:
            raise TopologyError(f"expected exactly one gateway, found {len(gateways)}")
        return gateways[0]

    @property
    def edge_nodes(self) -> list[str]:
        return sorted(n.id for n in self.nodes if n.role == EDGE)

    def incident_links(self, site: str) -> list[Link]:
        return [link for link in self.links if site in (link.a, link.b)]

    def links_between(self, u: str, v: str) -> list[Link]:
        return [link for link in self.links if link.joins(u, v)]

    def neighbors(self, site: str) -> list[str]:
        return sorted({link.other(site) for link in self.incident_links(site)})

    def hop_capacity(self, u: str, v: str) -> float:
        """Aggregate capacity of all parallel links between u and v."""
        return sum(link.capacity for link in self.links_between(u, v))

    def with_links(self, extra: Iterable[Link]) -> "Topology":
        """Return a copy with links appended (indices continue the sequence)."""
        return Topology.build(self.nodes, [*self.links, *extra])

    def with_link_list(self, links: Iterable[Link]) -> "Topology":
        """Return a copy with the link list replaced and renumbered."""
        return Topology.build(self.nodes, links)

    def simple_graph(self) -> nx.Graph:
        """Undirected simple graph with parallel links merged, built in sorted order."""
        graph = nx.Graph()
        graph.add_nodes_from(self.node_ids)
        capacity: dict[tuple[str, str], list[float]] = defaultdict(list)
        for link in self.links:
            capacity[link.endpoints].append(link.capacity)
        for (u, v), parts in sorted(capacity.items()):
            graph.add_edge(u, v, capacity=math.fsum(parts))
        return graph


@dataclass(frozen=True)
class PathSpec:
    nodes: tuple[str, ...]
    bottleneck_capacity: float

    @property
    def src(self) -> str:
        return self.nodes[0]

    @property
    def dst(self) -> str:
        return self.nodes[-1]

    @property
    def interior(self) -> tuple[str, ...]:
        return self.nodes[1:-1]

    @property
    def hops(self) -> list[tuple[str, str]]:
        return list(zip(self.nodes, self.nodes[1:]))


def path_spec(topo: Topology, nodes: Iterable[str]) -> PathSpec:
    """Build a PathSpec, checking the node sequence is a simple path in topo.

    A hop's capacity is the sum of its parallel links; the bottleneck is the
    smallest hop capacity.
    """
    seq = tuple(nodes)
    if len(seq) < 2:
        raise TopologyError(f"path {list(seq)} needs at least two nodes")
    if len(set(seq)) != len(seq):
        raise TopologyError(f"path {list(seq)} repeats a node")
    capacities = []
    for u, v in zip(seq, seq[1:]):
        hop = topo.hop_capacity(u, v)
        if hop <= 0:
            raise TopologyError(f"path {list(seq)}: no link between '{u}' and '{v}'")
        capacities.append(hop)
    return PathSpec(nodes=seq, bottleneck_capacity=min(capacities))


# --- File I/O ---

def _node_from_json(entry: dict, position: int) -> Node:
    if not isinstance(entry, dict) or "id" not in entry or "role" not in entry:
        raise TopologyError(f"node entry #{position} must be an object with 'id' and 'role'")
    return Node(
        id=str(entry["id"]),
        role=str(entry["role"]),
        lat=None if entry.get("lat") is None else float(entry["lat"]),
        lon=None if entry.get("lon") is None else float(entry["lon"]),
    )


def _link_from_json(entry: dict, position: int) -> Link:
    required = ("a", "b", "capacity_mbps")
    if not isinstance(entry, dict) or any(key not in entry for key in required):
        raise TopologyError(f"link entry #{position} must be an object with {', '.join(required)}")
    try:
        return Link(
            a=str(entry["a"]),
            b=str(entry["b"]),
            capacity=float(entry["capacity_mbps"]),
            loss_rate=float(entry.get("loss", 0.0)),
            delay=float(entry.get("delay_ms", 0.0)),
            channel_width=int(entry.get("channel_mhz", 20)),
            index=position,
            bearing_a=None if entry.get("bearing_a") is None else float(entry["bearing_a"]),
            bearing_b=None if entry.get("bearing_b") is None else float(entry["bearing_b"]),
        )
    except (TypeError, ValueError) as e:
        raise TopologyError(f"link entry #{position} ({entry.get('a')}-{entry.get('b')}): {e}") from e


def topology_from_dict(data: dict) -> Topology:
    """Build and validate a topology from its JSON document."""
    if not isinstance(data, dict) or not isinstance(data.get("nodes"), list) \
            or not isinstance(data.get("links"), list):
        raise TopologyError("topology document needs 'nodes' and 'links' arrays")
    nodes = [_node_from_json(entry, i) for i, entry in enumerate(data["nodes"])]
    links = [_link_from_json(entry, i) for i, entry in enumerate(data["links"])]
    topo = Topology(nodes=tuple(nodes), links=tuple(links))
    diagnostics = validate(topo)
    if diagnostics:
        raise TopologyError("; ".join(diagnostics))
    return topo


def load_topology(path: Path) -> Topology:
    """Load and validate a topology JSON file."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise TopologyError(f"{path}: parse failure at line {e.lineno}: {e.msg}") from e
    topo = topology_from_dict(data)
    logger.debug(f"Loaded {path}: {len(topo.nodes)} nodes, {len(topo.links)} links")
    return topo


def topology_to_dict(topo: Topology) -> dict:
    nodes = []
    for n in topo.nodes:
        entry: dict = {"id": n.id, "role": n.role}
        if n.lat is not None:
            entry["lat"] = n.lat
        if n.lon is not None:
            entry["lon"] = n.lon
        nodes.append(entry)
    links = []
    for link in topo.links:
        entry = {
            "a": link.a,
            "b": link.b,
            "capacity_mbps": link.capacity,
            "loss": link.loss_rate,
            "delay_ms": link.delay,
            "channel_mhz": link.channel_width,
        }
        if link.bearing_a is not None:
            entry["bearing_a"] = link.bearing_a
        if link.bearing_b is not None:
            entry["bearing_b"] = link.bearing_b
        links.append(entry)
    return {"nodes": nodes, "links": links}


def save_topology(topo: Topology, path: Path) -> Path:
    """Write a topology in the JSON schema read by load_topology."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(topology_to_dict(topo), f, indent=2)
        f.write("\n")
    return path


# --- Validation ---

def validate(topo: Topology) -> list[str]:
    """Return one diagnostic per violated topology invariant (empty if valid)."""
    diagnostics: list[str] = []

    seen: set[str] = set()
    for n in topo.nodes:
        if n.id in seen:
            diagnostics.append(f"duplicate node id '{n.id}'")
        seen.add(n.id)
        if n.role not in ROLES:
            diagnostics.append(f"node '{n.id}' has unknown role '{n.role}'")
        if n.lat is not None and not -90.0 <= n.lat <= 90.0:
            diagnostics.append(f"node '{n.id}' latitude {n.lat} outside [-90, 90]")
        if n.lon is not None and not -180.0 <= n.lon <= 180.0:
            diagnostics.append(f"node '{n.id}' longitude {n.lon} outside [-180, 180]")

    gateways = sorted(n.id for n in topo.nodes if n.role == GATEWAY)
    if not gateways:
        diagnostics.append("no gateway")
    elif len(gateways) > 1:
        diagnostics.append(f"multiple gateways: {', '.join(gateways)}")

    usable: list[Link] = []
    for link in topo.links:
        dangling = [end for end in (link.a, link.b) if end not in seen]
        for end in dangling:
            diagnostics.append(f"link {link.label} references unknown node '{end}'")
        if link.a == link.b:
            diagnostics.append(f"link {link.label} is a self-loop")
        if link.capacity <= 0:
            diagnostics.append(f"link {link.label} has non-positive capacity {link.capacity}")
        if not 0.0 <= link.loss_rate <= 1.0:
            diagnostics.append(f"link {link.label} loss_rate {link.loss_rate} outside [0, 1]")
        if link.delay < 0:
            diagnostics.append(f"link {link.label} has negative delay {link.delay}")
        if link.channel_width not in CHANNEL_WIDTHS:
            diagnostics.append(f"link {link.label} channel width {link.channel_width} not in {CHANNEL_WIDTHS}")
        for bearing in (link.bearing_a, link.bearing_b):
            if bearing is not None and not 0.0 <= bearing < 360.0:
                diagnostics.append(f"link {link.label} bearing {bearing} outside [0, 360)")
        if not dangling and link.a != link.b:
            usable.append(link)

    if len(gateways) == 1:
        graph = nx.Graph()
        graph.add_nodes_from(seen)
        graph.add_edges_from((link.a, link.b) for link in usable)
        reachable = nx.node_connected_component(graph, gateways[0])
        for edge in sorted(n.id for n in topo.nodes if n.role == EDGE):
            if edge not in reachable:
                diagnostics.append(f"edge {edge} unreachable")

    return diagnostics


# --- Capacity ---

def _flow_network(topo: Topology) -> nx.DiGraph:
    """Directed flow network: both directions per link plus super-sink arcs."""
    if not topo.edge_nodes:
        raise TopologyError("no edge nodes: network capacity is undefined")
    graph = nx.DiGraph()
    graph.add_nodes_from(topo.node_ids)
    parallel: dict[tuple[str, str], list[float]] = defaultdict(list)
    for link in topo.links:
        parallel[(link.a, link.b)].append(link.capacity)
        parallel[(link.b, link.a)].append(link.capacity)
    for (u, v), capacities in parallel.items():
        # exact sum, so splitting a link never loses capacity to rounding
        graph.add_edge(u, v, capacity=math.fsum(capacities))
    for edge in topo.edge_nodes:
        # no capacity attribute = unbounded
        graph.add_edge(edge, SUPER_SINK)
    return graph


def cut_sides(topo: Topology) -> tuple[float, set[str], set[str]]:
    """Max-flow value plus the residual source side and residual sink side.

    The source side holds nodes reachable from the gateway in the residual
    network; the sink side holds nodes that can still reach the super-sink.
    Any new link from the source side to the sink side raises capacity.
    """
    graph = _flow_network(topo)
    residual = edmonds_karp(graph, topo.gateway, SUPER_SINK)

    def has_room(u: str, v: str) -> bool:
        attr = residual[u][v]
        return attr["capacity"] - attr["flow"] > RESIDUAL_EPS * max(1.0, abs(attr["capacity"]))

    source_side = {topo.gateway}
    queue = deque([topo.gateway])
    while queue:
        u = queue.popleft()
        for v in residual.successors(u):
            if v not in source_side and has_room(u, v):
                source_side.add(v)
                queue.append(v)

    sink_side = {SUPER_SINK}
    queue = deque([SUPER_SINK])
    while queue:
        v = queue.popleft()
        for u in residual.predecessors(v):
            if u not in sink_side and has_room(u, v):
                sink_side.add(u)
                queue.append(u)

    source_side.discard(SUPER_SINK)
    sink_side.discard(SUPER_SINK)
    return residual.graph["flow_value"], source_side, sink_side


def network_capacity(topo: Topology) -> float:
    """Max-flow in Mbps from the gateway to all edge nodes."""
    graph = _flow_network(topo)
    return nx.maximum_flow_value(graph, topo.gateway, SUPER_SINK, flow_func=edmonds_karp)


def min_cut_links(topo: Topology) -> list[Link]:
    """Links crossing the minimum gateway/edge cut, ordered by link index.

    The cut is the one closest to the gateway (residual-reachable set), so
    it is unique for a given topology.
    """
    _, source_side, _ = cut_sides(topo)
    crossing = [
        link for link in topo.links
        if (link.a in source_side) != (link.b in source_side)
    ]
    return sorted(crossing, key=lambda link: link.index)


# --- Disjoint paths ---

def _lowest_id_shortest_path(graph: nx.Graph, src: str, dst: str) -> list[str] | None:
    """Hop-count shortest path, preferring the lowest node id at every step."""
    if src not in graph or dst not in graph:
        return None
    distance = nx.single_source_shortest_path_length(graph, dst)
    if src not in distance:
        return None
    path = [src]
    while path[-1] != dst:
        here = path[-1]
        path.append(min(v for v in graph.neighbors(here) if distance.get(v) == distance[here] - 1))
    return path


def shortest_disjoint_paths(topo: Topology, src: str, dst: str, k: int) -> list[PathSpec]:
    """Up to k interior-node-disjoint paths, found greedily by successive BFS.

    Each round takes the current hop-count shortest path and removes its
    interior nodes. Paths come back in discovery order; an unreachable
    destination gives an empty list.
    """
    if not 1 <= k <= MAX_MULTIPLICITY:
        raise TopologyError(f"k={k} outside [1, {MAX_MULTIPLICITY}]")
    if src == dst:
        raise TopologyError(f"source and destination are both '{src}'")
    for node_id in (src, dst):
        if not topo.has_node(node_id):
            raise TopologyError(f"unknown node '{node_id}'")

    graph = topo.simple_graph()
    paths: list[PathSpec] = []
    while len(paths) < k:
        nodes = _lowest_id_shortest_path(graph, src, dst)
        if nodes is None:
            break
        paths.append(path_spec(topo, nodes))
        if len(nodes) == 2:
            graph.remove_edge(src, dst)
        else:
            graph.remove_nodes_from(nodes[1:-1])
    return paths
