"""
Price / performance planning for WISP backhaul.

Fits a quadratic hardware-cost model to equipment prices, prices link
multiplicity (n parallel links of C/n each), checks per-site spectrum
budgets and redesigns topologies:

- min-cost:      same capacity, links split into cheaper parallel links
- max-capacity:  spend a cost ceiling on links bridging the min cut
- fixed-cost:    re-baseline equipment tiers, then spend the saving on
                 cut-bridging links

Price CSV: vendor,model,capacity_mbps,price_usd_pair (one row per link
hardware pair, both ends included).
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import networkx as nx
import numpy as np
import polars as pl

from topo_model import (
    Link,
    Topology,
    cut_sides,
    network_capacity,
)
from utils.logger import get_logger

logger = get_logger(__name__)

PRICE_COLUMNS = ["vendor", "model", "capacity_mbps", "price_usd_pair"]
CANDIDATE_COLUMNS = ["a", "b"]

# Equipment tiers used when re-baselining (Mbps)
ACCESS_TIER = 100.0
DISTRIBUTION_TIER = 400.0
CORE_TIER = 1400.0
CORE_MIN_EDGES = 5

DEFAULT_N_MAX = 16
COST_TOLERANCE = 1e-6


class PriceFileError(ValueError):
    """Malformed price or candidate CSV."""


class PriceModelError(ValueError):
    """Cost model cannot be fitted or evaluated."""


class PlanError(ValueError):
    """Invalid planning request."""


class PlanInfeasibleError(PlanError):
    """The requested plan cannot be carried out within its constraints."""


@dataclass(frozen=True)
class PricePoint:
    vendor: str
    model: str
    capacity: float
    cost: float


@dataclass(frozen=True)
class PriceModel:
    alpha: float
    beta: float
    gamma: float
    r_squared: float = 1.0
    capacity_range: tuple[float, float] | None = None

    def predict(self, capacity: float) -> float:
        return (self.alpha * capacity + self.beta) * capacity + self.gamma


@dataclass(frozen=True)
class SpectrumBudget:
    channels_20mhz: int = 24
    channels_40mhz: int = 11
    min_angular_separation: float = 30.0

    def __post_init__(self):
        if self.channels_20mhz < 0 or self.channels_40mhz < 0:
            raise PlanError(
                f"channel counts must be >= 0, got {self.channels_20mhz}/{self.channels_40mhz}"
            )
        if self.min_angular_separation < 0:
            raise PlanError(f"negative angular separation {self.min_angular_separation}")

    def channels(self, width: int) -> int:
        return self.channels_40mhz if width == 40 else self.channels_20mhz


@dataclass(frozen=True)
class PlanResult:
    topology: Topology
    total_cost: float
    capacity: float
    links_added: int
    links_replaced: int
    capacity_before: float = 0.0
    cost_before: float = 0.0
    capacity_history: tuple[float, ...] = field(default_factory=tuple)


# --- Price data ---

def load_price_points(path: Path) -> list[PricePoint]:
    """Read the price CSV. Errors name the offending line number."""
    path = Path(path)
    try:
        df = pl.read_csv(path, infer_schema=False)
    except pl.exceptions.NoDataError:
        raise PriceFileError(f"{path}: empty file (expected header {','.join(PRICE_COLUMNS)})")
    except pl.exceptions.ComputeError as e:
        raise PriceFileError(f"{path}: malformed CSV: {e}") from e

    if df.columns != PRICE_COLUMNS:
        raise PriceFileError(f"{path}:1: header {df.columns} != {PRICE_COLUMNS}")

    points = []
    for i, row in enumerate(df.iter_rows(named=True)):
        line = i + 2
        try:
            capacity = float(row["capacity_mbps"])
            cost = float(row["price_usd_pair"])
        except (TypeError, ValueError):
            raise PriceFileError(
                f"{path}:{line}: capacity '{row['capacity_mbps']}' / price '{row['price_usd_pair']}' not numeric"
            )
        if capacity <= 0:
            raise PriceFileError(f"{path}:{line}: capacity must be > 0, got {capacity}")
        if cost <= 0:
            raise PriceFileError(f"{path}:{line}: price must be > 0, got {cost}")
        points.append(PricePoint(row["vendor"] or "", row["model"] or "", capacity, cost))

    logger.debug(f"Loaded {len(points)} price points from {path}")
    return points


def load_candidate_links(path: Path) -> list[tuple[str, str]]:
    """Read line-of-sight feasible node pairs (CSV columns a,b)."""
    path = Path(path)
    try:
        df = pl.read_csv(path, infer_schema=False)
    except pl.exceptions.NoDataError:
        return []
    except pl.exceptions.ComputeError as e:
        raise PriceFileError(f"{path}: malformed CSV: {e}") from e
    if df.columns[:2] != CANDIDATE_COLUMNS:
        raise PriceFileError(f"{path}:1: header must start with a,b, got {df.columns}")
    pairs = []
    for i, (a, b) in enumerate(df.select(CANDIDATE_COLUMNS).iter_rows()):
        if not a or not b:
            raise PriceFileError(f"{path}:{i + 2}: empty endpoint")
        pairs.append((a, b))
    return pairs


# --- Cost model ---

def fit_price_model(points: list[PricePoint]) -> PriceModel:
    """Least-squares fit of cost = alpha·C² + beta·C + gamma."""
    capacities = np.array([p.capacity for p in points], dtype=float)
    costs = np.array([p.cost for p in points], dtype=float)

    distinct = np.unique(capacities).size
    if distinct < 3:
        raise PriceModelError(
            f"underdetermined fit: {len(points)} points with {distinct} distinct capacities (need 3)"
        )

    design = np.column_stack([capacities**2, capacities, np.ones_like(capacities)])
    (alpha, beta, gamma), *_ = np.linalg.lstsq(design, costs, rcond=None)

    residuals = costs - design @ np.array([alpha, beta, gamma])
    ss_res = float(residuals @ residuals)
    ss_tot = float(((costs - costs.mean()) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))

    model = PriceModel(
        alpha=float(alpha),
        beta=float(beta),
        gamma=float(gamma),
        r_squared=r_squared,
        capacity_range=(float(capacities.min()), float(capacities.max())),
    )
    _check_positive(model)
    logger.info(
        f"Fitted cost = {model.alpha:.6g}·C² + {model.beta:.6g}·C + {model.gamma:.6g} "
        f"(R² = {model.r_squared:.3f}, {len(points)} points)"
    )
    return model


def _check_positive(model: PriceModel) -> None:
    """Predicted cost must stay positive over the fitted capacity range."""
    if model.capacity_range is None:
        return
    lo, hi = model.capacity_range
    probes = [lo, hi]
    if model.alpha != 0:
        vertex = -model.beta / (2 * model.alpha)
        if lo < vertex < hi:
            probes.append(vertex)
    worst = min(model.predict(c) for c in probes)
    if worst <= 0:
        raise PriceModelError(
            f"fitted model predicts non-positive cost ({worst:.4g}) within [{lo}, {hi}] Mbps"
        )


def save_price_model(model: PriceModel, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = asdict(model)
    if model.capacity_range is not None:
        data["capacity_range"] = list(model.capacity_range)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def load_price_model(path: Path) -> PriceModel:
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
        capacity_range = data.get("capacity_range")
        return PriceModel(
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            gamma=float(data["gamma"]),
            r_squared=float(data.get("r_squared", 1.0)),
            capacity_range=tuple(capacity_range) if capacity_range else None,
        )
    except json.JSONDecodeError as e:
        raise PriceModelError(f"{path}: parse failure: {e.msg}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise PriceModelError(f"{path}: missing or invalid coefficient: {e}") from e


def link_cost(model: PriceModel, capacity: float) -> float:
    """Predicted cost of one link (both ends) of the given capacity."""
    if capacity <= 0:
        raise PriceModelError(f"capacity must be > 0, got {capacity}")
    return model.predict(capacity)


def multiplicity_cost(model: PriceModel, capacity: float, n: int) -> float:
    """Cost of carrying `capacity` over n parallel links of capacity/n each."""
    if n < 1:
        raise PriceModelError(f"multiplicity must be >= 1, got {n}")
    return n * link_cost(model, capacity / n)


def optimal_multiplicity(model: PriceModel, capacity: float, n_max: int) -> int:
    """Cheapest link count in [1, n_max]; ties go to the smaller count."""
    if n_max < 1:
        raise PriceModelError(f"n_max must be >= 1, got {n_max}")
    best_n, best_cost = 1, multiplicity_cost(model, capacity, 1)
    for n in range(2, n_max + 1):
        cost = multiplicity_cost(model, capacity, n)
        if cost < best_cost:
            best_n, best_cost = n, cost
    return best_n


def topology_cost(model: PriceModel, topo: Topology) -> float:
    return sum(link_cost(model, link.capacity) for link in topo.links)


def split_capacity(capacity: float, n: int) -> list[float]:
    """n parallel shares of `capacity` whose exact sum is never below it.

    The first n-1 shares are capacity/n; the last absorbs the rounding.
    """
    if n < 1:
        raise PriceModelError(f"multiplicity must be >= 1, got {n}")
    share = capacity / n
    last = capacity - (n - 1) * share
    while Fraction(share) * (n - 1) + Fraction(last) < Fraction(capacity):
        last = math.nextafter(last, math.inf)
    return [share] * (n - 1) + [last]


def cost_curve(model: PriceModel, capacities: Iterable[float]) -> pl.DataFrame:
    """Predicted cost per capacity, for plotting against the price points."""
    capacities = [float(c) for c in capacities]
    return pl.DataFrame(
        {
            "capacity_mbps": capacities,
            "cost_usd": [link_cost(model, c) for c in capacities],
        }
    )


def multiplicity_table(model: PriceModel, capacities: Iterable[float], n_max: int) -> pl.DataFrame:
    """Rows (capacity, n, cost) for n in [1, n_max], plus the optimal n per capacity."""
    if n_max < 1:
        raise PriceModelError(f"n_max must be >= 1, got {n_max}")
    rows = []
    for capacity in capacities:
        best = optimal_multiplicity(model, capacity, n_max)
        for n in range(1, n_max + 1):
            rows.append(
                {
                    "capacity_mbps": float(capacity),
                    "n": n,
                    "cost_usd": multiplicity_cost(model, capacity, n),
                    "optimal_n": best,
                }
            )
    return pl.DataFrame(
        rows,
        schema={"capacity_mbps": pl.Float64, "n": pl.Int64, "cost_usd": pl.Float64, "optimal_n": pl.Int64},
    )


# --- Spectrum ---

def angular_difference(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _colorable(graph: nx.Graph, colors: int) -> bool:
    """Exact k-colorability by backtracking, most constrained nodes first."""
    order = sorted(graph.nodes, key=lambda n: (-graph.degree(n), n))
    assignment: dict = {}

    def place(i: int) -> bool:
        if i == len(order):
            return True
        node = order[i]
        taken = {assignment[v] for v in graph.neighbors(node) if v in assignment}
        for color in range(colors):
            if color not in taken:
                assignment[node] = color
                if place(i + 1):
                    return True
                del assignment[node]
        return False

    return place(0)


def _channels_suffice(graph: nx.Graph, channels: int) -> bool:
    if graph.number_of_nodes() == 0:
        return True
    if channels == 0:
        return False
    coloring = nx.greedy_color(graph, strategy="largest_first")
    if max(coloring.values()) + 1 <= channels:
        return True
    # Greedy first-fit can overshoot; settle it exactly per component
    return all(
        _colorable(graph.subgraph(component), channels)
        for component in nx.connected_components(graph)
    )


def spectrum_feasible(topo: Topology, site: str, budget: SpectrumBudget) -> bool:
    """Check the site's incident links fit its channel budget.

    Co-channel directional links must be at least min_angular_separation
    apart; links closer than that need distinct channels. Links without a
    bearing at this site only count against the channel total.
    """
    topo.node(site)
    incident = topo.incident_links(site)

    for width in (20, 40):
        links = [link for link in incident if link.channel_width == width]
        if len(links) > budget.channels(width):
            return False
        bearings = [link.bearing_at(site) for link in links]
        conflicts = nx.Graph()
        conflicts.add_nodes_from(range(len(links)))
        for i, b1 in enumerate(bearings):
            if b1 is None:
                continue
            for j in range(i + 1, len(links)):
                b2 = bearings[j]
                if b2 is not None and angular_difference(b1, b2) < budget.min_angular_separation:
                    conflicts.add_edge(i, j)
        if not _channels_suffice(conflicts, budget.channels(width)):
            return False
    return True


# --- Redesign ---

def min_cost_redesign(
    model: PriceModel,
    topo: Topology,
    budget: SpectrumBudget,
    n_max: int = DEFAULT_N_MAX,
) -> PlanResult:
    """Split each link into its cheapest parallel multiplicity.

    Links are visited in index order; a split is skipped when it would break
    the spectrum budget at either endpoint.
    """
    capacity_before = network_capacity(topo)
    cost_before = topology_cost(model, topo)

    links: list[Link] = list(topo.links)
    replaced = added = 0
    for original in topo.links:
        n = optimal_multiplicity(model, original.capacity, n_max)
        if n == 1:
            continue
        position = next(i for i, link in enumerate(links) if link is original)
        split = [replace(original, capacity=share) for share in split_capacity(original.capacity, n)]
        tentative = topo.with_link_list(links[:position] + split + links[position + 1:])
        if not (spectrum_feasible(tentative, original.a, budget)
                and spectrum_feasible(tentative, original.b, budget)):
            logger.debug(f"Skipping split of {original.label} into {n}: spectrum budget exceeded")
            continue
        links[position:position + 1] = split
        replaced += 1
        added += n - 1

    result_topo = topo.with_link_list(links)
    capacity = network_capacity(result_topo)
    total_cost = topology_cost(model, result_topo)
    logger.info(
        f"Min-cost redesign: {replaced} links replaced (+{added}), "
        f"cost {cost_before:,.2f} -> {total_cost:,.2f}"
    )
    return PlanResult(
        topology=result_topo,
        total_cost=total_cost,
        capacity=capacity,
        links_added=added,
        links_replaced=replaced,
        capacity_before=capacity_before,
        cost_before=cost_before,
        capacity_history=(capacity_before, capacity),
    )


def _canonical_pairs(topo: Topology, candidate_links: Iterable[tuple[str, str]]) -> list[tuple[str, str]]:
    pairs = set()
    for a, b in candidate_links:
        if a == b:
            raise PlanError(f"candidate link ({a}, {b}) is a self-loop")
        for end in (a, b):
            if not topo.has_node(end):
                raise PlanError(f"candidate link ({a}, {b}) references unknown node '{end}'")
        pairs.add((a, b) if a <= b else (b, a))
    return sorted(pairs)


def max_capacity_redesign(
    model: PriceModel,
    topo: Topology,
    budget: SpectrumBudget,
    cost_ceiling: float,
    candidate_links: Iterable[tuple[str, str]],
    unit_capacity: float,
) -> PlanResult:
    """Add cut-bridging candidate links while the cost ceiling allows.

    Each round recomputes the max-flow and only considers candidates joining
    a node still reachable from the gateway in the residual network to a
    node that can still reach an edge node; every accepted link therefore
    raises capacity. Candidates are tried cheapest first, then by node ids,
    and each candidate pair is used at most once.
    """
    if unit_capacity <= 0:
        raise PlanError(f"unit capacity must be > 0, got {unit_capacity}")
    cost_before = topology_cost(model, topo)
    if cost_ceiling < cost_before - COST_TOLERANCE:
        raise PlanInfeasibleError(
            f"cost ceiling {cost_ceiling:,.2f} is below the current topology cost {cost_before:,.2f}"
        )

    pairs = _canonical_pairs(topo, candidate_links)
    unit_cost = link_cost(model, unit_capacity)
    remaining = cost_ceiling - cost_before
    used: set[tuple[str, str]] = set()

    current = topo
    capacity_before = network_capacity(topo)
    history = [capacity_before]
    added = 0

    while True:
        _, source_side, sink_side = cut_sides(current)
        bridging = sorted(
            (unit_cost, pair) for pair in pairs
            if pair not in used
            and ((pair[0] in source_side and pair[1] in sink_side)
                 or (pair[1] in source_side and pair[0] in sink_side))
        )
        chosen = None
        for cost, pair in bridging:
            if cost > remaining + COST_TOLERANCE:
                break
            tentative = current.with_links(
                [Link(a=pair[0], b=pair[1], capacity=unit_capacity, channel_width=20)]
            )
            used.add(pair)
            if spectrum_feasible(tentative, pair[0], budget) and spectrum_feasible(tentative, pair[1], budget):
                chosen = (cost, tentative)
                break
            logger.debug(f"Candidate {pair[0]}-{pair[1]} rejected: spectrum budget exceeded")
        if chosen is None:
            break
        cost, current = chosen
        remaining -= cost
        added += 1
        history.append(network_capacity(current))
        logger.debug(f"Iteration {added}: capacity {history[-1]:.1f} Mbps, {remaining:,.2f} left")

    total_cost = topology_cost(model, current)
    logger.info(
        f"Max-capacity redesign: +{added} links, capacity {capacity_before:.1f} -> {history[-1]:.1f} Mbps"
    )
    return PlanResult(
        topology=current,
        total_cost=total_cost,
        capacity=history[-1],
        links_added=added,
        links_replaced=0,
        capacity_before=capacity_before,
        cost_before=cost_before,
        capacity_history=tuple(history),
    )


def _core_links(topo: Topology, core_min_edges: int) -> set[int]:
    """Indices of links next to the gateway or feeding a large subtree."""
    gateway = topo.gateway
    graph = topo.simple_graph()
    tree = nx.bfs_tree(graph, gateway, sort_neighbors=sorted)
    edge_set = set(topo.edge_nodes)
    served = {
        node: sum(1 for d in nx.descendants(tree, node) | {node} if d in edge_set)
        for node in tree.nodes
    }

    core = set()
    for link in topo.links:
        if gateway in (link.a, link.b):
            core.add(link.index)
        elif tree.has_edge(link.a, link.b) and served[link.b] >= core_min_edges:
            core.add(link.index)
        elif tree.has_edge(link.b, link.a) and served[link.a] >= core_min_edges:
            core.add(link.index)
    return core


def rebaseline_topology(topo: Topology, core_min_edges: int = CORE_MIN_EDGES) -> Topology:
    """Swap every link to the best price/performance equipment tier.

    Links of 100 Mbps or less become 100 Mbps, core links 1.4 Gbps and
    everything else 400 Mbps.
    """
    core = _core_links(topo, core_min_edges)
    links = []
    for link in topo.links:
        if link.capacity <= ACCESS_TIER:
            tier = ACCESS_TIER
        elif link.index in core:
            tier = CORE_TIER
        else:
            tier = DISTRIBUTION_TIER
        links.append(replace(link, capacity=tier))
    return topo.with_link_list(links)


def fixed_cost_max_capacity(
    model: PriceModel,
    topo: Topology,
    budget: SpectrumBudget,
    candidate_links: Iterable[tuple[str, str]],
    unit_capacity: float = DISTRIBUTION_TIER,
    core_min_edges: int = CORE_MIN_EDGES,
) -> PlanResult:
    """Re-baseline equipment, then spend the saving on cut-bridging links."""
    cost_before = topology_cost(model, topo)
    rebased = rebaseline_topology(topo, core_min_edges)
    rebased_cost = topology_cost(model, rebased)
    if rebased_cost > cost_before + COST_TOLERANCE:
        raise PlanInfeasibleError(
            f"re-baselined network costs {rebased_cost:,.2f}, more than the original {cost_before:,.2f}"
        )
    logger.info(f"Re-baselined cost {rebased_cost:,.2f}; {cost_before - rebased_cost:,.2f} to spend")

    result = max_capacity_redesign(model, rebased, budget, cost_before, candidate_links, unit_capacity)
    changed = sum(1 for old, new in zip(topo.links, rebased.links) if old.capacity != new.capacity)
    return replace(
        result,
        links_replaced=changed,
        capacity_before=network_capacity(topo),
        cost_before=cost_before,
    )


def plan_to_dict(result: PlanResult, model: PriceModel) -> dict:
    return {
        "capacity_before": result.capacity_before,
        "capacity_after": result.capacity,
        "cost_before": result.cost_before,
        "total_cost": result.total_cost,
        "links_added": result.links_added,
        "links_replaced": result.links_replaced,
        "capacity_history": list(result.capacity_history),
        "links": [
            {
                "index": link.index,
                "a": link.a,
                "b": link.b,
                "capacity_mbps": link.capacity,
                "cost_usd": link_cost(model, link.capacity),
            }
            for link in result.topology.links
        ],
    }


def write_plan_result(result: PlanResult, model: PriceModel, path: Path) -> Path:
    """Write the plan summary with a per-link cost breakdown."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(plan_to_dict(result, model), f, indent=2)
        f.write("\n")
    return path
