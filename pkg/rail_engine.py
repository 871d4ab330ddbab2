"""
Rail session state machines.

Ingress side: per-session packet ids, smooth weighted round robin over the
session's paths and parity generation. Egress side: the duplicate filter
(four 16,384-id quarters plus an index pointer) and parity recovery. A parity
frame that arrives ahead of its group is held until the group can be rebuilt
or the window moves past it.

Session config JSON:
    {"ingress": str, "egress": str, "mode": 0|1|4|5, "k": int, "X": int,
     "paths": [[node ids]]?, "weights": [float]?, "direction": str?, "adaptive": bool?}

Without "paths", up to k shortest interior-disjoint paths are derived from the
topology. Endpoints may be "@gateway" or "@deepest-edge" (the edge node with
the most hops to the gateway, lowest id on ties).
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import networkx as nx
import numpy as np

from path_analysis import PathAnalysisError, PathGroup, build_path_group, capacity_weights
from rail_codec import (
    MAX_PACKET_ID,
    MAX_PATHS,
    ParityGroup,
    RailMode,
    RailTag,
    UnknownModeError,
    make_parity,
    recover_missing,
)
from topo_model import Topology, TopologyError, path_spec
from utils.logger import get_logger

logger = get_logger(__name__)

ID_SPACE = MAX_PACKET_ID + 1
QUARTER = ID_SPACE // 4
MAX_PAYLOAD_BYTES = 2048

DEFAULT_SMOOTHING = 0.1
REWEIGHT_INTERVAL = 100


class RailEngineError(ValueError):
    """Invalid session configuration or frame."""


class OversizePayloadError(RailEngineError):
    pass


class DedupVerdict(Enum):
    ACCEPT = "accept"
    DUPLICATE = "duplicate"
    STALE = "stale"


class Frame(NamedTuple):
    path_index: int
    tag: RailTag
    payload: bytes
    # Original data lengths of the group; parity frames only
    lengths: tuple[int, ...] | None = None


def quarter(packet_id: int) -> int:
    return packet_id // QUARTER


class DedupState:
    """Index pointer plus a 65,536-bit seen bitmap (8 KiB)."""

    def __init__(self):
        self.index_pointer: int | None = None
        self.seen = np.zeros(ID_SPACE // 8, dtype=np.uint8)

    def is_seen(self, packet_id: int) -> bool:
        return bool(self.seen[packet_id >> 3] & (1 << (packet_id & 7)))

    def mark(self, packet_id: int) -> None:
        self.seen[packet_id >> 3] |= np.uint8(1 << (packet_id & 7))

    def keep_only(self, current: int) -> None:
        """Clear every quarter except `current` and its cyclic predecessor."""
        for q in range(4):
            if q not in (current, (current - 1) % 4):
                start = q * QUARTER // 8
                self.seen[start:start + QUARTER // 8] = 0

    def tracked(self) -> int:
        return int(np.unpackbits(self.seen).sum())


def dedup_check(state: DedupState, packet_id: int) -> DedupVerdict:
    """Classify an arriving packet id against the four-quarter window.

    An id is newer than the pointer when it is larger, except that Q0 ids
    are newer than a Q3 pointer (wraparound) and Q3 ids are older than a
    Q0 pointer. Newer ids move the pointer; otherwise ids in the pointer's
    quarter or the one before it are checked against the bitmap, and
    anything further back is stale.
    """
    q = quarter(packet_id)
    pointer = state.index_pointer
    if pointer is None:
        state.mark(packet_id)
        state.index_pointer = packet_id
        state.keep_only(q)
        return DedupVerdict.ACCEPT

    qp = quarter(pointer)
    if qp == 3 and q == 0:
        newer = True
    elif qp == 0 and q == 3:
        newer = False
    else:
        newer = packet_id > pointer

    if newer:
        state.mark(packet_id)
        state.index_pointer = packet_id
        # Quarters outside the horizon were already cleared while the pointer stays in qp
        if q != qp:
            state.keep_only(q)
        return DedupVerdict.ACCEPT

    if q in (qp, (qp - 1) % 4):
        if state.is_seen(packet_id):
            return DedupVerdict.DUPLICATE
        state.mark(packet_id)
        return DedupVerdict.ACCEPT
    return DedupVerdict.STALE


class PathStats:
    """Per-path loss estimate (EWMA) and delivered/lost counters."""

    def __init__(self, k: int):
        self.ewma_loss = [0.0] * k
        self.delivered = [0] * k
        self.lost = [0] * k
        self._window_delivered = [0] * k
        self._window_lost = [0] * k

    def record(self, path_index: int, delivered: bool) -> None:
        if delivered:
            self.delivered[path_index] += 1
            self._window_delivered[path_index] += 1
        else:
            self.lost[path_index] += 1
            self._window_lost[path_index] += 1

    def fold(self, smoothing: float) -> None:
        """Blend each path's loss fraction since the last fold into its EWMA."""
        for i in range(len(self.ewma_loss)):
            seen = self._window_delivered[i] + self._window_lost[i]
            if seen == 0:
                continue
            sample = self._window_lost[i] / seen
            self.ewma_loss[i] = min(1.0, max(0.0, (1 - smoothing) * self.ewma_loss[i] + smoothing * sample))
            self._window_delivered[i] = self._window_lost[i] = 0


@dataclass
class EgressCounters:
    delivered: int = 0
    duplicates_suppressed: int = 0
    stale: int = 0
    parity_recovered: int = 0
    unrecoverable_groups: int = 0
    # mode 0: ids that arrived behind the newest id seen
    reordered: int = 0


@dataclass
class RailSession:
    ingress: str
    egress: str
    direction: str
    mode: RailMode
    k: int
    group_size: int
    path_group: PathGroup
    adaptive: bool = False
    smoothing: float = DEFAULT_SMOOTHING
    next_packet_id: int = 0
    wrr_current: list[float] = field(default_factory=list)
    parity_payloads: list[bytes] = field(default_factory=list)
    dedup: DedupState = field(default_factory=DedupState)
    parity_buffer: dict[int, dict[int, bytes]] = field(default_factory=dict)
    # Parity frames that arrived while two or more of their group were missing
    pending_parity: dict[int, Frame] = field(default_factory=dict)
    buffer_quarter: int | None = None
    newest_stripe_id: int | None = None
    path_stats: PathStats | None = None
    frames_since_reweight: int = 0
    counters: EgressCounters = field(default_factory=EgressCounters)

    @property
    def key(self) -> tuple[str, str]:
        return (self.ingress, self.egress)

    @property
    def weights(self) -> tuple[float, ...]:
        return self.path_group.weights

    def parity_path(self, packet_id: int) -> int:
        """Path carrying the parity frame of the group containing packet_id."""
        if self.mode == RailMode.PARITY:
            return self.k - 1
        return (packet_id // self.group_size) % self.k

    def is_parity_id(self, packet_id: int) -> bool:
        return self.mode.uses_parity and packet_id % self.group_size == self.group_size - 1


def configure_session(
    pair: tuple[str, str],
    direction: str | None,
    mode: int,
    k: int,
    group_size: int | None,
    group: PathGroup,
    adaptive: bool = False,
    smoothing: float = DEFAULT_SMOOTHING,
) -> RailSession:
    """Create a fresh session for one direction of a node pair."""
    ingress, egress = pair
    try:
        mode = RailMode(mode)
    except ValueError:
        raise UnknownModeError(mode) from None
    if not 1 <= k <= MAX_PATHS:
        raise RailEngineError(f"multiplicity k={k} outside [1, {MAX_PATHS}]")
    if k != group.k:
        raise RailEngineError(f"k={k} but the path group has {group.k} paths")
    if mode.uses_parity:
        if k < 2:
            raise RailEngineError(f"mode {int(mode)} needs k >= 2 (data plus parity path), got {k}")
        if group_size is None or group_size < 2:
            raise RailEngineError(f"mode {int(mode)} needs parity group size X >= 2, got {group_size}")
    else:
        group_size = group_size or 0
    if not 0 < smoothing <= 1:
        raise RailEngineError(f"smoothing factor {smoothing} outside (0, 1]")
    for path in group.paths:
        if path.src != ingress or path.dst != egress:
            raise RailEngineError(
                f"path {list(path.nodes)} does not run {ingress} -> {egress}"
            )

    return RailSession(
        ingress=ingress,
        egress=egress,
        direction=direction or f"{ingress}->{egress}",
        mode=mode,
        k=k,
        group_size=group_size,
        path_group=group,
        adaptive=adaptive,
        smoothing=smoothing,
        wrr_current=[0.0] * k,
        path_stats=PathStats(k),
    )


# --- Ingress ---

def _wrr_pick(session: RailSession, candidates: list[int]) -> int:
    """Smooth weighted round robin over candidate paths; ties to the lowest index."""
    weights = [session.weights[i] for i in candidates]
    if sum(weights) <= 0:
        weights = [1.0] * len(candidates)
    total = sum(weights)
    best = None
    for i, w in zip(candidates, weights):
        session.wrr_current[i] += w
        if best is None or session.wrr_current[i] > session.wrr_current[best]:
            best = i
    session.wrr_current[best] -= total
    return best


def _take_id(session: RailSession) -> int:
    packet_id = session.next_packet_id
    session.next_packet_id = (packet_id + 1) & MAX_PACKET_ID
    return packet_id


def ingress_next(session: RailSession, payload: bytes) -> list[Frame]:
    """Frames to emit for one payload, in emission order."""
    if len(payload) > MAX_PAYLOAD_BYTES:
        raise OversizePayloadError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD_BYTES}")
    mode = session.mode

    if mode == RailMode.STRIPE:
        path = _wrr_pick(session, list(range(session.k)))
        packet_id = _take_id(session)
        return [Frame(path, RailTag(int(mode), packet_id, path), payload)]

    if mode == RailMode.MIRROR:
        packet_id = _take_id(session)
        return [Frame(i, RailTag(int(mode), packet_id, i), payload) for i in range(session.k)]

    x = session.group_size
    packet_id = _take_id(session)
    if packet_id % x == 0:
        session.parity_payloads = []
    parity_path = session.parity_path(packet_id)
    path = _wrr_pick(session, [i for i in range(session.k) if i != parity_path])
    frames = [Frame(path, RailTag(int(mode), packet_id, path), payload)]
    session.parity_payloads.append(payload)

    if session.is_parity_id(session.next_packet_id):
        parity_id = _take_id(session)
        parity_path = session.parity_path(parity_id)
        data = session.parity_payloads
        frames.append(
            Frame(
                parity_path,
                RailTag(int(mode), parity_id, parity_path),
                make_parity(data),
                tuple(len(p) for p in data),
            )
        )
        session.parity_payloads = []
    return frames


def ingress_flush(session: RailSession) -> list[Frame]:
    """Close a parity group the stream left unfinished.

    The parity frame takes the group's parity id and carries the lengths of
    the data frames actually sent; the unused ids are skipped.
    """
    if not session.mode.uses_parity or not session.parity_payloads:
        return []
    x = session.group_size
    position = session.next_packet_id % x
    parity_id = (session.next_packet_id + (x - 1 - position)) & MAX_PACKET_ID
    session.next_packet_id = (parity_id + 1) & MAX_PACKET_ID
    parity_path = session.parity_path(parity_id)
    data = session.parity_payloads
    session.parity_payloads = []
    logger.debug(f"Session {session.direction}: closing group at {parity_id} after {len(data)} of {x - 1}")
    return [
        Frame(
            parity_path,
            RailTag(int(session.mode), parity_id, parity_path),
            make_parity(data),
            tuple(len(p) for p in data),
        )
    ]


# --- Egress ---

def _evict_groups(session: RailSession) -> None:
    current = quarter(session.dedup.index_pointer)
    if current == session.buffer_quarter:
        return
    session.buffer_quarter = current
    live = (current, (current - 1) % 4)
    for base in [b for b in session.parity_buffer if quarter(b) not in live]:
        del session.parity_buffer[base]
    for base in [b for b in session.pending_parity if quarter(b) not in live]:
        del session.pending_parity[base]
        session.counters.unrecoverable_groups += 1
        logger.debug(f"Group {base}: evicted with two or more data frames missing")


def _deliver_data(session: RailSession, frame: Frame) -> list[bytes]:
    packet_id = frame.tag.packet_id
    verdict = dedup_check(session.dedup, packet_id)
    if verdict == DedupVerdict.DUPLICATE:
        session.counters.duplicates_suppressed += 1
        return []
    if verdict == DedupVerdict.STALE:
        session.counters.stale += 1
        return []
    session.counters.delivered += 1
    return [frame.payload]


def _accept_parity(session: RailSession, frame: Frame) -> list[bytes]:
    """Recover the group's single missing data frame, or hold the parity
    until enough of the group has arrived."""
    x = session.group_size
    base = frame.tag.packet_id - (x - 1)
    received = session.parity_buffer.get(base, {})
    lengths = frame.lengths or ()
    data_count = len(lengths) if lengths else x - 1
    if len(received) >= data_count:
        session.parity_buffer.pop(base, None)
        session.pending_parity.pop(base, None)
        return []
    if data_count - len(received) > 1:
        session.pending_parity[base] = frame
        return []

    session.parity_buffer.pop(base, None)
    session.pending_parity.pop(base, None)
    group = ParityGroup(
        group_size=x,
        data_payloads=tuple(received[pos] for pos in sorted(received)),
        parity_payload=frame.payload,
        data_lengths=tuple(lengths),
    )
    position, payload = recover_missing(group, sorted(received.items()))
    verdict = dedup_check(session.dedup, (base + position) & MAX_PACKET_ID)
    if verdict != DedupVerdict.ACCEPT:
        return []
    session.counters.parity_recovered += 1
    session.counters.delivered += 1
    return [payload]


def egress_accept(session: RailSession, frame: Frame) -> list[bytes]:
    """Payloads released to the upper layer by one arriving frame."""
    if frame.tag.mode != int(session.mode):
        raise RailEngineError(
            f"frame mode {frame.tag.mode} does not match session {session.direction} mode {int(session.mode)}"
        )
    mode = session.mode

    if mode == RailMode.STRIPE:
        packet_id = frame.tag.packet_id
        newest = session.newest_stripe_id
        if newest is None or 0 < (packet_id - newest) & MAX_PACKET_ID < ID_SPACE // 2:
            session.newest_stripe_id = packet_id
        else:
            session.counters.reordered += 1
        session.counters.delivered += 1
        return [frame.payload]

    if mode == RailMode.MIRROR:
        return _deliver_data(session, frame)

    packet_id = frame.tag.packet_id
    if session.is_parity_id(packet_id):
        delivered = _accept_parity(session, frame)
    else:
        delivered = _deliver_data(session, frame)
        if delivered:
            x = session.group_size
            base = packet_id - packet_id % x
            session.parity_buffer.setdefault(base, {})[packet_id % x] = frame.payload
            if base in session.pending_parity:
                delivered += _accept_parity(session, session.pending_parity[base])
    if session.dedup.index_pointer is not None:
        _evict_groups(session)
    return delivered


# --- Adaptive weights ---

def update_weights(session: RailSession, stats: PathStats, smoothing: float = DEFAULT_SMOOTHING) -> tuple[float, ...]:
    """Reweight paths by capacity times estimated delivery probability."""
    if len(stats.ewma_loss) != session.k:
        raise RailEngineError(f"stats cover {len(stats.ewma_loss)} paths, session has {session.k}")
    stats.fold(smoothing)
    raw = [
        path.bottleneck_capacity * (1.0 - loss)
        for path, loss in zip(session.path_group.paths, stats.ewma_loss)
    ]
    total = sum(raw)
    if total <= 0:
        weights = tuple(1.0 / session.k for _ in raw)
    else:
        weights = tuple(r / total for r in raw)
    session.path_group = session.path_group.with_weights(weights)
    logger.debug(f"Session {session.direction} weights -> {[round(w, 4) for w in weights]}")
    return weights


def record_path_outcome(session: RailSession, path_index: int, delivered: bool) -> None:
    """Feed one frame outcome back; adaptive sessions reweight every interval."""
    session.path_stats.record(path_index, delivered)
    session.frames_since_reweight += 1
    if session.adaptive and session.frames_since_reweight >= REWEIGHT_INTERVAL:
        update_weights(session, session.path_stats, session.smoothing)
        session.frames_since_reweight = 0


# --- Session configuration ---

ENDPOINT_ALIASES = ("@gateway", "@deepest-edge")


def _resolve_endpoint(name: str, topo: Topology) -> str:
    if name == "@gateway":
        return topo.gateway
    if name == "@deepest-edge":
        depth = nx.single_source_shortest_path_length(topo.simple_graph(), topo.gateway)
        reachable = [e for e in topo.edge_nodes if e in depth]
        if not reachable:
            raise RailEngineError("no edge node is reachable from the gateway")
        return min(reachable, key=lambda e: (-depth[e], e))
    if name.startswith("@"):
        raise RailEngineError(f"unknown endpoint alias '{name}' (expected one of {ENDPOINT_ALIASES})")
    return name


def resolve_session_paths(data: dict, topo: Topology) -> dict:
    """Copy of a session config with endpoint aliases and paths filled in.

    A config without "paths" gets up to k shortest interior-disjoint paths;
    when fewer exist, k shrinks to the number found.
    """
    try:
        resolved = {
            **data,
            "ingress": _resolve_endpoint(str(data["ingress"]), topo),
            "egress": _resolve_endpoint(str(data["egress"]), topo),
        }
        if "paths" in resolved:
            return resolved
        k = int(resolved["k"])
        group = build_path_group(topo, resolved["ingress"], resolved["egress"], k)
    except (TopologyError, PathAnalysisError) as e:
        raise RailEngineError(str(e)) from e
    if group.k < k:
        logger.warning(
            f"Only {group.k} of {k} disjoint paths between {resolved['ingress']} and "
            f"{resolved['egress']}; session runs on {group.k}"
        )
    resolved["paths"] = [list(path.nodes) for path in group.paths]
    resolved["k"] = group.k
    return resolved


def session_from_dict(data: dict, topo: Topology, source: str = "session") -> RailSession:
    try:
        data = resolve_session_paths(data, topo)
        ingress, egress = str(data["ingress"]), str(data["egress"])
        paths = tuple(path_spec(topo, nodes) for nodes in data["paths"])
        weights = data.get("weights") or capacity_weights(list(paths))
        group = PathGroup(paths=paths, weights=tuple(float(w) for w in weights))
        return configure_session(
            (ingress, egress),
            data.get("direction"),
            int(data["mode"]),
            int(data.get("k", len(paths))),
            data.get("X"),
            group,
            adaptive=bool(data.get("adaptive", False)),
            smoothing=float(data.get("smoothing", DEFAULT_SMOOTHING)),
        )
    except KeyError as e:
        raise RailEngineError(f"{source}: missing key {e}") from e
    except (TopologyError, PathAnalysisError) as e:
        raise RailEngineError(f"{source}: {e}") from e


def load_session_config(path: Path, topo: Topology) -> RailSession:
    """Load a session config JSON and bind its paths to the topology."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise RailEngineError(f"{path}: parse failure: {e.msg}") from e
    return session_from_dict(data, topo, source=str(path))


class SessionTable:
    """Sessions keyed by (ingress, egress); each direction is independent."""

    def __init__(self):
        self._sessions: dict[tuple[str, str], RailSession] = {}
        self.dropped_unknown = 0

    def add(self, session: RailSession) -> None:
        if session.key in self._sessions:
            raise RailEngineError(f"session {session.ingress} -> {session.egress} already configured")
        self._sessions[session.key] = session

    def get(self, ingress: str, egress: str) -> RailSession | None:
        return self._sessions.get((ingress, egress))

    def __len__(self) -> int:
        return len(self._sessions)

    def __iter__(self):
        return iter(self._sessions[key] for key in sorted(self._sessions))

    def dispatch(self, ingress: str, egress: str, frame: Frame) -> list[bytes]:
        """Egress processing for a frame; unknown sessions are dropped."""
        session = self.get(ingress, egress)
        if session is None:
            self.dropped_unknown += 1
            logger.warning(f"Dropping frame {frame.tag.packet_id} for unknown session {ingress} -> {egress}")
            return []
        return egress_accept(session, frame)
