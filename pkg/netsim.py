"""
Deterministic packet-level simulator for rail sessions.

Every directed hop of a session path is a port (unbounded FIFO, serialization
at the hop capacity) feeding a wire (propagation delay, Bernoulli loss from a
piecewise-constant schedule). Time is integer microseconds. Each port draws
from its own RNG stream seeded by (seed, link index, direction), so results
depend only on the config and seed.

Probe payloads start with a sequence number and the send time (struct
"!IQ"), from which the receiver computes one-way delay.

Metrics CSV:
    run_id,mode,k,X,loss,sent,delivered,lost,dup_suppressed,parity_recovered,avg_delay_ms,goodput_mbps
"""

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import polars as pl
import simpy

from path_analysis import (
    DEFAULT_CLUSTER_RADIUS_M,
    DEFAULT_FANOUT,
    load_coordinates,
    port_weights,
    synthesize_topology,
)
from rail_codec import FRAME_OVERHEAD
from rail_engine import (
    Frame,
    RailEngineError,
    SessionTable,
    ingress_flush,
    ingress_next,
    record_path_outcome,
    resolve_session_paths,
    session_from_dict,
)
from topo_model import Link, Topology, load_topology
from utils.logger import get_logger

logger = get_logger(__name__)

PROBE_HEADER = struct.Struct("!IQ")
DEFAULT_PROBE_BYTES = 96
DEFAULT_PROBE_GAP_US = 1000
DEFAULT_PROBE_COUNT = 500
PROBE_CAPACITY_MBPS = 10.0
SWEEP_PAYLOAD_BYTES = 1400

METRICS_COLUMNS = [
    "run_id", "mode", "k", "X", "loss", "sent", "delivered", "lost",
    "dup_suppressed", "parity_recovered", "avg_delay_ms", "goodput_mbps",
]
EVENT_COLUMNS = ["time_us", "event", "packet_id", "path_index", "mode"]

# drop_rule(frame, hop) -> True drops the frame on that hop
DropRule = Callable[[Frame, int], bool]


class SimulationError(ValueError):
    """Invalid simulation or experiment configuration."""


@dataclass(frozen=True)
class LossSchedule:
    """Piecewise-constant loss: steps of (start_us, rate), time-ordered."""

    steps: tuple[tuple[int, float], ...]

    def __post_init__(self):
        previous = -1
        for start, rate in self.steps:
            if start <= previous:
                raise SimulationError(f"loss schedule starts not strictly increasing: {self.steps}")
            if not 0.0 <= rate <= 1.0:
                raise SimulationError(f"loss rate {rate} outside [0, 1]")
            previous = start

    @classmethod
    def constant(cls, rate: float) -> "LossSchedule":
        return cls(steps=((0, rate),))

    def rate_at(self, time_us: int, default: float) -> float:
        rate = default
        for start, step_rate in self.steps:
            if start > time_us:
                break
            rate = step_rate
        return rate


@dataclass(frozen=True)
class ProbeSpec:
    payload_size: int = DEFAULT_PROBE_BYTES
    inter_packet_gap: int = DEFAULT_PROBE_GAP_US
    count: int = DEFAULT_PROBE_COUNT

    def __post_init__(self):
        if self.inter_packet_gap <= 0:
            raise SimulationError(f"inter-packet gap must be > 0 us, got {self.inter_packet_gap}")
        if self.payload_size < PROBE_HEADER.size:
            raise SimulationError(f"probe payload must hold {PROBE_HEADER.size} header bytes")
        if self.count < 0:
            raise SimulationError(f"negative probe count {self.count}")


@dataclass(frozen=True)
class TrafficSpec:
    """A source bound to one session; gap 0 enqueues everything at t=0."""

    session: int = 0
    payload_size: int = DEFAULT_PROBE_BYTES
    gap_us: int = DEFAULT_PROBE_GAP_US
    count: int = DEFAULT_PROBE_COUNT

    def __post_init__(self):
        if self.payload_size < PROBE_HEADER.size:
            raise SimulationError(f"payload must hold {PROBE_HEADER.size} header bytes, got {self.payload_size}")
        if self.gap_us < 0 or self.count < 0:
            raise SimulationError(f"gap and count must be >= 0, got {self.gap_us} and {self.count}")


@dataclass(frozen=True)
class SimConfig:
    topology: Topology
    sessions: tuple[dict, ...]
    traffic: tuple[TrafficSpec, ...]
    loss_schedules: dict[int, LossSchedule] = field(default_factory=dict)
    rng_seed: int = 0
    end_time_us: int | None = None
    run_id: str = "run"
    loss_label: float | None = None
    drop_rule: DropRule | None = None


@dataclass(frozen=True)
class PathBreakdown:
    frames_sent: int
    frames_arrived: int
    frames_dropped: int


@dataclass(frozen=True)
class Metrics:
    run_id: str
    mode: int
    k: int
    X: int
    loss: float
    sent: int
    delivered: int
    lost: int
    dup_suppressed: int
    parity_recovered: int
    avg_delay_ms: float
    goodput_mbps: float
    copies_sent: int = 0
    copies_delivered: int = 0
    copies_dropped: int = 0
    per_path: tuple[PathBreakdown, ...] = ()

    def row(self) -> dict:
        return {column: getattr(self, column) for column in METRICS_COLUMNS}


@dataclass
class _Packet:
    frame: Frame
    session: int
    nodes: tuple[str, ...]
    hop: int = 0

    @property
    def size(self) -> int:
        return len(self.frame.payload) + FRAME_OVERHEAD


def transmission_us(size_bytes: int, capacity_mbps: float) -> int:
    """Serialization time; 1 Mbps moves one bit per microsecond."""
    return math.ceil(size_bytes * 8 / capacity_mbps)


def probe_payload(seq: int, send_time_us: int, size: int) -> bytes:
    header = PROBE_HEADER.pack(seq, send_time_us)
    return header + bytes(size - len(header))


class _LinkPort:
    """One direction of a hop: FIFO serializer followed by a lossy wire."""

    def __init__(self, sim: "_Simulation", link: Link, src: str, capacity: float):
        self.sim = sim
        self.link = link
        self.capacity = capacity
        self.delay_us = round(link.delay * 1000)
        direction = 0 if src == link.a else 1
        self.rng = np.random.default_rng([sim.config.rng_seed, link.index, direction])
        self.schedule = sim.config.loss_schedules.get(link.index)
        self.queue = simpy.Store(sim.env)
        sim.env.process(self._serve())

    def put(self, packet: _Packet) -> None:
        self.queue.put(packet)

    def loss_rate(self) -> float:
        if self.schedule is None:
            return self.link.loss_rate
        return self.schedule.rate_at(self.sim.env.now, self.link.loss_rate)

    def _serve(self):
        env = self.sim.env
        while True:
            packet = yield self.queue.get()
            yield env.timeout(transmission_us(packet.size, self.capacity))
            draw = self.rng.random()
            rule = self.sim.config.drop_rule
            if (rule is not None and rule(packet.frame, packet.hop)) or draw < self.loss_rate():
                self.sim.on_drop(packet)
                continue
            arrival = env.timeout(self.delay_us)
            arrival.callbacks.append(lambda _event, p=packet: self.sim.forward(p))


class _Simulation:
    def __init__(self, config: SimConfig, event_log: list | None = None):
        self.config = config
        self.env = simpy.Environment()
        self.event_log = event_log
        self.table = SessionTable()
        self.sessions = []
        for i, data in enumerate(config.sessions):
            try:
                session = session_from_dict(data, config.topology, source=f"session {i}")
                self.table.add(session)
            except RailEngineError as e:
                raise SimulationError(str(e)) from e
            self.sessions.append(session)

        self.ports: dict[tuple[str, str], _LinkPort] = {}
        self.sent_at: dict[tuple[int, int], int] = {}
        self.delivered_at: dict[tuple[int, int], int] = {}
        self.payload_bytes: dict[tuple[int, int], int] = {}
        self.copies_sent = self.copies_delivered = self.copies_dropped = 0
        k_max = max((s.k for s in self.sessions), default=0)
        self.path_sent = [0] * k_max
        self.path_arrived = [0] * k_max
        self.path_dropped = [0] * k_max

    def port(self, u: str, v: str) -> _LinkPort:
        if (u, v) not in self.ports:
            links = self.config.topology.links_between(u, v)
            if not links:
                raise SimulationError(f"session path uses missing link {u}-{v}")
            first = min(links, key=lambda link: link.index)
            self.ports[(u, v)] = _LinkPort(self, first, u, sum(link.capacity for link in links))
        return self.ports[(u, v)]

    def log(self, event: str, frame: Frame) -> None:
        if self.event_log is not None:
            self.event_log.append((self.env.now, event, frame.tag.packet_id, frame.path_index, frame.tag.mode))

    def emit(self, index: int, frame: Frame) -> None:
        session = self.sessions[index]
        packet = _Packet(frame, index, session.path_group.paths[frame.path_index].nodes)
        self.copies_sent += 1
        self.path_sent[frame.path_index] += 1
        self.log("send", frame)
        self.port(packet.nodes[0], packet.nodes[1]).put(packet)

    def source(self, traffic: TrafficSpec):
        session = self.sessions[traffic.session]
        for seq in range(traffic.count):
            payload = probe_payload(seq, self.env.now, traffic.payload_size)
            key = (traffic.session, seq)
            self.sent_at[key] = self.env.now
            self.payload_bytes[key] = len(payload)
            for frame in ingress_next(session, payload):
                self.emit(traffic.session, frame)
            if traffic.gap_us > 0:
                yield self.env.timeout(traffic.gap_us)
        for frame in ingress_flush(session):
            self.emit(traffic.session, frame)

    def on_drop(self, packet: _Packet) -> None:
        self.copies_dropped += 1
        self.path_dropped[packet.frame.path_index] += 1
        self.log("drop", packet.frame)
        record_path_outcome(self.sessions[packet.session], packet.frame.path_index, False)

    def forward(self, packet: _Packet) -> None:
        packet.hop += 1
        if packet.hop < len(packet.nodes) - 1:
            self.port(packet.nodes[packet.hop], packet.nodes[packet.hop + 1]).put(packet)
            return
        self.arrive(packet)

    def arrive(self, packet: _Packet) -> None:
        session = self.sessions[packet.session]
        frame = packet.frame
        self.copies_delivered += 1
        self.path_arrived[frame.path_index] += 1
        self.log("arrive", frame)
        record_path_outcome(session, frame.path_index, True)

        recovered_before = session.counters.parity_recovered
        for payload in self.table.dispatch(session.ingress, session.egress, frame):
            seq, _ = PROBE_HEADER.unpack_from(payload)
            key = (packet.session, seq)
            if key not in self.delivered_at:
                self.delivered_at[key] = self.env.now
        if session.counters.parity_recovered > recovered_before:
            self.log("recover", frame)

    def run(self) -> None:
        for traffic in self.config.traffic:
            if not 0 <= traffic.session < len(self.sessions):
                raise SimulationError(f"traffic references unknown session {traffic.session}")
            self.env.process(self.source(traffic))
        if self.config.end_time_us is None:
            self.env.run()
        else:
            self.env.run(until=self.config.end_time_us)


def _loss_label(config: SimConfig) -> float:
    if config.loss_label is not None:
        return config.loss_label
    rates = [
        link.loss_rate
        for data in config.sessions
        for nodes in data.get("paths", [])
        for u, v in zip(nodes, nodes[1:])
        for link in config.topology.links_between(u, v)
    ]
    return max(rates, default=0.0)


def resolve_sessions(sessions: Iterable[dict], topo: Topology) -> tuple[dict, ...]:
    """Session configs with aliases and derived paths filled in."""
    try:
        return tuple(resolve_session_paths(data, topo) for data in sessions)
    except RailEngineError as e:
        raise SimulationError(str(e)) from e
    except KeyError as e:
        raise SimulationError(f"session config missing key {e}") from e


def run(config: SimConfig, event_log_path: Path | None = None) -> Metrics:
    """Execute one simulation and summarize unique-payload delivery."""
    if not config.sessions:
        raise SimulationError("simulation needs at least one session")
    config = replace(config, sessions=resolve_sessions(config.sessions, config.topology))
    for index in config.loss_schedules:
        if not 0 <= index < len(config.topology.links):
            raise SimulationError(f"loss schedule for unknown link index {index}")

    events: list | None = [] if event_log_path is not None else None
    sim = _Simulation(config, events)
    sim.run()

    sent = len(sim.sent_at)
    delivered = len(sim.delivered_at)
    delays = [sim.delivered_at[key] - sim.sent_at[key] for key in sorted(sim.delivered_at)]
    avg_delay_ms = float(np.mean(delays)) / 1000 if delays else 0.0
    if delivered:
        duration = max(sim.delivered_at.values()) - min(sim.sent_at.values())
        bits = 8 * sum(sim.payload_bytes[key] for key in sim.delivered_at)
        goodput = bits / duration if duration > 0 else 0.0
    else:
        goodput = 0.0

    first = sim.sessions[0]
    metrics = Metrics(
        run_id=config.run_id,
        mode=int(first.mode),
        k=first.k,
        X=first.group_size,
        loss=_loss_label(config),
        sent=sent,
        delivered=delivered,
        lost=sent - delivered,
        dup_suppressed=sum(s.counters.duplicates_suppressed for s in sim.sessions),
        parity_recovered=sum(s.counters.parity_recovered for s in sim.sessions),
        avg_delay_ms=avg_delay_ms,
        goodput_mbps=goodput,
        copies_sent=sim.copies_sent,
        copies_delivered=sim.copies_delivered,
        copies_dropped=sim.copies_dropped,
        per_path=tuple(
            PathBreakdown(s, a, d)
            for s, a, d in zip(sim.path_sent, sim.path_arrived, sim.path_dropped)
        ),
    )
    if event_log_path is not None:
        write_event_log(events, event_log_path)
    logger.debug(
        f"{config.run_id}: sent {metrics.sent}, delivered {metrics.delivered}, "
        f"avg delay {metrics.avg_delay_ms:.3f} ms, goodput {metrics.goodput_mbps:.3f} Mbps"
    )
    return metrics


def write_event_log(events: list, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.DataFrame(
        events,
        schema={"time_us": pl.Int64, "event": pl.String, "packet_id": pl.Int64,
                "path_index": pl.Int64, "mode": pl.Int64},
        orient="row",
    ).write_csv(path)
    return path


# --- Experiments ---

def _first_links(topo: Topology, session: dict) -> list[int]:
    indices = []
    for nodes in session.get("paths", []):
        links = topo.links_between(nodes[0], nodes[1]) if len(nodes) > 1 else []
        if not links:
            raise SimulationError(f"session path {nodes} missing from topology")
        indices.append(min(link.index for link in links))
    return indices


def _with_capacity(topo: Topology, session: dict, capacity_mbps: float) -> Topology:
    on_path = {
        tuple(sorted(hop))
        for nodes in session.get("paths", [])
        for hop in zip(nodes, nodes[1:])
    }
    return topo.with_link_list(
        replace(link, capacity=capacity_mbps) if link.endpoints in on_path else link
        for link in topo.links
    )


def probe_experiment(
    topo: Topology,
    session: dict,
    probe: ProbeSpec = ProbeSpec(),
    rng_seed: int = 0,
    capacity_mbps: float | None = PROBE_CAPACITY_MBPS,
    loss: float | None = None,
    drop_rule: DropRule | None = None,
    run_id: str = "probe",
    event_log_path: Path | None = None,
) -> Metrics:
    """Constant-rate probes over one session.

    Path links run at capacity_mbps (None keeps the topology's rates); a
    loss value replaces the loss of every path's first link.
    """
    (session,) = resolve_sessions([session], topo)
    if capacity_mbps is not None:
        topo = _with_capacity(topo, session, capacity_mbps)
    schedules = {}
    if loss is not None:
        schedules = {i: LossSchedule.constant(loss) for i in _first_links(topo, session)}
    config = SimConfig(
        topology=topo,
        sessions=(session,),
        traffic=(TrafficSpec(0, probe.payload_size, probe.inter_packet_gap, probe.count),),
        loss_schedules=schedules,
        rng_seed=rng_seed,
        run_id=run_id,
        loss_label=loss,
        drop_rule=drop_rule,
    )
    return run(config, event_log_path)


def arq_baseline(
    capacity_mbps: float,
    delay_ms: float,
    loss: float,
    payload_size: int,
    count: int,
    rng_seed: int = 0,
) -> float:
    """Goodput of an idealized single-path fixed-window ARQ.

    Frames go back to back; a lost frame is queued again one RTT after its
    transmission ends. Returns unique-payload goodput in Mbps.
    """
    if not 0.0 <= loss < 1.0:
        raise SimulationError(f"ARQ loss {loss} outside [0, 1)")
    env = simpy.Environment()
    queue = simpy.Store(env)
    rng = np.random.default_rng([rng_seed, 0xA12])
    tx = transmission_us(payload_size + FRAME_OVERHEAD, capacity_mbps)
    delay_us = round(delay_ms * 1000)
    rtt = 2 * delay_us + tx
    done: list[int] = []

    def sender():
        while len(done) < count:
            seq = yield queue.get()
            yield env.timeout(tx)
            if rng.random() < loss:
                retry = env.timeout(rtt)
                retry.callbacks.append(lambda _event, s=seq: queue.put(s))
            else:
                done.append(env.now + delay_us)

    for seq in range(count):
        queue.put(seq)
    env.process(sender())
    env.run()
    if not done:
        return 0.0
    return count * payload_size * 8 / max(done)


@dataclass(frozen=True)
class SweepPoint:
    loss: float
    goodput_mbps: float
    baseline_goodput_mbps: float
    metrics: Metrics


def _sweep_point(args: tuple) -> SweepPoint:
    topo, session, loss, count, payload_size, rng_seed, run_id, baseline_path = args
    schedules = {i: LossSchedule.constant(loss) for i in _first_links(topo, session)}
    config = SimConfig(
        topology=topo,
        sessions=(session,),
        traffic=(TrafficSpec(0, payload_size, 0, count),),
        loss_schedules=schedules,
        rng_seed=rng_seed,
        run_id=run_id,
        loss_label=loss,
    )
    metrics = run(config)
    capacity, delay = baseline_path
    baseline = arq_baseline(capacity, delay, loss, payload_size, count, rng_seed)
    return SweepPoint(loss, metrics.goodput_mbps, baseline, metrics)


def goodput_sweep(
    topo: Topology,
    session: dict,
    loss_points: list[float],
    transfer_bytes: int,
    payload_size: int = SWEEP_PAYLOAD_BYTES,
    rng_seed: int = 0,
    workers: int = 1,
    run_prefix: str = "sweep",
) -> list[SweepPoint]:
    """Saturating transfer at each loss rate (applied to every path's first link).

    Each point also reports the ARQ baseline over the session's
    lowest-delay path. Points come back ordered by loss.
    """
    if any(not 0.0 <= p < 1.0 for p in loss_points):
        raise SimulationError(f"loss points must lie in [0, 1): {loss_points}")
    if transfer_bytes <= 0:
        raise SimulationError(f"transfer size must be > 0, got {transfer_bytes}")
    (session,) = resolve_sessions([session], topo)
    count = math.ceil(transfer_bytes / payload_size)

    candidates = []
    for nodes in session.get("paths", []):
        hops = list(zip(nodes, nodes[1:]))
        delay = sum(min(topo.links_between(u, v), key=lambda link: link.index).delay for u, v in hops)
        capacity = min(topo.hop_capacity(u, v) for u, v in hops)
        candidates.append((delay, capacity))
    if not candidates:
        raise SimulationError("sweep session has no paths")
    best_delay, best_capacity = min(candidates)
    baseline_path = (best_capacity, best_delay)

    args = [
        (topo, session, loss, count, payload_size, rng_seed, f"{run_prefix}-{loss:g}", baseline_path)
        for loss in sorted(loss_points)
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        points = list(executor.map(_sweep_point, args))
    for point in points:
        logger.info(
            f"  loss {point.loss:.2f}: goodput {point.goodput_mbps:.3f} Mbps "
            f"(ARQ baseline {point.baseline_goodput_mbps:.3f})"
        )
    return points


def sweep_frame(points: list[SweepPoint]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "loss": [p.loss for p in points],
            "goodput_mbps": [p.goodput_mbps for p in points],
            "baseline_goodput_mbps": [p.baseline_goodput_mbps for p in points],
        },
        schema={"loss": pl.Float64, "goodput_mbps": pl.Float64, "baseline_goodput_mbps": pl.Float64},
    )


def metrics_frame(metrics: list[Metrics]) -> pl.DataFrame:
    return pl.DataFrame(
        [m.row() for m in metrics],
        schema={
            "run_id": pl.String, "mode": pl.Int64, "k": pl.Int64, "X": pl.Int64,
            "loss": pl.Float64, "sent": pl.Int64, "delivered": pl.Int64, "lost": pl.Int64,
            "dup_suppressed": pl.Int64, "parity_recovered": pl.Int64,
            "avg_delay_ms": pl.Float64, "goodput_mbps": pl.Float64,
        },
        orient="row",
    )


def export_metrics(metrics: Metrics | list[Metrics], path: Path) -> Path:
    """One CSV row per run with a fixed column order."""
    if isinstance(metrics, Metrics):
        metrics = [metrics]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(metrics).write_csv(path, float_precision=6)
    return path


@dataclass(frozen=True)
class SynthesisSpec:
    """Topology synthesized from site coordinates instead of read from JSON."""

    coordinates: Path
    fanout: int = DEFAULT_FANOUT
    cluster_radius_m: float = DEFAULT_CLUSTER_RADIUS_M
    seed: int = 0


@dataclass(frozen=True)
class Experiment:
    name: str
    kind: str
    topology_path: Path | None
    session: dict
    iterations: int = 1
    seed: int = 0
    probe: ProbeSpec = ProbeSpec()
    capacity_mbps: float | None = PROBE_CAPACITY_MBPS
    loss: float | None = None
    loss_points: tuple[float, ...] = ()
    transfer_bytes: int = 0
    payload_size: int = SWEEP_PAYLOAD_BYTES
    referenced: tuple[Path, ...] = ()
    synthesis: SynthesisSpec | None = None


EXPERIMENT_KINDS = ("probe", "sweep")


def load_experiment(path: Path) -> Experiment:
    """Read an experiment config; relative paths resolve against its directory.

    The topology comes from "topology" (a JSON file) or from "synthesize"
    ({"coordinates": csv, "fanout": int?, "cluster_radius_m": float?, "seed": int?}).
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SimulationError(f"{path}: parse failure: {e.msg}") from e

    base = path.parent
    try:
        topology_path, synthesis = None, None
        if "synthesize" in data:
            synth = data["synthesize"]
            synthesis = SynthesisSpec(
                coordinates=base / synth["coordinates"],
                fanout=int(synth.get("fanout", DEFAULT_FANOUT)),
                cluster_radius_m=float(synth.get("cluster_radius_m", DEFAULT_CLUSTER_RADIUS_M)),
                seed=int(synth.get("seed", 0)),
            )
            referenced = [synthesis.coordinates]
        else:
            topology_path = base / data["topology"]
            referenced = [topology_path]
        session = data["session"]
        if isinstance(session, str):
            session_path = base / session
            referenced.append(session_path)
            with open(session_path) as f:
                session = json.load(f)
        kind = data.get("kind", "probe")
        if kind not in EXPERIMENT_KINDS:
            raise SimulationError(f"{path}: unknown experiment kind '{kind}'")
        probe = data.get("probe", {})
        return Experiment(
            name=data.get("name", path.stem),
            kind=kind,
            topology_path=topology_path,
            session=session,
            iterations=int(data.get("iterations", 1)),
            seed=int(data.get("seed", 0)),
            probe=ProbeSpec(
                payload_size=int(probe.get("payload_size", DEFAULT_PROBE_BYTES)),
                inter_packet_gap=int(probe.get("inter_packet_gap_us", DEFAULT_PROBE_GAP_US)),
                count=int(probe.get("count", DEFAULT_PROBE_COUNT)),
            ),
            capacity_mbps=data.get("capacity_mbps", PROBE_CAPACITY_MBPS),
            loss=data.get("loss"),
            loss_points=tuple(float(p) for p in data.get("loss_points", ())),
            transfer_bytes=int(data.get("transfer_bytes", 0)),
            payload_size=int(data.get("payload_size", SWEEP_PAYLOAD_BYTES)),
            referenced=tuple(referenced),
            synthesis=synthesis,
        )
    except KeyError as e:
        raise SimulationError(f"{path}: missing key {e}") from e


@dataclass(frozen=True)
class ExperimentResult:
    metrics: list[Metrics]
    sweep: list[SweepPoint] | None = None
    # (switch, next hop) -> outbound weight of the session's path group
    port_weights: dict[tuple[str, str], float] = field(default_factory=dict)


def experiment_topology(experiment: Experiment) -> Topology:
    if experiment.synthesis is None:
        return load_topology(experiment.topology_path)
    synth = experiment.synthesis
    return synthesize_topology(
        load_coordinates(synth.coordinates), synth.fanout, synth.cluster_radius_m, synth.seed
    )


def session_port_weights(topo: Topology, session: dict) -> dict[tuple[str, str], float]:
    """Outbound port weights a controller would install for one session."""
    try:
        group = session_from_dict(session, topo).path_group
    except RailEngineError as e:
        raise SimulationError(str(e)) from e
    return port_weights([group])


def port_weight_frame(weights: dict[tuple[str, str], float]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "switch": [u for u, _ in weights],
            "next_hop": [v for _, v in weights],
            "weight": list(weights.values()),
        },
        schema={"switch": pl.String, "next_hop": pl.String, "weight": pl.Float64},
    )


def run_experiment(experiment: Experiment, workers: int = 1) -> ExperimentResult:
    """Run every iteration (seed = base seed + iteration) and merge in order."""
    topo = experiment_topology(experiment)
    (session,) = resolve_sessions([experiment.session], topo)
    weights = session_port_weights(topo, session)

    if experiment.kind == "sweep":
        points = goodput_sweep(
            topo,
            session,
            list(experiment.loss_points),
            experiment.transfer_bytes,
            experiment.payload_size,
            experiment.seed,
            workers,
            run_prefix=experiment.name,
        )
        return ExperimentResult(metrics=[p.metrics for p in points], sweep=points, port_weights=weights)

    def iteration(i: int) -> Metrics:
        return probe_experiment(
            topo,
            session,
            experiment.probe,
            rng_seed=experiment.seed + i,
            capacity_mbps=experiment.capacity_mbps,
            loss=experiment.loss,
            run_id=f"{experiment.name}-{i:02d}",
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        metrics = list(executor.map(iteration, range(experiment.iterations)))
    lost = [m.lost for m in metrics]
    logger.info(
        f"  {experiment.name}: {len(metrics)} iterations, mean lost {np.mean(lost):.1f}, "
        f"mean delay {np.mean([m.avg_delay_ms for m in metrics]):.3f} ms"
    )
    return ExperimentResult(metrics=metrics, port_weights=weights)
