"""Deterministic discrete-event packet simulator.

Supplies the traffic, hop-count routing, drop-tail queuing, and drops the
analytics observe. Determinism is pinned by:

- integer-microsecond time everywhere,
- event ordering by (time, lane, node, packet seq, enqueue counter), where
  lane 0 runs controller actions before packet work at the same instant and
  lane 2 runs transport deliveries after it,
- serialization delay = ceil(size_bytes * 8e6 / capacity_bps) microseconds,
- a SplitMix64 generator for randomized scenarios.

The data path exposes four attach locations to an optional observer
("tap"): ingress ports, egress ports, queues, and the flow table. The host
side of a node is port ``HOST_PORT``. Taps may append packet metadata but
can never alter forwarding, ordering, or drops.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

from .core import (
    MAX_PACKET_BYTES,
    MIN_PACKET_BYTES,
    FlowKey,
    NodeId,
    Packet,
    SimTime,
)

HOST_PORT = -1  # local/host side of a node, as opposed to a neighbor-facing port

LOC_INGRESS = "ingress"
LOC_EGRESS = "egress"
LOC_QUEUE = "queue"
LOC_FLOW_TABLE = "flow_table"

ROLES = ("edge", "core", "server-facing")

# event lanes: controller-before-packets, packet events, transport-after-packets
_LANE_CTRL_PRE = 0
_LANE_PACKET = 1
_LANE_CTRL_POST = 2


class TopologyError(Exception):
    pass


class SelfLoop(TopologyError):
    pass


class DuplicateLink(TopologyError):
    pass


class DisconnectedGraph(TopologyError):
    pass


@dataclass(frozen=True)
class LinkDef:
    a: NodeId
    b: NodeId
    capacity_bps: int
    propagation_us: SimTime
    buffer_bytes: int


@dataclass(frozen=True)
class Topology:
    """Validated immutable topology handle. Build via :func:`build_topology`."""

    roles: dict  # NodeId -> role
    links: tuple  # of LinkDef
    adjacency: dict  # NodeId -> sorted tuple of neighbor NodeIds
    link_params: dict  # (NodeId, NodeId) directed -> (capacity, propagation, buffer)

    def nodes(self) -> list[NodeId]:
        return sorted(self.roles)

    def edge_nodes(self) -> list[NodeId]:
        return sorted(n for n, r in self.roles.items() if r == "edge")

    def nodes_with_role(self, role: str) -> list[NodeId]:
        return sorted(n for n, r in self.roles.items() if r == role)


def build_topology(nodes, links) -> Topology:
    """Validate and freeze a topology description.

    ``nodes``: iterable of (NodeId, role); ``links``: iterable of LinkDef or
    (a, b, capacity_bps, propagation_us, buffer_bytes) tuples.
    """
    roles = {}
    for nid, role in nodes:
        if nid < 0:
            raise ValueError(f"node id {nid} must be non-negative")
        if nid in roles:
            raise ValueError(f"duplicate node id {nid}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r} for node {nid}")
        roles[nid] = role

    linkdefs = []
    seen_pairs = set()
    adjacency = {n: [] for n in roles}
    link_params = {}
    for raw in links:
        link = raw if isinstance(raw, LinkDef) else LinkDef(*raw)
        if link.a == link.b:
            raise SelfLoop(f"self-loop at node {link.a}")
        if link.a not in roles or link.b not in roles:
            raise ValueError(f"link {link.a}-{link.b} references unknown node")
        pair = (min(link.a, link.b), max(link.a, link.b))
        if pair in seen_pairs:
            raise DuplicateLink(f"duplicate link {pair[0]}-{pair[1]}")
        if link.capacity_bps <= 0 or link.propagation_us < 0 or link.buffer_bytes <= 0:
            raise ValueError(f"bad parameters on link {link.a}-{link.b}")
        seen_pairs.add(pair)
        linkdefs.append(link)
        adjacency[link.a].append(link.b)
        adjacency[link.b].append(link.a)
        params = (link.capacity_bps, link.propagation_us, link.buffer_bytes)
        link_params[(link.a, link.b)] = params
        link_params[(link.b, link.a)] = params

    if roles:
        start = next(iter(sorted(roles)))
        seen = {start}
        frontier = [start]
        while frontier:
            n = frontier.pop()
            for m in adjacency[n]:
                if m not in seen:
                    seen.add(m)
                    frontier.append(m)
        if len(seen) != len(roles):
            missing = sorted(set(roles) - seen)
            raise DisconnectedGraph(f"nodes unreachable from {start}: {missing}")

    adjacency = {n: tuple(sorted(ns)) for n, ns in adjacency.items()}
    return Topology(roles, tuple(linkdefs), adjacency, link_params)


def compute_routes(topo: Topology) -> dict:
    """Hop-count shortest-path next hops, ties broken by smallest next-hop id.

    Returns a dict (src, dst) -> next-hop NodeId for all src != dst.
    """
    routes = {}
    for dst in topo.nodes():
        dist = {dst: 0}
        frontier = deque([dst])
        while frontier:
            n = frontier.popleft()
            for m in topo.adjacency[n]:
                if m not in dist:
                    dist[m] = dist[n] + 1
                    frontier.append(m)
        for src in topo.nodes():
            if src == dst:
                continue
            best = None
            for nh in topo.adjacency[src]:  # adjacency pre-sorted: first hit wins ties
                if dist.get(nh, -1) == dist[src] - 1:
                    best = nh
                    break
            routes[(src, dst)] = best
    return routes


@dataclass(frozen=True)
class FlowEntry:
    flow: FlowKey
    ingress: NodeId
    egress: NodeId
    packet_count: int
    packet_size_bytes: int
    start: SimTime
    inter_packet_gap: SimTime

    def __post_init__(self):
        if self.ingress == self.egress:
            raise ValueError("flow ingress and egress must differ")
        if self.packet_count < 1:
            raise ValueError("packet_count must be >= 1")
        if not MIN_PACKET_BYTES <= self.packet_size_bytes <= MAX_PACKET_BYTES:
            raise ValueError("packet size out of range")
        if self.start < 0 or self.inter_packet_gap < 0:
            raise ValueError("start and gap must be non-negative")


@dataclass(frozen=True)
class TrafficSpec:
    flows: tuple  # of FlowEntry
    seed: int = 0

    def __post_init__(self):
        ingress_of = {}
        for entry in self.flows:
            prev = ingress_of.setdefault(entry.flow, entry.ingress)
            if prev != entry.ingress:
                # one ingress per 5-tuple keeps network-wide per-flow
                # accounting single-counted
                raise ValueError(f"flow {entry.flow} injected at two ingresses")

    def total_packets(self) -> int:
        return sum(e.packet_count for e in self.flows)


@dataclass(frozen=True)
class DropRecord:
    node: NodeId
    port: NodeId
    flow: FlowKey
    time: SimTime
    seq: int


@dataclass
class Trace:
    """Per-hop event log; the only input the centralized checks consume.

    Event rows are tuples, first field is the kind:
      ("inj", time, node, seq, flow, size, dst_node)
      ("arr", time, node, from_port, seq)
      ("enq", time, node, port, seq, size)
      ("drop", time, node, port, seq)
      ("dlv", time, node, seq)
    Rows appear in processing order; times are non-decreasing.
    """

    events: list = field(default_factory=list)
    drops: list = field(default_factory=list)  # DropRecord, in drop order

    def inject_index(self) -> dict:
        """seq -> (time, node, flow, size, dst_node) from inj rows."""
        out = {}
        for row in self.events:
            if row[0] == "inj":
                out[row[3]] = (row[1], row[2], row[4], row[5], row[6])
        return out


@dataclass(frozen=True)
class DeliveredPacket:
    seq: int
    flow: FlowKey
    size_bytes: int
    inject_time: SimTime
    deliver_time: SimTime
    ingress_node: NodeId
    egress_node: NodeId
    metadata: tuple


@dataclass
class SimResult:
    delivered: list
    drops: list
    emissions: list
    clock: SimTime
    trace: Trace


class _LinkState:
    __slots__ = ("capacity", "propagation", "buffer_bytes", "used", "fifo", "busy")

    def __init__(self, capacity, propagation, buffer_bytes):
        self.capacity = capacity
        self.propagation = propagation
        self.buffer_bytes = buffer_bytes
        self.used = 0
        self.fifo = deque()
        self.busy = False


def serialization_us(size_bytes: int, capacity_bps: int) -> SimTime:
    return (size_bytes * 8_000_000 + capacity_bps - 1) // capacity_bps


class Engine:
    """Single-run discrete-event core.

    A tap (see :mod:`netmr.probes`) observes packets at attach points; the
    runtime schedules controller actions via :meth:`schedule_control`.
    """

    def __init__(self, topo: Topology, routes: dict | None = None, tap=None):
        self.topo = topo
        self.routes = routes if routes is not None else compute_routes(topo)
        self.tap = tap
        self.clock: SimTime = 0
        self.horizon: SimTime | None = None
        self._heap: list = []
        self._counter = 0
        self._links = {
            pair: _LinkState(*params) for pair, params in topo.link_params.items()
        }
        self.delivered: list = []
        self.drops: list = []
        self.trace = Trace()
        self._ran = False

    # -- scheduling ---------------------------------------------------------

    def _push(self, time, lane, node, seq, kind, data):
        self._counter += 1
        heapq.heappush(self._heap, (time, lane, node, seq, self._counter, kind, data))

    def schedule_control(self, time: SimTime, fn, after_packets: bool = False):
        """Run ``fn(time)`` at ``time``; by default before packet events there."""
        lane = _LANE_CTRL_POST if after_packets else _LANE_CTRL_PRE
        self._push(time, lane, -1, -1, "c", fn)

    def seed_traffic(self, traffic: TrafficSpec):
        seq = 0
        rows = []
        for entry in traffic.flows:
            t = entry.start
            for _ in range(entry.packet_count):
                pkt = Packet(seq, entry.flow, entry.packet_size_bytes, t)
                rows.append((t, _LANE_PACKET, entry.ingress, seq, seq, "i", (pkt, entry.egress)))
                seq += 1
                t += entry.inter_packet_gap
        self._counter = max(self._counter, seq)
        self._heap.extend(rows)
        heapq.heapify(self._heap)

    # -- packet pipeline ----------------------------------------------------

    def _route_and_forward(self, node, pkt, dst, t):
        tap = self.tap
        if tap is not None:
            tap.transit(LOC_FLOW_TABLE, node, None, pkt, t, False, dst)
        if node == dst:
            self.trace.events.append(("dlv", t, node, pkt.seq))
            if tap is not None:
                tap.transit(LOC_EGRESS, node, HOST_PORT, pkt, t, False, dst)
            self.delivered.append(
                DeliveredPacket(
                    pkt.seq, pkt.flow, pkt.size_bytes, pkt.inject_time, t,
                    pkt.ingress_node, node, tuple(pkt.metadata),
                )
            )
            return
        port = self.routes[(node, dst)]
        link = self._links[(node, port)]
        size = pkt.size_bytes
        if link.used + size > link.buffer_bytes:
            self.trace.events.append(("drop", t, node, port, pkt.seq))
            rec = DropRecord(node, port, pkt.flow, t, pkt.seq)
            self.drops.append(rec)
            self.trace.drops.append(rec)
            if tap is not None:
                tap.transit(LOC_QUEUE, node, port, pkt, t, True, dst)
            return
        if tap is not None:
            tap.transit(LOC_EGRESS, node, port, pkt, t, False, dst)
            tap.transit(LOC_QUEUE, node, port, pkt, t, False, dst)
        self.trace.events.append(("enq", t, node, port, pkt.seq, size))
        link.used += size
        link.fifo.append((pkt, dst))
        if not link.busy:
            self._start_tx(node, port, link, t)

    def _start_tx(self, node, port, link, t):
        pkt, _dst = link.fifo[0]
        link.busy = True
        done = t + serialization_us(pkt.size_bytes, link.capacity)
        self._push(done, _LANE_PACKET, node, pkt.seq, "t", port)

    # -- main loop ----------------------------------------------------------

    def run(self, traffic: TrafficSpec | None, until: SimTime) -> SimResult:
        if self._ran:
            raise RuntimeError("Engine instances are single-run")
        self._ran = True
        if until <= 0:
            raise ValueError("until must be positive")
        self.horizon = until
        if traffic is not None:
            self.seed_traffic(traffic)

        heap = self._heap
        pop = heapq.heappop
        trace_events = self.trace.events
        links = self._links
        while heap and heap[0][0] <= until:
            time, lane, node, seq, _cnt, kind, data = pop(heap)
            self.clock = time
            if kind == "i":
                pkt, dst = data
                pkt.ingress_node = node
                trace_events.append(("inj", time, node, pkt.seq, pkt.flow, pkt.size_bytes, dst))
                tap = self.tap
                if tap is not None:
                    tap.transit(LOC_INGRESS, node, HOST_PORT, pkt, time, False, dst)
                self._route_and_forward(node, pkt, dst, time)
            elif kind == "t":
                port = data
                link = links[(node, port)]
                pkt, dst = link.fifo.popleft()
                link.used -= pkt.size_bytes
                link.busy = False
                self._push(time + link.propagation, _LANE_PACKET, port, pkt.seq, "a", (pkt, dst, node))
                if link.fifo:
                    self._start_tx(node, port, link, time)
            elif kind == "a":
                pkt, dst, from_port = data
                trace_events.append(("arr", time, node, from_port, pkt.seq))
                tap = self.tap
                if tap is not None:
                    tap.transit(LOC_INGRESS, node, from_port, pkt, time, False, dst)
                self._route_and_forward(node, pkt, dst, time)
            else:  # control
                data(time)

        self.clock = until
        tap = self.tap
        if tap is not None and hasattr(tap, "finish"):
            tap.finish(until)
        # drain remaining controller work (window closes guard on horizon
        # themselves; transport deliveries past `until` still land)
        while heap:
            time, lane, node, seq, _cnt, kind, data = pop(heap)
            if kind == "c":
                data(time)
        emissions = []
        if tap is not None and hasattr(tap, "collected"):
            emissions = tap.collected()
        return SimResult(self.delivered, self.drops, emissions, until, self.trace)


def run(topo: Topology, routes: dict, traffic: TrafficSpec, probes_attached, until: SimTime) -> SimResult:
    """One-shot convenience: simulate ``traffic`` with optional standalone probes.

    ``probes_attached``: iterable of (AttachPoint, ProbeSpec) or
    (AttachPoint, ProbeSpec, install_time).
    """
    from .probes import ProbeLayer  # local import: probes builds on netsim types

    tap = ProbeLayer(topo) if probes_attached is not None else None
    engine = Engine(topo, routes, tap=tap)
    if probes_attached:
        for item in probes_attached:
            attach, spec, *rest = item
            at = rest[0] if rest else 0
            tap.install(attach, spec, at=at)
    return engine.run(traffic, until)


# -- randomized traffic ----------------------------------------------------


class SplitMix64:
    """Pinned PRNG so generated scenarios reproduce across implementations."""

    GAMMA = 0x9E3779B97F4A7C15
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB
    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self._MASK

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & self._MASK
        z = self.state
        z = ((z ^ (z >> 30)) * self.MIX1) & self._MASK
        z = ((z ^ (z >> 27)) * self.MIX2) & self._MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform-ish integer in [0, n); modulo bias is fine at desk scale."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def between(self, lo: int, hi: int) -> int:
        """Inclusive range [lo, hi]."""
        return lo + self.below(hi - lo + 1)

    def choice(self, seq):
        return seq[self.below(len(seq))]


@dataclass(frozen=True)
class TrafficGenSpec:
    """Parameters for reproducible random traffic between edge nodes."""

    ingress_nodes: tuple
    egress_nodes: tuple
    n_flows: int
    packets_per_flow: tuple  # (lo, hi)
    packet_size_bytes: tuple  # (lo, hi)
    start_window_us: tuple  # (lo, hi)
    gap_us: tuple  # (lo, hi)
    servers_per_node: int = 4
    proto_choices: tuple = (6, 17)

    def __post_init__(self):
        if self.n_flows < 1:
            raise ValueError("n_flows must be >= 1")
        if not self.ingress_nodes or not self.egress_nodes:
            raise ValueError("need ingress and egress candidates")


def generate_traffic(gen: TrafficGenSpec, seed: int) -> TrafficSpec:
    """Pseudorandom but reproducible flow set from the pinned PRNG."""
    rng = SplitMix64(seed)
    flows = []
    for i in range(gen.n_flows):
        ingress = rng.choice(gen.ingress_nodes)
        egress_pool = [n for n in gen.egress_nodes if n != ingress]
        if not egress_pool:
            raise ValueError("no egress candidate distinct from ingress")
        egress = rng.choice(egress_pool)
        key = FlowKey(
            src_addr=(ingress << 16) | (i & 0xFFFF),
            dst_addr=(egress << 16) | rng.below(gen.servers_per_node),
            src_port=rng.between(1024, 65535),
            dst_port=rng.between(1, 1023),
            proto=rng.choice(gen.proto_choices),
        )
        flows.append(
            FlowEntry(
                flow=key,
                ingress=ingress,
                egress=egress,
                packet_count=rng.between(*gen.packets_per_flow),
                packet_size_bytes=rng.between(*gen.packet_size_bytes),
                start=rng.between(*gen.start_window_us),
                inter_packet_gap=rng.between(*gen.gap_us),
            )
        )
    return TrafficSpec(tuple(flows), seed=seed)
