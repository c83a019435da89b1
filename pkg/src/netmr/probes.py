"""Runtime-installable data-path probes.

The simulated forwarding chip: counters, meters, filters, samplers,
per-flow finite state machines, label/timestamp actions, and drop
notifiers. Probes attach to ingress ports, egress ports, queues, or the
flow table of a node; they may be installed or removed mid-run at an exact
instant and never perturb forwarding (label/timestamp actions only append
in-band metadata).

Visibility rules, pinned for exact replay:

- ingress/egress/flow-table probes see every packet transiting the point;
- queue probes see accepted enqueues, except DropNotify which fires only
  for packets dropped at that queue;
- multiple probes at one attach point run in installation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import FlowKey, NodeId, Packet, SimTime, fnv1a64
from .netsim import HOST_PORT, LOC_EGRESS, LOC_FLOW_TABLE, LOC_INGRESS, LOC_QUEUE, Topology

PROBE_KINDS = (
    "Counter",
    "Meter",
    "Filter",
    "Sampler",
    "Fsm",
    "Label",
    "Timestamp",
    "DropNotify",
)

_PACKET_FIELDS = ("src_addr", "dst_addr", "src_port", "dst_port", "proto")
_OPS = ("eq", "ne", "lt", "le", "gt", "ge", "in")


class ProbeError(Exception):
    pass


class InvalidAttachPoint(ProbeError):
    pass


class UnknownProbe(ProbeError):
    pass


class WrongProbeKind(ProbeError):
    pass


@dataclass(frozen=True)
class AttachPoint:
    """Where a probe sits: a node plus one of its data-path locations.

    ``port`` is the neighbor NodeId for link-facing locations, or
    ``HOST_PORT`` for the node's local/host side; flow-table attach points
    take no port.
    """

    node: NodeId
    location: str  # LOC_INGRESS | LOC_EGRESS | LOC_QUEUE | LOC_FLOW_TABLE
    port: NodeId | None = None

    def to_json(self) -> dict:
        return {"node": self.node, "location": self.location, "port": self.port}

    @classmethod
    def from_json(cls, obj: dict) -> "AttachPoint":
        return cls(obj["node"], obj["location"], obj.get("port"))


@dataclass(frozen=True)
class FsmSpec:
    """Deterministic per-flow state machine.

    ``transitions`` is a tuple of (state, predicate clauses, next_state);
    the first matching transition from the current state applies, and a
    packet matching none self-loops. Entering a state in ``accepting`` via
    an explicit transition emits an event.
    """

    initial: str
    transitions: tuple
    accepting: frozenset

    def to_json(self) -> dict:
        return {
            "initial": self.initial,
            "transitions": [
                {"state": s, "predicate": [list(c) for c in p], "next": n}
                for s, p, n in self.transitions
            ],
            "accepting": sorted(self.accepting),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FsmSpec":
        return cls(
            obj["initial"],
            tuple(
                (t["state"], _freeze_predicate(t["predicate"]), t["next"])
                for t in obj["transitions"]
            ),
            frozenset(obj["accepting"]),
        )


def _freeze_predicate(clauses):
    out = []
    for c in clauses:
        fld, op, value = c
        if op == "in":
            value = tuple(value)
        out.append((fld, op, value))
    return tuple(out)


@dataclass(frozen=True)
class ProbeSpec:
    """Declarative probe description; kind-specific fields left None otherwise.

    predicate: conjunction of (field, op, value) clauses over the 5-tuple,
    ctrl_flags, size_bytes, ``meta:<tag>`` values, or ``flow_hash_mod:<m>``
    (FNV-1a of the flow key mod m, for flow-space slicing).
    """

    kind: str
    predicate: tuple = ()
    group_by: tuple | None = None  # Counter: projection fields
    threshold_bps: int | None = None  # Meter
    meter_window_us: SimTime | None = None  # Meter: jump window length
    every_n: int | None = None  # Sampler
    fsm: FsmSpec | None = None
    tag: str | None = None  # Label / Timestamp

    def __post_init__(self):
        if self.kind not in PROBE_KINDS:
            raise ValueError(f"unknown probe kind {self.kind!r}")
        object.__setattr__(self, "predicate", _freeze_predicate(self.predicate))
        for fld, op, _v in self.predicate:
            if op not in _OPS:
                raise ValueError(f"unknown predicate op {op!r}")
            if (
                fld not in _PACKET_FIELDS
                and fld not in ("ctrl_flags", "size_bytes")
                and not fld.startswith("meta:")
                and not fld.startswith("flow_hash_mod:")
            ):
                raise ValueError(f"unknown predicate field {fld!r}")
        if self.kind == "Counter":
            if not self.group_by:
                raise ValueError("Counter needs a group_by projection")
            object.__setattr__(self, "group_by", tuple(self.group_by))
        if self.kind == "Meter" and (
            not self.threshold_bps or not self.meter_window_us
        ):
            raise ValueError("Meter needs threshold_bps and meter_window_us")
        if self.kind == "Sampler" and (self.every_n is None or self.every_n < 1):
            raise ValueError("Sampler needs every_n >= 1")
        if self.kind == "Fsm" and self.fsm is None:
            raise ValueError("Fsm probe needs an FsmSpec")
        if self.kind in ("Label", "Timestamp") and not self.tag:
            raise ValueError(f"{self.kind} probe needs a tag")

    def to_json(self) -> dict:
        obj = {"kind": self.kind, "predicate": [list(c) for c in self.predicate]}
        if self.group_by is not None:
            obj["group_by"] = list(self.group_by)
        if self.threshold_bps is not None:
            obj["threshold_bps"] = self.threshold_bps
        if self.meter_window_us is not None:
            obj["meter_window_us"] = self.meter_window_us
        if self.every_n is not None:
            obj["every_n"] = self.every_n
        if self.fsm is not None:
            obj["fsm"] = self.fsm.to_json()
        if self.tag is not None:
            obj["tag"] = self.tag
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ProbeSpec":
        return cls(
            kind=obj["kind"],
            predicate=_freeze_predicate(obj.get("predicate", ())),
            group_by=tuple(obj["group_by"]) if "group_by" in obj else None,
            threshold_bps=obj.get("threshold_bps"),
            meter_window_us=obj.get("meter_window_us"),
            every_n=obj.get("every_n"),
            fsm=FsmSpec.from_json(obj["fsm"]) if "fsm" in obj else None,
            tag=obj.get("tag"),
        )


# -- emissions ---------------------------------------------------------------


@dataclass(frozen=True)
class PacketView:
    """Immutable packet summary handed to local processors."""

    seq: int
    flow: FlowKey
    size_bytes: int
    time: SimTime
    metadata: tuple
    ctrl_flags: int


@dataclass(frozen=True)
class CounterSnapshot:
    groups: dict  # group key tuple -> (packets, bytes)


@dataclass(frozen=True)
class MeterExceeded:
    rate_bps: int
    window_start: SimTime


@dataclass(frozen=True)
class FilterMatch:
    flow: FlowKey


@dataclass(frozen=True)
class Sample:
    packet: PacketView


@dataclass(frozen=True)
class FsmEvent:
    flow: FlowKey
    state: str


@dataclass(frozen=True)
class DropNotice:
    """Drop report from the chip: the flow, the congested port, plus the
    routing context (destination edge) and in-band metadata of the dropped
    packet, so local processors can attribute paths."""

    flow: FlowKey
    port: NodeId
    dst_node: NodeId
    metadata: tuple


@dataclass(frozen=True)
class ProbeEmission:
    probe: int
    time: SimTime
    payload: object


# -- predicate compilation ---------------------------------------------------

_flow_hash_cache: dict = {}


def _flow_hash(flow: FlowKey) -> int:
    h = _flow_hash_cache.get(flow)
    if h is None:
        h = fnv1a64(flow.to_bytes())
        _flow_hash_cache[flow] = h
    return h


def _accessor(fld: str):
    if fld in _PACKET_FIELDS:
        return lambda pkt, f=fld: getattr(pkt.flow, f)
    if fld == "ctrl_flags":
        return lambda pkt: pkt.ctrl_flags
    if fld == "size_bytes":
        return lambda pkt: pkt.size_bytes
    if fld.startswith("meta:"):
        tag = fld[5:]
        return lambda pkt: pkt.meta(tag)
    if fld.startswith("flow_hash_mod:"):
        m = int(fld.split(":", 1)[1])
        if m < 1:
            raise ValueError("flow_hash_mod modulus must be >= 1")
        return lambda pkt: _flow_hash(pkt.flow) % m
    raise ValueError(f"unknown predicate field {fld!r}")


def compile_predicate(clauses):
    """Build a packet -> bool closure; empty conjunction matches everything."""
    if not clauses:
        return None
    tests = []
    for fld, op, value in clauses:
        get = _accessor(fld)
        if op == "in":
            members = frozenset(value)
            tests.append(lambda pkt, g=get, m=members: g(pkt) in m)
        elif op == "eq":
            tests.append(lambda pkt, g=get, v=value: g(pkt) == v)
        elif op == "ne":
            tests.append(lambda pkt, g=get, v=value: g(pkt) != v)
        else:
            cmp = {
                "lt": lambda a, b: a is not None and a < b,
                "le": lambda a, b: a is not None and a <= b,
                "gt": lambda a, b: a is not None and a > b,
                "ge": lambda a, b: a is not None and a >= b,
            }[op]
            tests.append(lambda pkt, g=get, v=value, c=cmp: c(g(pkt), v))
    if len(tests) == 1:
        return tests[0]

    def conj(pkt, _tests=tuple(tests)):
        for t in _tests:
            if not t(pkt):
                return False
        return True

    return conj


def _compile_fsm(spec: FsmSpec):
    table: dict = {}
    for state, clauses, nxt in spec.transitions:
        table.setdefault(state, []).append((compile_predicate(clauses), nxt))
    return table


def fsm_step(spec: FsmSpec, state: str, packet: Packet):
    """Apply one packet to a per-flow FSM state.

    Returns (new_state, FsmEvent | None); the event fires when an explicit
    transition lands on an accepting state.
    """
    for pred, nxt in _compile_fsm(spec).get(state, ()):
        if pred is None or pred(packet):
            event = FsmEvent(packet.flow, nxt) if nxt in spec.accepting else None
            return nxt, event
    return state, None


# -- the probe layer ---------------------------------------------------------

_NEVER = 1 << 62


def _group_accessor(fld: str):
    if fld == "flow":
        return lambda pkt: pkt.flow
    return _accessor(fld)


class _Probe:
    __slots__ = (
        "probe_id",
        "spec",
        "attach",
        "pred",
        "install_at",
        "remove_at",
        "removed",
        "sink",
        "counter_groups",
        "group_getters",
        "sample_count",
        "meter_index",
        "meter_bytes",
        "fsm_table",
        "fsm_states",
    )

    def __init__(self, probe_id, attach, spec, install_at, sink):
        self.probe_id = probe_id
        self.spec = spec
        self.attach = attach
        self.pred = compile_predicate(spec.predicate)
        self.install_at = install_at
        self.remove_at = _NEVER
        self.removed = False
        self.sink = sink
        if spec.kind == "Counter":
            self.counter_groups = {}
            self.group_getters = tuple(_group_accessor(f) for f in spec.group_by)
        else:
            self.counter_groups = None
            self.group_getters = None
        self.sample_count = 0
        self.meter_index = None
        self.meter_bytes = 0
        if spec.kind == "Fsm":
            self.fsm_table = _compile_fsm(spec.fsm)
            self.fsm_states = {}
        else:
            self.fsm_table = None
            self.fsm_states = None


class ProbeLayer:
    """All probes installed on one simulated data plane.

    Acts as the engine tap. Emissions from probes owned by a job (those
    installed with a ``sink``) are pushed to that sink immediately; the
    rest accumulate for :meth:`collected`.
    """

    def __init__(self, topo: Topology):
        self._topo = topo
        self._probes: dict = {}
        self._index: dict = {}  # (node, location, port) -> list of _Probe
        self._global: list = []
        self._next_id = 1

    def install(self, attach: AttachPoint, spec: ProbeSpec, at: SimTime = 0, sink=None) -> int:
        """Activate a probe at ``attach`` from instant ``at`` onward."""
        self._validate_attach(attach)
        probe = _Probe(self._next_id, attach, spec, at, sink)
        self._next_id += 1
        self._probes[probe.probe_id] = probe
        key = (attach.node, attach.location, attach.port)
        self._index.setdefault(key, []).append(probe)
        return probe.probe_id

    def remove(self, probe_id: int, at: SimTime):
        """Silence a probe from instant ``at`` onward; its state stays readable."""
        probe = self._probes.get(probe_id)
        if probe is None or probe.removed:
            raise UnknownProbe(f"probe {probe_id}")
        probe.removed = True
        probe.remove_at = at

    def _validate_attach(self, attach: AttachPoint):
        topo = self._topo
        if attach.node not in topo.roles:
            raise InvalidAttachPoint(f"unknown node {attach.node}")
        if attach.location == LOC_FLOW_TABLE:
            if attach.port is not None:
                raise InvalidAttachPoint("flow-table attach takes no port")
            return
        if attach.location not in (LOC_INGRESS, LOC_EGRESS, LOC_QUEUE):
            raise InvalidAttachPoint(f"unknown location {attach.location!r}")
        if attach.port == HOST_PORT:
            if attach.location == LOC_QUEUE:
                raise InvalidAttachPoint("host side has no queue")
            return
        if attach.port not in topo.adjacency[attach.node]:
            raise InvalidAttachPoint(
                f"node {attach.node} has no link to port {attach.port}"
            )

    # engine tap interface ---------------------------------------------------

    def transit(self, location, node, port, pkt, t, dropped, dst_node):
        probes = self._index.get((node, location, port))
        if not probes:
            return
        for probe in probes:
            if not probe.install_at <= t < probe.remove_at:
                continue
            kind = probe.spec.kind
            if dropped != (kind == "DropNotify"):
                continue
            pred = probe.pred
            if pred is not None and not pred(pkt):
                continue
            self._fire(probe, kind, node, pkt, t, port, dst_node)

    def _fire(self, probe, kind, node, pkt, t, port, dst_node):
        if kind == "Counter":
            key = tuple(get(pkt) for get in probe.group_getters)
            cell = probe.counter_groups.get(key)
            if cell is None:
                probe.counter_groups[key] = [1, pkt.size_bytes]
            else:
                cell[0] += 1
                cell[1] += pkt.size_bytes
        elif kind == "Label":
            pkt.metadata.append((probe.spec.tag, node))
        elif kind == "Timestamp":
            pkt.metadata.append((probe.spec.tag, t))
        elif kind == "Filter":
            self._emit(probe, t, FilterMatch(pkt.flow))
        elif kind == "Sampler":
            probe.sample_count += 1
            if probe.sample_count % probe.spec.every_n == 0:
                view = PacketView(
                    pkt.seq, pkt.flow, pkt.size_bytes, t, tuple(pkt.metadata), pkt.ctrl_flags
                )
                self._emit(probe, t, Sample(view))
        elif kind == "Meter":
            self._meter_advance(probe, t // probe.spec.meter_window_us)
            probe.meter_bytes += pkt.size_bytes
        elif kind == "Fsm":
            state = probe.fsm_states.get(pkt.flow, probe.spec.fsm.initial)
            for pred, nxt in probe.fsm_table.get(state, ()):
                if pred is None or pred(pkt):
                    probe.fsm_states[pkt.flow] = nxt
                    if nxt in probe.spec.fsm.accepting:
                        self._emit(probe, t, FsmEvent(pkt.flow, nxt))
                    break
        elif kind == "DropNotify":
            self._emit(probe, t, DropNotice(pkt.flow, port, dst_node, tuple(pkt.metadata)))

    def _emit(self, probe, t, payload):
        emission = ProbeEmission(probe.probe_id, t, payload)
        if probe.sink is not None:
            probe.sink(emission)
        else:
            self._global.append(emission)

    def _meter_advance(self, probe, index):
        if probe.meter_index is None:
            probe.meter_index = index
            return
        if index > probe.meter_index:
            self._meter_flush(probe)
            probe.meter_index = index

    def _meter_flush(self, probe):
        spec = probe.spec
        w = spec.meter_window_us
        if probe.meter_bytes * 8_000_000 > spec.threshold_bps * w:
            rate = probe.meter_bytes * 8_000_000 // w
            start = probe.meter_index * w
            self._emit(probe, start + w, MeterExceeded(rate, start))
        probe.meter_bytes = 0

    def finish(self, clock: SimTime):
        """Flush meters whose current window completed by ``clock``."""
        for probe in self._probes.values():
            if probe.spec.kind == "Meter" and probe.meter_index is not None:
                end = (probe.meter_index + 1) * probe.spec.meter_window_us
                if end <= min(clock, probe.remove_at):
                    self._meter_flush(probe)
                    probe.meter_index = None

    def collected(self) -> list:
        """Emissions from unowned probes, ordered by (time, probe, arrival)."""
        return sorted(
            self._global, key=lambda e: (e.time, e.probe)
        )

    # local-processor interface ------------------------------------------------

    def read_and_reset(self, probe_id: int, at: SimTime) -> CounterSnapshot:
        """Snapshot and zero a Counter atomically on the simulated timeline."""
        probe = self._probes.get(probe_id)
        if probe is None:
            raise UnknownProbe(f"probe {probe_id}")
        if probe.spec.kind != "Counter":
            raise WrongProbeKind(f"probe {probe_id} is a {probe.spec.kind}")
        snapshot = CounterSnapshot(
            {key: (cell[0], cell[1]) for key, cell in probe.counter_groups.items()}
        )
        probe.counter_groups.clear()
        return snapshot
