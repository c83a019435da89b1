"""Streaming map-reduce runtime embedded in the simulated data plane.

Mapper operators run on device local processors and fold probe emissions
into per-window buffers; at each window close the buffer is pushed (hash
shuffle on the key) to reducers living on non-mapper devices, followed by
one WindowClose barrier per reducer. A reducer finalizes a window exactly
once, when every mapper's barrier arrived, and emits one WindowedResult to
the controller. The controller tracks job lifecycles and schedules window
boundaries as control events on the simulation timeline.

Mapper-to-reducer and reducer-to-controller transport is reliable,
per-pair FIFO, with a constant configurable delay (default 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .core import NodeId, SimTime, WindowPolicy, partition_key, window_of
from .probes import (
    AttachPoint,
    CounterSnapshot,
    DropNotice,
    FilterMatch,
    ProbeEmission,
    ProbeSpec,
    Sample,
)
from .space_saving import SpaceSaving


class RuntimeError_(Exception):
    pass


class OverlappingRoles(RuntimeError_):
    pass


class UnknownNode(RuntimeError_):
    pass


class UnknownJob(RuntimeError_):
    pass


class ProtocolViolation(RuntimeError_):
    pass


# -- wire records ------------------------------------------------------------


@dataclass(frozen=True)
class IntermediateRecord:
    job_id: str
    window: int
    key: bytes
    value: object
    mapper: NodeId
    seq: int


@dataclass(frozen=True)
class WindowClose:
    job_id: str
    window: int
    mapper: NodeId


@dataclass(frozen=True)
class WindowedResult:
    job_id: str
    window: int
    entries: tuple  # (key bytes, reduced value), sorted by key, keys unique
    reducer: NodeId


@dataclass
class JobSpec:
    """Declarative analytics job."""

    job_id: str
    mapper_nodes: tuple
    reducer_nodes: tuple
    probe_plan: tuple  # (mapper NodeId, AttachPoint, ProbeSpec) triples
    map_operator: tuple  # (name, params dict)
    reduce_operator: tuple  # (name, params dict)
    window: WindowPolicy
    retention_windows: int = 0

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "mapper_nodes": list(self.mapper_nodes),
            "reducer_nodes": list(self.reducer_nodes),
            "probe_plan": [
                {"mapper": m, "attach": a.to_json(), "probe": p.to_json()}
                for m, a, p in self.probe_plan
            ],
            "map_operator": {"name": self.map_operator[0], "params": self.map_operator[1]},
            "reduce_operator": {
                "name": self.reduce_operator[0],
                "params": self.reduce_operator[1],
            },
            "window": self.window.to_json(),
            "retention_windows": self.retention_windows,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "JobSpec":
        return cls(
            job_id=obj["job_id"],
            mapper_nodes=tuple(obj["mapper_nodes"]),
            reducer_nodes=tuple(obj["reducer_nodes"]),
            probe_plan=tuple(
                (
                    entry["mapper"],
                    AttachPoint.from_json(entry["attach"]),
                    ProbeSpec.from_json(entry["probe"]),
                )
                for entry in obj["probe_plan"]
            ),
            map_operator=(obj["map_operator"]["name"], obj["map_operator"]["params"]),
            reduce_operator=(
                obj["reduce_operator"]["name"],
                obj["reduce_operator"]["params"],
            ),
            window=WindowPolicy.from_json(obj["window"]),
            retention_windows=obj.get("retention_windows", 0),
        )


def first_window_index(policy: WindowPolicy, start: SimTime) -> int:
    """Smallest window index whose close time lies after ``start``."""
    if start < policy.length:
        return 0
    return (start - policy.length) // policy.slide + 1


# -- key codecs shared by operators and result decoders ----------------------


def encode_addr_key(addr: int) -> bytes:
    return struct.pack(">I", addr)


def decode_addr_key(key: bytes) -> int:
    return struct.unpack(">I", key)[0]


def encode_pair_key(a: int, b: int) -> bytes:
    return struct.pack(">II", a, b)


def decode_pair_key(key: bytes) -> tuple:
    return struct.unpack(">II", key)


DROP_KEY_FLOW = b"f"
DROP_KEY_PORT = b"p"
DROP_KEY_PATH = b"l"


def _meta_lookup(metadata: tuple, tag: str):
    for t, v in metadata:
        if t == tag:
            return v
    return None


# -- map operators ------------------------------------------------------------


class MapOperator:
    """Per-mapper stream transform with per-window state."""

    uses_counters = False

    def new_state(self):
        raise NotImplementedError

    def on_emission(self, state, emission: ProbeEmission):
        pass

    def on_counter_snapshot(self, state, snapshot: CounterSnapshot):
        pass

    def finalize(self, state):
        """Yield (key bytes, value) contributions for a closing window."""
        raise NotImplementedError


class UniqueFlowCountMap(MapOperator):
    """Per-server first-occurrence flow sets; emits distinct-flow counts."""

    def __init__(self, params, node):
        del params, node

    def new_state(self):
        return {}

    def on_emission(self, state, emission):
        payload = emission.payload
        if isinstance(payload, FilterMatch):
            state.setdefault(payload.flow.dst_addr, set()).add(payload.flow)

    def finalize(self, state):
        for addr in sorted(state):
            yield encode_addr_key(addr), len(state[addr])


class TrafficMatrixCellMap(MapOperator):
    """Ingress-labeled egress counters, plus per-packet latency extremes."""

    uses_counters = True

    def __init__(self, params, node):
        self.node = node
        self.label_tag = params["label_tag"]
        self.ts_tag = params.get("ts_tag")

    def new_state(self):
        return {}

    def on_counter_snapshot(self, state, snapshot):
        for group, (pkts, nbytes) in snapshot.groups.items():
            label = group[0]
            if label is None:
                continue  # transit without an ingress label: not edge-to-edge
            cell = state.setdefault((label, self.node), [0, 0, None, None])
            cell[0] += pkts
            cell[1] += nbytes

    def on_emission(self, state, emission):
        payload = emission.payload
        if self.ts_tag is None or not isinstance(payload, Sample):
            return
        view = payload.packet
        label = _meta_lookup(view.metadata, self.label_tag)
        stamp = _meta_lookup(view.metadata, self.ts_tag)
        if label is None or stamp is None:
            return
        latency = view.time - stamp
        cell = state.setdefault((label, self.node), [0, 0, None, None])
        if cell[2] is None or latency < cell[2]:
            cell[2] = latency
        if cell[3] is None or latency > cell[3]:
            cell[3] = latency

    def finalize(self, state):
        for (src, dst) in sorted(state):
            yield encode_pair_key(src, dst), tuple(state[(src, dst)])


class DropStatsMap(MapOperator):
    """Per-window drop tallies keyed by flow, by (node, port), and by
    (ingress label, destination edge) path."""

    def __init__(self, params, node):
        self.node = node
        self.label_tag = params["label_tag"]

    def new_state(self):
        return {}

    def on_emission(self, state, emission):
        payload = emission.payload
        if not isinstance(payload, DropNotice):
            return
        fkey = DROP_KEY_FLOW + payload.flow.to_bytes()
        state[fkey] = state.get(fkey, 0) + 1
        pkey = DROP_KEY_PORT + encode_pair_key(self.node, payload.port)
        state[pkey] = state.get(pkey, 0) + 1
        label = _meta_lookup(payload.metadata, self.label_tag)
        if label is not None:
            lkey = DROP_KEY_PATH + encode_pair_key(label, payload.dst_node)
            state[lkey] = state.get(lkey, 0) + 1

    def finalize(self, state):
        for key in sorted(state):
            yield key, state[key]


class TopNCandidatesMap(MapOperator):
    """Space-Saving candidate sets over sampled packets."""

    def __init__(self, params, node):
        del node
        self.k_counters = int(params["k_counters"])

    def new_state(self):
        return SpaceSaving(self.k_counters)

    def on_emission(self, state, emission):
        payload = emission.payload
        if isinstance(payload, Sample):
            state.update(payload.packet.flow, payload.packet.size_bytes)

    def finalize(self, state):
        for flow, (count, error, nbytes) in sorted(state.candidates().items()):
            yield flow.to_bytes(), (count, error, nbytes)


MAP_OPERATORS = {
    "unique_flow_count": UniqueFlowCountMap,
    "traffic_matrix_cell": TrafficMatrixCellMap,
    "drop_stats": DropStatsMap,
    "topn_rank": TopNCandidatesMap,
}


# -- reduce operators ----------------------------------------------------------


class ReduceOperator:
    def fold(self, acc, value):
        raise NotImplementedError

    def finish(self, entries: dict):
        """Final (key, value) list, sorted by key, after any finisher step."""
        return sorted(entries.items())


class SumReduce(ReduceOperator):
    """Integer sum per key; optional alarm finisher keeps sums strictly
    above the threshold."""

    def __init__(self, params):
        self.alarm_threshold = params.get("alarm_threshold")

    def fold(self, acc, value):
        return value if acc is None else acc + value

    def finish(self, entries):
        items = sorted(entries.items())
        if self.alarm_threshold is None:
            return items
        return [(k, v) for k, v in items if v > self.alarm_threshold]


class LatencyMinMaxReduce(ReduceOperator):
    """Component-wise merge of (packets, bytes, min latency, max latency)."""

    def __init__(self, params):
        del params

    def fold(self, acc, value):
        if acc is None:
            return tuple(value)
        p1, b1, lo1, hi1 = acc
        p2, b2, lo2, hi2 = value
        lo = lo1 if lo2 is None else lo2 if lo1 is None else min(lo1, lo2)
        hi = hi1 if hi2 is None else hi2 if hi1 is None else max(hi1, hi2)
        return (p1 + p2, b1 + b2, lo, hi)


class DropStatsReduce(ReduceOperator):
    """Sums drop tallies; finisher keeps the top_k of each key category."""

    def __init__(self, params):
        self.top_k = int(params["top_k"])

    def fold(self, acc, value):
        return value if acc is None else acc + value

    def finish(self, entries):
        keep = []
        for prefix in (DROP_KEY_FLOW, DROP_KEY_PORT, DROP_KEY_PATH):
            bucket = [(k, v) for k, v in entries.items() if k[:1] == prefix]
            bucket.sort(key=lambda kv: (-kv[1], kv[0]))
            keep.extend(bucket[: self.top_k])
        keep.sort(key=lambda kv: kv[0])
        return keep


class TopNRankReduce(ReduceOperator):
    """Merges per-mapper estimates, then ranks to the global top n."""

    def __init__(self, params):
        self.n = int(params["n"])

    def fold(self, acc, value):
        if acc is None:
            return tuple(value)
        return (acc[0] + value[0], acc[1] + value[1], acc[2] + value[2])

    def finish(self, entries):
        ranked = sorted(entries.items(), key=lambda kv: (-kv[1][0], kv[0]))
        keep = ranked[: self.n]
        keep.sort(key=lambda kv: kv[0])
        return keep


REDUCE_OPERATORS = {
    "sum": SumReduce,
    "latency_minmax": LatencyMinMaxReduce,
    "drop_stats": DropStatsReduce,
    "topn_rank": TopNRankReduce,
}


def make_map_operator(name: str, params: dict, node: NodeId) -> MapOperator:
    try:
        return MAP_OPERATORS[name](params, node)
    except KeyError:
        raise ValueError(f"unknown map operator {name!r}") from None


def make_reduce_operator(name: str, params: dict) -> ReduceOperator:
    try:
        return REDUCE_OPERATORS[name](params)
    except KeyError:
        raise ValueError(f"unknown reduce operator {name!r}") from None


# -- mapper / reducer actors ---------------------------------------------------


class MapperInstance:
    """Local-processor half of a mapper for one job."""

    def __init__(self, job_id, node, operator, policy, n_reducers, retention,
                 send_record, send_close, start: SimTime = 0):
        self.job_id = job_id
        self.node = node
        self.operator = operator
        self.policy = policy
        self.n_reducers = n_reducers
        self.retention = retention
        self.send_record = send_record
        self.send_close = send_close
        self.start = start
        self.first_window = first_window_index(policy, start)
        self.next_close = self.first_window
        self.windows = {}
        self.cache = {}
        self.seq = 0

    def ingest(self, emission: ProbeEmission):
        if emission.time < self.start:
            return
        op = self.operator
        for idx in window_of(emission.time, self.policy):
            if idx < self.first_window:
                continue
            state = self.windows.get(idx)
            if state is None:
                state = op.new_state()
                self.windows[idx] = state
            op.on_emission(state, emission)

    def ingest_snapshot(self, idx: int, snapshot: CounterSnapshot):
        state = self.windows.get(idx)
        if state is None:
            state = self.operator.new_state()
            self.windows[idx] = state
        self.operator.on_counter_snapshot(state, snapshot)

    def flush(self, idx: int, now: SimTime):
        """Push window ``idx`` then its barrier; cache per retention policy."""
        state = self.windows.pop(idx, None)
        entries = list(self.operator.finalize(state)) if state is not None else []
        entries.sort(key=lambda kv: kv[0])
        for key, value in entries:
            rec = IntermediateRecord(self.job_id, idx, key, value, self.node, self.seq)
            self.seq += 1
            self.send_record(rec, now)
        self.send_close(WindowClose(self.job_id, idx, self.node), now)
        self.next_close = idx + 1
        if self.retention > 0:
            self.cache[idx] = dict(entries)
            while len(self.cache) > self.retention:
                del self.cache[min(self.cache)]

    def cached_window(self, idx: int):
        return self.cache.get(idx)


class ReducerInstance:
    """Windowed reducer for one job on one off-duty device."""

    def __init__(self, job_id, node, operator, mapper_nodes, emit_result):
        self.job_id = job_id
        self.node = node
        self.operator = operator
        self.mapper_nodes = frozenset(mapper_nodes)
        self.emit_result = emit_result
        self.windows = {}
        self.closes = {}
        self.finalized = set()

    def ingest_record(self, rec: IntermediateRecord, now: SimTime):
        if rec.window in self.finalized:
            raise ProtocolViolation(
                f"record for finalized window {rec.window} of job {rec.job_id}"
            )
        buf = self.windows.setdefault(rec.window, {})
        buf[rec.key] = self.operator.fold(buf.get(rec.key), rec.value)

    def ingest_close(self, close: WindowClose, now: SimTime):
        if close.window in self.finalized:
            raise ProtocolViolation(
                f"duplicate WindowClose for finalized window {close.window}"
            )
        seen = self.closes.setdefault(close.window, set())
        if close.mapper in seen:
            raise ProtocolViolation(
                f"duplicate WindowClose from mapper {close.mapper} for window {close.window}"
            )
        seen.add(close.mapper)
        if seen == self.mapper_nodes:
            entries = self.operator.finish(self.windows.pop(close.window, {}))
            del self.closes[close.window]
            self.finalized.add(close.window)
            result = WindowedResult(self.job_id, close.window, tuple(entries), self.node)
            self.emit_result(result, now)


# -- controller / job tracker ---------------------------------------------------


@dataclass
class JobHandle:
    job_id: str
    spec: JobSpec
    mappers: dict = field(default_factory=dict)
    reducers: dict = field(default_factory=dict)
    probe_ids: tuple = ()
    counter_probes: tuple = ()  # (mapper NodeId, probe id) in plan order
    results: list = field(default_factory=list)  # (emit_time, deliver_time, result)
    cancelled: bool = False
    start: SimTime = 0


class Controller:
    """Job tracker: deploys JobSpecs on the data plane, drives window
    boundaries, and collects results pushed by reducers."""

    def __init__(self, engine, layer, transport_delay: SimTime = 0):
        self.engine = engine
        self.layer = layer
        self.transport_delay = transport_delay
        self._jobs: dict = {}

    # lifecycle ---------------------------------------------------------------

    def submit_job(self, spec: JobSpec, at: SimTime = 0) -> JobHandle:
        if not spec.mapper_nodes:
            raise ValueError("job needs at least one mapper")
        if not spec.reducer_nodes:
            raise ValueError("job needs at least one reducer")
        overlap = set(spec.mapper_nodes) & set(spec.reducer_nodes)
        if overlap:
            raise OverlappingRoles(f"nodes {sorted(overlap)} are both mapper and reducer")
        known = self.engine.topo.roles
        for node in (*spec.mapper_nodes, *spec.reducer_nodes):
            if node not in known:
                raise UnknownNode(f"node {node}")
        if spec.job_id in self._jobs:
            raise ValueError(f"job id {spec.job_id!r} already submitted")

        uses_counters = any(p.kind == "Counter" for _m, _a, p in spec.probe_plan)
        if uses_counters and spec.window.kind != "jump":
            raise ValueError("counter-backed jobs require jump windows")

        handle = JobHandle(spec.job_id, spec, start=at)
        self._jobs[spec.job_id] = handle

        map_name, map_params = spec.map_operator
        reduce_name, reduce_params = spec.reduce_operator
        for node in spec.reducer_nodes:
            handle.reducers[node] = ReducerInstance(
                spec.job_id,
                node,
                make_reduce_operator(reduce_name, reduce_params),
                spec.mapper_nodes,
                self._result_sink(handle, node),
            )
        n_red = len(spec.reducer_nodes)
        for node in spec.mapper_nodes:
            handle.mappers[node] = MapperInstance(
                spec.job_id,
                node,
                make_map_operator(map_name, map_params, node),
                spec.window,
                n_red,
                spec.retention_windows,
                self._record_sink(handle),
                self._close_sink(handle),
                start=at,
            )

        probe_ids = []
        counter_probes = []
        for mapper_node, attach, probe_spec in spec.probe_plan:
            if mapper_node not in handle.mappers:
                raise UnknownNode(f"probe plan references non-mapper {mapper_node}")
            sink = handle.mappers[mapper_node].ingest
            pid = self.layer.install(attach, probe_spec, at=at, sink=sink)
            probe_ids.append(pid)
            if probe_spec.kind == "Counter":
                counter_probes.append((mapper_node, pid))
        handle.probe_ids = tuple(probe_ids)
        handle.counter_probes = tuple(counter_probes)

        first = first_window_index(spec.window, at)
        self.engine.schedule_control(spec.window.close_time(first), self._boundary_fn(handle, first))
        return handle

    def cancel_job(self, handle: JobHandle, at: SimTime):
        if handle.job_id not in self._jobs:
            raise UnknownJob(handle.job_id)
        del self._jobs[handle.job_id]

        def teardown(_t, h=handle):
            h.cancelled = True
            for pid in h.probe_ids:
                self.layer.remove(pid, at)

        self.engine.schedule_control(at, teardown)

    def collect_results(self, handle: JobHandle) -> list:
        """Finalized WindowedResults in (window index, reducer id) order."""
        ordered = sorted(handle.results, key=lambda r: (r[2].window, r[2].reducer))
        return [r[2] for r in ordered]

    def query_cache(self, node: NodeId, handle: JobHandle, window: int):
        """Retained mapper buffer for ``window``, or None beyond retention."""
        mapper = handle.mappers.get(node)
        if mapper is None:
            raise UnknownNode(f"node {node} is not a mapper of job {handle.job_id}")
        return mapper.cached_window(window)

    # internals -----------------------------------------------------------------

    def _boundary_fn(self, handle: JobHandle, idx: int):
        def fire(t):
            if handle.cancelled:
                return
            horizon = self.engine.horizon
            if horizon is not None and t > horizon:
                return
            for mapper_node, pid in handle.counter_probes:
                snapshot = self.layer.read_and_reset(pid, t)
                handle.mappers[mapper_node].ingest_snapshot(idx, snapshot)
            for node in handle.spec.mapper_nodes:
                handle.mappers[node].flush(idx, t)
            nxt = idx + 1
            close = handle.spec.window.close_time(nxt)
            if horizon is None or close <= horizon:
                self.engine.schedule_control(close, self._boundary_fn(handle, nxt))

        return fire

    def _record_sink(self, handle: JobHandle):
        def send(rec: IntermediateRecord, now: SimTime):
            node = handle.spec.reducer_nodes[partition_key(rec.key, len(handle.spec.reducer_nodes))]
            inst = handle.reducers[node]

            def deliver(t, inst=inst, rec=rec):
                if not handle.cancelled:
                    inst.ingest_record(rec, t)

            self.engine.schedule_control(now + self.transport_delay, deliver, after_packets=True)

        return send

    def _close_sink(self, handle: JobHandle):
        def send(close: WindowClose, now: SimTime):
            for node in handle.spec.reducer_nodes:
                inst = handle.reducers[node]

                def deliver(t, inst=inst, close=close):
                    if not handle.cancelled:
                        inst.ingest_close(close, t)

                self.engine.schedule_control(now + self.transport_delay, deliver, after_packets=True)

        return send

    def _result_sink(self, handle: JobHandle, reducer_node: NodeId):
        def emit(result: WindowedResult, emit_time: SimTime):
            def deliver(t, result=result, emit_time=emit_time):
                if not handle.cancelled:
                    handle.results.append((emit_time, t, result))

            self.engine.schedule_control(emit_time + self.transport_delay, deliver, after_packets=True)

        return emit
