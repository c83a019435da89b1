"""The four bundled analytics applications, as job builders plus typed
result decoders.

- connection-flood detection: portal (edge) switches count distinct flows
  per monitored server per window; alarms fire strictly above a threshold.
- traffic matrix: edge routers label/timestamp ingress packets and keep
  ingress-labeled egress counters; optional per-pair latency extremes.
- congestion monitor: drop notifiers on every queue feed per-flow,
  per-port, and per-path drop tallies, reported as ranked top-k lists.
- top-n flows: mappers run Space-Saving candidate sets, reducers merge and
  rank; optional flow-space partition assigns each mapper a disjoint hash
  slice (only sound when every mapper sees the whole stream, e.g. mappers
  on every forwarding path).
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import FlowKey, NodeId, SimTime, WindowPolicy
from .netsim import HOST_PORT, LOC_EGRESS, LOC_FLOW_TABLE, LOC_INGRESS, LOC_QUEUE, Topology
from .probes import AttachPoint, ProbeSpec
from .runtime import (
    DROP_KEY_FLOW,
    DROP_KEY_PATH,
    DROP_KEY_PORT,
    JobSpec,
    decode_addr_key,
    decode_pair_key,
)


class AppError(Exception):
    pass


class InsufficientNodes(AppError):
    pass


class InvalidPartition(AppError):
    pass


_ROLE_PREFERENCE = {"server-facing": 0, "core": 1, "edge": 2}


def _pick_reducers(topo: Topology, exclude, count: int) -> tuple:
    pool = [n for n in topo.nodes() if n not in exclude]
    if not pool:
        raise InsufficientNodes("no free nodes left to run reducers")
    pool.sort(key=lambda n: (_ROLE_PREFERENCE[topo.roles[n]], n))
    return tuple(pool[: max(1, min(count, len(pool)))])


# -- connection-flood (DDoS) detection ----------------------------------------


@dataclass(frozen=True)
class DdosParams:
    server_pool: frozenset  # monitored 32-bit server addresses
    threshold: int  # alarm when distinct flows per window strictly exceed this
    window: WindowPolicy

    def __post_init__(self):
        if not self.server_pool:
            raise ValueError("server pool must be non-empty")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")


def build_ddos_job(params: DdosParams, topo: Topology, job_id: str = "ddos",
                   n_reducers: int = 2) -> JobSpec:
    mappers = tuple(topo.edge_nodes())
    if not mappers:
        raise InsufficientNodes("need at least one edge node as mapper")
    reducers = _pick_reducers(topo, set(mappers), n_reducers)
    pool_pred = (("dst_addr", "in", tuple(sorted(params.server_pool))),)
    plan = tuple(
        (m, AttachPoint(m, LOC_INGRESS, HOST_PORT), ProbeSpec("Filter", predicate=pool_pred))
        for m in mappers
    )
    return JobSpec(
        job_id=job_id,
        mapper_nodes=mappers,
        reducer_nodes=reducers,
        probe_plan=plan,
        map_operator=("unique_flow_count", {}),
        reduce_operator=("sum", {"alarm_threshold": params.threshold}),
        window=params.window,
    )


def decode_ddos_results(results) -> dict:
    """window index -> tuple of (server address, distinct flow count) alarms."""
    out: dict = {}
    for res in results:
        alarms = out.setdefault(res.window, [])
        for key, count in res.entries:
            alarms.append((decode_addr_key(key), count))
    return {w: tuple(sorted(alarms)) for w, alarms in out.items()}


# -- traffic matrix -------------------------------------------------------------


@dataclass(frozen=True)
class TrafficMatrixCell:
    src: NodeId
    dst: NodeId
    packets: int
    bytes: int
    min_latency: SimTime | None = None
    max_latency: SimTime | None = None

    def __post_init__(self):
        if self.packets < 0:
            raise ValueError("negative packet count")
        if (
            self.min_latency is not None
            and self.max_latency is not None
            and self.min_latency > self.max_latency
        ):
            raise ValueError("min latency above max")

    def to_json(self) -> dict:
        obj = {"src": self.src, "dst": self.dst, "packets": self.packets, "bytes": self.bytes}
        if self.min_latency is not None:
            obj["min_latency_us"] = self.min_latency
            obj["max_latency_us"] = self.max_latency
        return obj


def tm_label_tag(job_id: str) -> str:
    return f"{job_id}.in"


def tm_ts_tag(job_id: str) -> str:
    return f"{job_id}.ts"


def build_traffic_matrix_job(topo: Topology, window: WindowPolicy, with_latency: bool,
                             job_id: str = "tm", n_reducers: int = 2) -> JobSpec:
    if window.kind != "jump":
        raise ValueError("traffic matrix reads chip counters per window: jump windows only")
    mappers = tuple(topo.edge_nodes())
    if len(mappers) < 2:
        raise InsufficientNodes("traffic matrix needs at least two edge routers")
    reducers = _pick_reducers(topo, set(mappers), n_reducers)
    label = tm_label_tag(job_id)
    stamp = tm_ts_tag(job_id)
    plan = []
    for m in mappers:
        ingress = AttachPoint(m, LOC_INGRESS, HOST_PORT)
        egress = AttachPoint(m, LOC_EGRESS, HOST_PORT)
        plan.append((m, ingress, ProbeSpec("Label", tag=label)))
        if with_latency:
            plan.append((m, ingress, ProbeSpec("Timestamp", tag=stamp)))
        plan.append((m, egress, ProbeSpec("Counter", group_by=(f"meta:{label}",))))
        if with_latency:
            plan.append((m, egress, ProbeSpec("Sampler", every_n=1)))
    map_params = {"label_tag": label}
    if with_latency:
        map_params["ts_tag"] = stamp
    return JobSpec(
        job_id=job_id,
        mapper_nodes=mappers,
        reducer_nodes=reducers,
        probe_plan=tuple(plan),
        map_operator=("traffic_matrix_cell", map_params),
        reduce_operator=("latency_minmax", {}),
        window=window,
    )


def decode_traffic_matrix_results(results) -> dict:
    """window index -> {(src, dst): TrafficMatrixCell}."""
    out: dict = {}
    for res in results:
        cells = out.setdefault(res.window, {})
        for key, value in res.entries:
            src, dst = decode_pair_key(key)
            pkts, nbytes, lo, hi = value
            cells[(src, dst)] = TrafficMatrixCell(src, dst, pkts, nbytes, lo, hi)
    return out


# -- congestion monitor ----------------------------------------------------------


@dataclass(frozen=True)
class CongestionReport:
    top_victims: tuple  # ((FlowKey, drops), ...) ranked
    hot_spots: tuple  # (((node, port), drops), ...) ranked
    lossy_paths: tuple  # (((src, dst), drops), ...) ranked

    def to_json(self) -> dict:
        return {
            "top_victims": [
                {"flow": f.to_json(), "drops": d} for f, d in self.top_victims
            ],
            "hot_spots": [
                {"node": n, "port": p, "drops": d} for (n, p), d in self.hot_spots
            ],
            "lossy_paths": [
                {"src": s, "dst": t, "drops": d} for (s, t), d in self.lossy_paths
            ],
        }


EMPTY_CONGESTION_REPORT = CongestionReport((), (), ())


def congestion_label_tag(job_id: str) -> str:
    return f"{job_id}.in"


def build_congestion_job(topo: Topology, window: WindowPolicy, top_k: int,
                         job_id: str = "congestion", n_reducers: int = 1) -> JobSpec:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    mappers = tuple(
        n for n in topo.nodes() if topo.roles[n] in ("edge", "core")
    )
    if not mappers:
        raise InsufficientNodes("no forwarding nodes to map on")
    observers = set(topo.nodes()) - set(mappers)
    if not observers:
        raise InsufficientNodes(
            "congestion monitoring maps on every forwarding node; "
            "the scenario must reserve observer nodes to reduce on"
        )
    reducers = _pick_reducers(topo, set(mappers), n_reducers)
    label = congestion_label_tag(job_id)
    plan = []
    for m in mappers:
        if topo.roles[m] == "edge":
            plan.append((m, AttachPoint(m, LOC_INGRESS, HOST_PORT), ProbeSpec("Label", tag=label)))
        for port in topo.adjacency[m]:
            plan.append((m, AttachPoint(m, LOC_QUEUE, port), ProbeSpec("DropNotify")))
    return JobSpec(
        job_id=job_id,
        mapper_nodes=mappers,
        reducer_nodes=reducers,
        probe_plan=tuple(plan),
        map_operator=("drop_stats", {"label_tag": label}),
        reduce_operator=("drop_stats", {"top_k": top_k}),
        window=window,
    )


def _rank_drop_entries(entries, top_k):
    ranked = sorted(entries, key=lambda kv: (-kv[1], kv[0]))
    return tuple(ranked[:top_k])


def decode_congestion_results(results, top_k: int) -> dict:
    """window index -> CongestionReport.

    Reducers each keep their local top-k per category, so the global top-k
    is re-ranked from the union here.
    """
    merged: dict = {}
    for res in results:
        buckets = merged.setdefault(res.window, {})
        for key, value in res.entries:
            buckets[key] = buckets.get(key, 0) + value
    out = {}
    for window, buckets in merged.items():
        victims = []
        spots = []
        paths = []
        for key, drops in buckets.items():
            prefix, body = key[:1], key[1:]
            if prefix == DROP_KEY_FLOW:
                victims.append((FlowKey.from_bytes(body), drops))
            elif prefix == DROP_KEY_PORT:
                spots.append((decode_pair_key(body), drops))
            elif prefix == DROP_KEY_PATH:
                paths.append((decode_pair_key(body), drops))
        out[window] = CongestionReport(
            top_victims=_rank_drop_entries(victims, top_k),
            hot_spots=_rank_drop_entries(spots, top_k),
            lossy_paths=_rank_drop_entries(paths, top_k),
        )
    return out


# -- top-n (elephant) flows --------------------------------------------------------


@dataclass(frozen=True)
class TopNReport:
    flows: tuple  # ((FlowKey, packets, bytes), ...) ranked, length <= n

    def to_json(self) -> dict:
        return {
            "flows": [
                {"flow": f.to_json(), "packets": p, "bytes": b} for f, p, b in self.flows
            ]
        }


EMPTY_TOPN_REPORT = TopNReport(())


def validate_partition(partition, n_mappers: int):
    """Check a flow-space split: one (modulus, residues) slice per mapper,
    disjoint and jointly covering all residues of a common modulus."""
    if len(partition) != n_mappers:
        raise InvalidPartition("need exactly one slice per mapper")
    moduli = {m for m, _res in partition}
    if len(moduli) != 1:
        raise InvalidPartition("slices must share one modulus")
    modulus = moduli.pop()
    if modulus < 1:
        raise InvalidPartition("modulus must be >= 1")
    seen: set = set()
    for _m, residues in partition:
        for r in residues:
            if not 0 <= r < modulus:
                raise InvalidPartition(f"residue {r} outside [0, {modulus})")
            if r in seen:
                raise InvalidPartition(f"residue {r} assigned twice")
            seen.add(r)
    if len(seen) != modulus:
        raise InvalidPartition("slices do not cover the flow space")
    return modulus


def build_elephant_job(topo: Topology, window: WindowPolicy, n: int, k_counters: int,
                       partition=None, mappers=None, job_id: str = "topn",
                       n_reducers: int = 1) -> JobSpec:
    if n < 1:
        raise ValueError("n must be >= 1")
    if k_counters < n:
        raise ValueError("k_counters must be >= n")
    mappers = tuple(mappers) if mappers is not None else tuple(topo.edge_nodes())
    if not mappers:
        raise InsufficientNodes("need at least one mapper")
    for m in mappers:
        if m not in topo.roles:
            raise InsufficientNodes(f"mapper node {m} not in topology")
    reducers = _pick_reducers(topo, set(mappers), n_reducers)
    plan = []
    if partition is not None:
        # sliced candidates only make sense when every mapper is on the
        # forwarding path of every flow; sample at the flow table
        partition = tuple((m, tuple(res)) for m, res in partition)
        modulus = validate_partition(partition, len(mappers))
        for mapper, (_mod, residues) in zip(mappers, partition):
            pred = ((f"flow_hash_mod:{modulus}", "in", residues),)
            plan.append(
                (mapper, AttachPoint(mapper, LOC_FLOW_TABLE), ProbeSpec("Sampler", predicate=pred, every_n=1))
            )
    else:
        for mapper in mappers:
            plan.append(
                (mapper, AttachPoint(mapper, LOC_INGRESS, HOST_PORT), ProbeSpec("Sampler", every_n=1))
            )
    return JobSpec(
        job_id=job_id,
        mapper_nodes=mappers,
        reducer_nodes=reducers,
        probe_plan=tuple(plan),
        map_operator=("topn_rank", {"k_counters": k_counters}),
        reduce_operator=("topn_rank", {"n": n}),
        window=window,
    )


def decode_topn_results(results, n: int) -> dict:
    """window index -> TopNReport; re-ranks the union of per-reducer winners."""
    merged: dict = {}
    for res in results:
        flows = merged.setdefault(res.window, {})
        for key, value in res.entries:
            flow = FlowKey.from_bytes(key)
            prev = flows.get(flow)
            if prev is None:
                flows[flow] = value
            else:
                flows[flow] = (prev[0] + value[0], prev[1] + value[1], prev[2] + value[2])
    out = {}
    for window, flows in merged.items():
        ranked = sorted(flows.items(), key=lambda kv: (-kv[1][0], kv[0]))[:n]
        out[window] = TopNReport(tuple((f, v[0], v[2]) for f, v in ranked))
    return out
