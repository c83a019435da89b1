"""Centralized brute-force reference answers, computed straight from the
full simulation trace.

Every function here recomputes a per-window answer the expensive way: scan
the whole event log, tally, rank. Nothing is shared with the distributed
mapper/reducer code paths except the domain types; window arithmetic and
ranking rules are deliberately re-stated inline so the two sides can only
agree by computing the same thing.

Window convention (restated): window ``i`` covers
``[i * slide, i * slide + length)`` and only windows closing at or before
``until`` count as elapsed.
"""

from __future__ import annotations

from .apps import CongestionReport, TopNReport, TrafficMatrixCell
from .core import SimTime, WindowPolicy
from .netsim import Trace


def _windows_containing(t: SimTime, policy: WindowPolicy) -> range:
    hi = t // policy.slide
    lo = max(0, (t - policy.length) // policy.slide + 1)
    return range(lo, hi + 1)


def elapsed_windows(policy: WindowPolicy, until: SimTime) -> range:
    """Window indices whose close time is at or before ``until``."""
    if until < policy.length:
        return range(0)
    return range((until - policy.length) // policy.slide + 1)


def _closes_in_time(idx: int, policy: WindowPolicy, until: SimTime) -> bool:
    return idx * policy.slide + policy.length <= until


def oracle_ddos(trace: Trace, server_pool, threshold: int, policy: WindowPolicy,
                edge_nodes, until: SimTime) -> dict:
    """window index -> tuple of (server, distinct flow count) alarms.

    Distinct 5-tuples per (server, window) over edge ingress events; alarm
    iff the count strictly exceeds the threshold.
    """
    edges = set(edge_nodes)
    pool = set(server_pool)
    seen: dict = {}
    for row in trace.events:
        if row[0] != "inj":
            continue
        _k, t, node, _seq, flow, _size, _dst = row
        if node not in edges or flow.dst_addr not in pool:
            continue
        for idx in _windows_containing(t, policy):
            if _closes_in_time(idx, policy, until):
                seen.setdefault((idx, flow.dst_addr), set()).add(flow)
    out = {idx: [] for idx in elapsed_windows(policy, until)}
    for (idx, server), flows in seen.items():
        if len(flows) > threshold:
            out[idx].append((server, len(flows)))
    return {idx: tuple(sorted(alarms)) for idx, alarms in out.items()}


def oracle_traffic_matrix(trace: Trace, policy: WindowPolicy, with_latency: bool,
                          edge_nodes, until: SimTime) -> dict:
    """window index -> {(ingress edge, egress edge): TrafficMatrixCell}.

    Attributes each delivered edge-to-edge packet at its delivery time;
    latency is delivery time minus injection time.
    """
    edges = set(edge_nodes)
    inject = trace.inject_index()
    cells: dict = {idx: {} for idx in elapsed_windows(policy, until)}
    for row in trace.events:
        if row[0] != "dlv":
            continue
        _k, t, node, seq = row
        if node not in edges:
            continue
        t_inj, ingress, _flow, size, _dst = inject[seq]
        if ingress not in edges:
            continue
        for idx in _windows_containing(t, policy):
            if not _closes_in_time(idx, policy, until):
                continue
            cell = cells[idx].setdefault((ingress, node), [0, 0, None, None])
            cell[0] += 1
            cell[1] += size
            if with_latency:
                latency = t - t_inj
                if cell[2] is None or latency < cell[2]:
                    cell[2] = latency
                if cell[3] is None or latency > cell[3]:
                    cell[3] = latency
    return {
        idx: {
            pair: TrafficMatrixCell(pair[0], pair[1], c[0], c[1], c[2], c[3])
            for pair, c in window_cells.items()
        }
        for idx, window_cells in cells.items()
    }


def oracle_congestion(trace: Trace, policy: WindowPolicy, top_k: int,
                      edge_nodes, until: SimTime) -> dict:
    """window index -> CongestionReport from raw drop records.

    Victims tally per flow, hot spots per (node, port), lossy paths per
    (ingress edge, destination edge) of the dropped packet. All three
    lists rank by drops descending with ties key-ascending, truncated to
    ``top_k``.
    """
    edges = set(edge_nodes)
    inject = trace.inject_index()
    flows: dict = {}
    spots: dict = {}
    paths: dict = {}
    for rec in trace.drops:
        for idx in _windows_containing(rec.time, policy):
            if not _closes_in_time(idx, policy, until):
                continue
            key = (idx, rec.flow)
            flows[key] = flows.get(key, 0) + 1
            key = (idx, (rec.node, rec.port))
            spots[key] = spots.get(key, 0) + 1
            _t, ingress, _flow, _size, dst = inject[rec.seq]
            if ingress in edges:
                key = (idx, (ingress, dst))
                paths[key] = paths.get(key, 0) + 1

    def ranked(tallies: dict, idx: int) -> tuple:
        bucket = [(k, v) for (w, k), v in tallies.items() if w == idx]
        bucket.sort(key=lambda kv: (-kv[1], kv[0]))
        return tuple(bucket[:top_k])

    out = {}
    for idx in elapsed_windows(policy, until):
        out[idx] = CongestionReport(
            top_victims=ranked(flows, idx),
            hot_spots=ranked(spots, idx),
            lossy_paths=ranked(paths, idx),
        )
    return out


def oracle_topn(trace: Trace, n: int, policy: WindowPolicy, until: SimTime) -> dict:
    """window index -> TopNReport of exact ingress packet/byte counts."""
    counts: dict = {idx: {} for idx in elapsed_windows(policy, until)}
    for row in trace.events:
        if row[0] != "inj":
            continue
        _k, t, _node, _seq, flow, size, _dst = row
        for idx in _windows_containing(t, policy):
            if not _closes_in_time(idx, policy, until):
                continue
            cell = counts[idx].get(flow)
            if cell is None:
                counts[idx][flow] = [1, size]
            else:
                cell[0] += 1
                cell[1] += size
    out = {}
    for idx, flows in counts.items():
        ranked = sorted(flows.items(), key=lambda kv: (-kv[1][0], kv[0]))[:n]
        out[idx] = TopNReport(tuple((f, c[0], c[1]) for f, c in ranked))
    return out


def delivered_per_window(trace: Trace, policy: WindowPolicy, edge_nodes,
                         until: SimTime) -> dict:
    """window index -> delivered edge-to-edge packet count (conservation aid)."""
    edges = set(edge_nodes)
    inject = trace.inject_index()
    out = {idx: 0 for idx in elapsed_windows(policy, until)}
    for row in trace.events:
        if row[0] != "dlv":
            continue
        _k, t, node, seq = row
        if node not in edges or inject[seq][1] not in edges:
            continue
        for idx in _windows_containing(t, policy):
            if _closes_in_time(idx, policy, until):
                out[idx] += 1
    return out
