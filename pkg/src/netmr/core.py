"""Shared domain types and pure helpers: flow keys, simulated time, windows,
and the key partitioner used by the shuffle.

All time in the system is integer microseconds (``SimTime``). Windows are
epoch-aligned half-open intervals: window ``i`` under a policy covers
``[i * slide, i * slide + length)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

SimTime = int  # simulated microseconds, never floats
NodeId = int
WindowIndex = int

MIN_PACKET_BYTES = 64
MAX_PACKET_BYTES = 9216

FNV64_OFFSET_BASIS = 14695981039346656037
FNV64_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, order=True)
class FlowKey:
    """IPv4-style 5-tuple flow identity.

    Ordering is lexicographic over (src_addr, dst_addr, src_port, dst_port,
    proto), which gives a strict total order for deterministic iteration.
    """

    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    proto: int

    def to_bytes(self) -> bytes:
        return struct.pack(
            ">IIHHB", self.src_addr, self.dst_addr, self.src_port, self.dst_port, self.proto
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FlowKey":
        return cls(*struct.unpack(">IIHHB", raw))

    def to_json(self) -> dict:
        return {
            "src_addr": self.src_addr,
            "dst_addr": self.dst_addr,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "proto": self.proto,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FlowKey":
        return cls(
            obj["src_addr"], obj["dst_addr"], obj["src_port"], obj["dst_port"], obj["proto"]
        )


@dataclass(slots=True)
class Packet:
    """A simulated datagram.

    ``metadata`` is the in-band scratch area probes may append to; it never
    affects routing or byte accounting (accounting always uses
    ``size_bytes`` as declared).
    """

    seq: int
    flow: FlowKey
    size_bytes: int
    inject_time: SimTime
    ingress_node: NodeId = -1
    metadata: list = field(default_factory=list)  # (tag, value) pairs
    ctrl_flags: int = 0

    def __post_init__(self):
        if not MIN_PACKET_BYTES <= self.size_bytes <= MAX_PACKET_BYTES:
            raise ValueError(
                f"packet size {self.size_bytes} outside "
                f"[{MIN_PACKET_BYTES}, {MAX_PACKET_BYTES}]"
            )

    def meta(self, tag: str):
        """First metadata value recorded under ``tag``, or None."""
        for t, v in self.metadata:
            if t == tag:
                return v
        return None


@dataclass(frozen=True)
class WindowPolicy:
    """Jump (tumbling) or sliding window over the simulated time axis."""

    kind: str  # "jump" | "sliding"
    length: SimTime
    slide: SimTime

    def __post_init__(self):
        if self.kind not in ("jump", "sliding"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.length <= 0:
            raise ValueError("window length must be positive")
        if not 0 < self.slide <= self.length:
            raise ValueError("slide must satisfy 0 < slide <= length")
        if self.kind == "jump" and self.slide != self.length:
            raise ValueError("jump windows require slide == length")

    @classmethod
    def jump(cls, length: SimTime) -> "WindowPolicy":
        return cls("jump", length, length)

    @classmethod
    def sliding(cls, length: SimTime, slide: SimTime) -> "WindowPolicy":
        return cls("sliding", length, slide)

    def bounds(self, index: WindowIndex) -> tuple[SimTime, SimTime]:
        start = index * self.slide
        return start, start + self.length

    def close_time(self, index: WindowIndex) -> SimTime:
        """Instant at which window ``index`` stops accepting events."""
        return index * self.slide + self.length

    def to_json(self) -> dict:
        return {"kind": self.kind, "length_us": self.length, "slide_us": self.slide}

    @classmethod
    def from_json(cls, obj: dict) -> "WindowPolicy":
        return cls(obj["kind"], obj["length_us"], obj["slide_us"])


def extract_flow_key(packet: Packet) -> FlowKey:
    """Project a packet onto its 5-tuple identity."""
    return packet.flow


def window_of(t: SimTime, policy: WindowPolicy) -> list[WindowIndex]:
    """All window indices whose half-open interval contains ``t``.

    Exactly one index for jump windows, up to ceil(length/slide) for sliding.
    """
    if t < 0:
        raise ValueError("time must be non-negative")
    hi = t // policy.slide
    lo = max(0, (t - policy.length) // policy.slide + 1)
    return list(range(lo, hi + 1))


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash, pinned so shuffle routing is bit-reproducible."""
    h = FNV64_OFFSET_BASIS
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def partition_key(key_bytes: bytes, n_reducers: int) -> int:
    """Stable reducer index for a key: FNV-1a 64 mod reducer count."""
    if n_reducers < 1:
        raise ValueError("need at least one reducer")
    return fnv1a64(bytes(key_bytes)) % n_reducers
