"""Identifiers, packet formats and the symbolic payload algebra.

Gradient values are never materialised. A payload records *which* workers
contributed to it and how many times, so an aggregation that double counts or
drops a worker is directly observable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAX_FANIN = 32
U8_MAX = 0xFF
U32_MAX = 0xFFFFFFFF

DEFAULT_PACKET_BYTES = 306
SWITCHML_PACKET_BYTES = 180
CONTROL_PACKET_BYTES = 64


class FanInError(ValueError):
    """A level's fan-in does not fit the 32-bit bitmap."""


class PacketKind(IntEnum):
    GRADIENT = 0
    RESULT = 1
    PARTIAL_TO_PS = 2
    REMINDER = 3
    QUERY = 4
    RETRANSMIT = 5


class Payload:
    """Multiset of worker contributions.

    ``mask`` has bit ``w`` set when worker ``w`` contributed at least once.
    ``extra`` maps a worker to its multiplicity above one and is ``None`` in
    every healthy aggregation, which keeps the common path to an int OR.
    """

    __slots__ = ("mask", "extra", "byte_size")

    def __init__(self, mask: int = 0, extra: dict[int, int] | None = None,
                 byte_size: int = DEFAULT_PACKET_BYTES):
        self.mask = mask
        self.extra = extra or None
        self.byte_size = byte_size

    @classmethod
    def single(cls, worker: int, byte_size: int = DEFAULT_PACKET_BYTES) -> "Payload":
        return cls(1 << worker, None, byte_size)

    @classmethod
    def from_contributions(cls, contributions: dict[int, int],
                           byte_size: int = DEFAULT_PACKET_BYTES) -> "Payload":
        mask = 0
        extra = {}
        for w, m in contributions.items():
            if m <= 0:
                raise ValueError(f"multiplicity must be positive, got {m} for worker {w}")
            mask |= 1 << w
            if m > 1:
                extra[w] = m - 1
        return cls(mask, extra, byte_size)

    @property
    def contributions(self) -> dict[int, int]:
        out = {}
        mask = self.mask
        w = 0
        while mask:
            if mask & 1:
                out[w] = 1
            mask >>= 1
            w += 1
        if self.extra:
            for w, e in self.extra.items():
                out[w] += e
        return out

    @property
    def workers(self) -> frozenset[int]:
        return frozenset(self.contributions)

    def is_empty(self) -> bool:
        return self.mask == 0

    def has_duplicates(self) -> bool:
        return self.extra is not None

    def __add__(self, other: "Payload") -> "Payload":
        return payload_add(self, other)

    def __eq__(self, other):
        if not isinstance(other, Payload):
            return NotImplemented
        return self.mask == other.mask and (self.extra or {}) == (other.extra or {})

    def __hash__(self):
        return hash((self.mask, tuple(sorted((self.extra or {}).items()))))

    def __repr__(self):
        return f"Payload({self.contributions})"


def payload_add(a: Payload, b: Payload) -> Payload:
    """Multiset union of two payloads; byte size is the larger of the two."""
    size = a.byte_size if a.byte_size >= b.byte_size else b.byte_size
    overlap = a.mask & b.mask
    if not overlap and a.extra is None and b.extra is None:
        return Payload(a.mask | b.mask, None, size)
    extra = dict(a.extra) if a.extra else {}
    if b.extra:
        for w, e in b.extra.items():
            extra[w] = extra.get(w, 0) + e
    w = 0
    while overlap:
        if overlap & 1:
            extra[w] = extra.get(w, 0) + 1
        overlap >>= 1
        w += 1
    return Payload(a.mask | b.mask, extra, size)


def worker_mask(workers) -> int:
    mask = 0
    for w in workers:
        mask |= 1 << w
    return mask


def is_complete(p: Payload, workers) -> bool:
    """True iff every worker contributed exactly once and nobody else did."""
    if not workers:
        raise ValueError("worker set must be nonempty")
    return p.extra is None and p.mask == worker_mask(workers)


def popcount(x: int) -> int:
    return bin(x).count("1")


def check_fanin(fanin: int, what: str = "fan-in") -> None:
    if not 1 <= fanin <= MAX_FANIN:
        raise FanInError(
            f"{what} {fanin} does not fit a {MAX_FANIN}-bit bitmap (must be 1..{MAX_FANIN})")


_HEADER = struct.Struct("<BIIBBIII")
HEADER_BYTES = _HEADER.size


@dataclass(frozen=True)
class PacketHeader:
    """Fixed-width view of a packet header, used for trace dumps."""

    kind: PacketKind
    job: int
    seq: int
    priority: int = 0
    bitmap0: int = 0
    bitmap1: int = 0
    agg_index: int = 0
    level: int = 0

    def __post_init__(self):
        for name, limit in (("job", U32_MAX), ("seq", U32_MAX), ("priority", U8_MAX),
                            ("bitmap0", U32_MAX), ("bitmap1", U32_MAX),
                            ("agg_index", U32_MAX), ("level", 1)):
            v = getattr(self, name)
            if not 0 <= v <= limit:
                raise ValueError(f"header field {name}={v} out of range [0, {limit}]")

    def encode(self) -> bytes:
        return _HEADER.pack(int(self.kind), self.job, self.seq, self.priority,
                            self.level, self.agg_index, self.bitmap0, self.bitmap1)

    @classmethod
    def decode(cls, data: bytes) -> "PacketHeader":
        kind, job, seq, prio, level, idx, b0, b1 = _HEADER.unpack(data)
        return cls(PacketKind(kind), job, seq, prio, b0, b1, idx, level)


class Packet:
    """One packet on the wire: flattened header fields plus symbolic payload.

    ``reliable`` marks end-host to end-host traffic that rides the lossless
    transport; ``dst`` is a node id.
    """

    __slots__ = ("kind", "job", "seq", "priority", "bitmap0", "bitmap1", "agg_index",
                 "level", "payload", "src", "dst", "sent_at", "byte_size", "reliable")

    def __init__(self, kind, job, seq, priority=0, bitmap0=0, bitmap1=0, agg_index=0,
                 level=0, payload=None, src=0, dst=0, sent_at=0,
                 byte_size=DEFAULT_PACKET_BYTES, reliable=False):
        self.kind = kind
        self.job = job
        self.seq = seq
        self.priority = priority
        self.bitmap0 = bitmap0
        self.bitmap1 = bitmap1
        self.agg_index = agg_index
        self.level = level
        self.payload = payload
        self.src = src
        self.dst = dst
        self.sent_at = sent_at
        self.byte_size = byte_size
        self.reliable = reliable

    @property
    def header(self) -> PacketHeader:
        return PacketHeader(PacketKind(self.kind), self.job, self.seq, self.priority,
                            self.bitmap0, self.bitmap1, self.agg_index, self.level)

    def __repr__(self):
        return (f"Packet({PacketKind(self.kind).name}, job={self.job}, seq={self.seq}, "
                f"prio={self.priority}, {self.src}->{self.dst}, {self.payload!r})")


def reminder(job: int, seq: int, src: int, dst: int, sent_at: int = 0,
             reliable: bool = False) -> Packet:
    """Reminder packet: every header field except job and seq is zero."""
    return Packet(PacketKind.REMINDER, job, seq, payload=None, src=src, dst=dst,
                  sent_at=sent_at, byte_size=CONTROL_PACKET_BYTES, reliable=reliable)


GradientPacket = Packet
