"""Switch data-plane model: aggregator pool, indexing and allocation policies.

The switch is a pure state machine. ``SwitchState.process_gradient`` and
``SwitchState.process_reminder`` mutate the pool and return the egress
packets; routing them is the caller's job.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    DEFAULT_PACKET_BYTES,
    Packet,
    PacketKind,
    check_fanin,
    payload_add,
    popcount,
)
from .priority import downgrade

AGGREGATOR_FOOTPRINT = 306

MASK64 = 0xFFFFFFFFFFFFFFFF
C1 = 0x9E3779B97F4A7C15
C2 = 0xC2B2AE3D27D4EB4F

GRADIENT = PacketKind.GRADIENT
RESULT = PacketKind.RESULT
PARTIAL_TO_PS = PacketKind.PARTIAL_TO_PS
REMINDER = PacketKind.REMINDER


def mix64(z: int) -> int:
    """splitmix64 finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def agg_index(job: int, seq: int, pool_size: int) -> int:
    if pool_size <= 0:
        raise ValueError(f"pool_size must be positive, got {pool_size}")
    job, seq = int(job), int(seq)
    return mix64(((job * C1) & MASK64) ^ ((seq * C2) & MASK64)) % pool_size


def agg_indices(job: int, seqs, pool_size: int) -> np.ndarray:
    """Vectorised ``agg_index`` over an array of sequence numbers."""
    if pool_size <= 0:
        raise ValueError(f"pool_size must be positive, got {pool_size}")
    s = np.asarray(seqs, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64((job * C1) & MASK64) ^ (s * np.uint64(C2))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z % np.uint64(pool_size)).astype(np.int64)


def pool_size_for(memory_bytes: int, footprint: int = AGGREGATOR_FOOTPRINT) -> int:
    return memory_bytes // footprint


class HashIndex:
    """Shared-pool indexing: every job hashes into the whole pool."""

    def __init__(self, pool_size: int):
        if pool_size <= 0:
            raise ValueError(f"pool_size must be positive, got {pool_size}")
        self.pool_size = pool_size

    def index(self, job: int, seq: int) -> int:
        return agg_index(job, seq, self.pool_size)

    def indices(self, job: int, seqs) -> np.ndarray:
        return agg_indices(job, seqs, self.pool_size)


class PartitionIndex:
    """Static equal partitions; a job cycles through its own slice."""

    def __init__(self, pool_size: int, jobs):
        jobs = list(jobs)
        if not jobs:
            raise ValueError("static partitioning needs at least one job")
        self.pool_size = pool_size
        self.partition_size = pool_size // len(jobs)
        if self.partition_size < 1:
            raise ValueError(f"pool of {pool_size} cannot be split across {len(jobs)} jobs")
        self.base = {job: k * self.partition_size for k, job in enumerate(jobs)}

    def index(self, job: int, seq: int) -> int:
        return self.base[job] + seq % self.partition_size

    def indices(self, job: int, seqs) -> np.ndarray:
        return self.base[job] + np.asarray(seqs, dtype=np.int64) % self.partition_size

    def ranges(self) -> dict[int, range]:
        return {j: range(b, b + self.partition_size) for j, b in self.base.items()}


class PolicyKind(Enum):
    ESA = "esa"
    ATP = "atp"
    SWITCHML = "switchml"
    ALWAYS_PREEMPT = "always"
    COIN_FLIP = "coinflip"


@dataclass(frozen=True)
class AllocationPolicy:
    kind: PolicyKind
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"coin-flip probability must be in [0, 1], got {self.p}")

    @classmethod
    def parse(cls, name: str) -> "AllocationPolicy":
        """``esa``, ``atp``, ``switchml``, ``always`` or ``coinflip[:p]``."""
        name = name.strip().lower()
        if name.startswith("coinflip"):
            _, _, p = name.partition(":")
            return cls(PolicyKind.COIN_FLIP, float(p) if p else 0.5)
        try:
            return cls(PolicyKind(name))
        except ValueError:
            raise ValueError(f"unknown policy {name!r}") from None

    @property
    def name(self) -> str:
        if self.kind is PolicyKind.COIN_FLIP:
            return f"coinflip:{self.p:g}"
        return self.kind.value

    @property
    def uses_priority(self) -> bool:
        return self.kind is PolicyKind.ESA


ESA = AllocationPolicy(PolicyKind.ESA)
ATP = AllocationPolicy(PolicyKind.ATP)
SWITCHML = AllocationPolicy(PolicyKind.SWITCHML)
ALWAYS_PREEMPT = AllocationPolicy(PolicyKind.ALWAYS_PREEMPT)


def coin_flip(p: float = 0.5) -> AllocationPolicy:
    return AllocationPolicy(PolicyKind.COIN_FLIP, p)


class Aggregator:
    __slots__ = ("occupied", "job", "seq", "priority", "bitmap", "counter",
                 "fanin_l1", "fanin_l2", "level", "value")

    def __init__(self):
        self.clear()

    def clear(self):
        self.occupied = False
        self.job = 0
        self.seq = 0
        self.priority = 0
        self.bitmap = 0
        self.counter = 0
        self.fanin_l1 = 0
        self.fanin_l2 = 0
        self.level = 0
        self.value = None

    def is_cleared(self) -> bool:
        return (not self.occupied and self.job == 0 and self.seq == 0 and self.priority == 0
                and self.bitmap == 0 and self.counter == 0 and self.fanin_l1 == 0
                and self.fanin_l2 == 0 and self.level == 0 and self.value is None)

    @property
    def fanin(self) -> int:
        return self.fanin_l2 if self.level else self.fanin_l1

    def __repr__(self):
        if not self.occupied:
            return "Aggregator(free)"
        return (f"Aggregator(job={self.job}, seq={self.seq}, prio={self.priority}, "
                f"bitmap={self.bitmap:#x}, counter={self.counter}/{self.fanin}, "
                f"value={self.value!r})")


class AggregatorPool(dict):
    """Index -> ``Aggregator``; slots are materialised on first touch.

    Behaves like a fully allocated pool of ``size`` cleared aggregators, so
    very large pools cost memory only for the slots actually used.
    """

    def __init__(self, size: int):
        super().__init__()
        self.size = size

    def __missing__(self, index):
        if not 0 <= index < self.size:
            raise IndexError(f"aggregator index {index} outside pool of {self.size}")
        agg = self[index] = Aggregator()
        return agg


@dataclass
class JobRegistration:
    """What one switch knows about one job.

    ``level`` is the traffic level this switch aggregates for the job (0 for
    worker packets, 1 for rack results). A root switch multicasts completed
    results to ``workers``; a leaf sends one result upward with ``rack_bit``.
    """

    job: int
    ps: int
    workers: list[int]
    fanin_l1: int
    fanin_l2: int = 1
    level: int = 0
    root: bool = True
    rack_bit: int = 0

    def __post_init__(self):
        check_fanin(self.fanin_l1, f"job {self.job} first-level fan-in")
        check_fanin(self.fanin_l2, f"job {self.job} second-level fan-in")

    @property
    def fanin(self) -> int:
        return self.fanin_l2 if self.level else self.fanin_l1


class SwitchCounters:
    __slots__ = ("allocations", "aggregations", "completions", "preemptions", "fwd_ps",
                 "downgrades", "reminder_hits", "reminder_misses", "unregistered",
                 "duplicate_bits")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, 0)

    def as_dict(self) -> dict[str, int]:
        return {name: getattr(self, name) for name in self.__slots__}


class SwitchState:
    """One switch: its aggregator pool, allocation policy and job table."""

    def __init__(self, switch_id: int, pool_size: int, policy: AllocationPolicy = ESA,
                 index=None, rng: random.Random | None = None, tracer=None,
                 packet_bytes: int = DEFAULT_PACKET_BYTES):
        if pool_size <= 0:
            raise ValueError(f"pool_size must be positive, got {pool_size}")
        self.id = switch_id
        self.pool = AggregatorPool(pool_size)
        self.policy = policy
        self.index = index if index is not None else HashIndex(pool_size)
        if self.index.pool_size != pool_size:
            raise ValueError("index scheme and pool disagree on pool size")
        self.jobs: dict[int, JobRegistration] = {}
        self.counters = SwitchCounters()
        self.tracer = tracer
        self.packet_bytes = packet_bytes
        self._coin = (rng or random.Random(0)).random
        self._kind = policy.kind
        self._prio = policy.uses_priority

    @property
    def static_partitions(self) -> dict[int, range] | None:
        if isinstance(self.index, PartitionIndex):
            return self.index.ranges()
        return None

    @property
    def multicast_groups(self) -> dict[int, list[int]]:
        return {j: r.workers for j, r in self.jobs.items()}

    @property
    def ps_route(self) -> dict[int, int]:
        return {j: r.ps for j, r in self.jobs.items()}

    def register(self, reg: JobRegistration) -> None:
        self.jobs[reg.job] = reg

    def _trace(self, now, event, job, seq, detail=""):
        self.tracer(now, self.id, event, job, seq, detail)

    def _allocate(self, agg, pkt, reg, bit, now):
        agg.occupied = True
        agg.job = pkt.job
        agg.seq = pkt.seq
        agg.priority = pkt.priority if self._prio else 0
        agg.bitmap = bit
        agg.counter = 1
        agg.fanin_l1 = reg.fanin_l1
        agg.fanin_l2 = reg.fanin_l2
        agg.level = pkt.level
        agg.value = pkt.payload
        self.counters.allocations += 1

    def deallocate(self, index: int) -> Aggregator:
        agg = self.pool[index]
        assert agg.occupied, f"double deallocate of aggregator {index} on switch {self.id}"
        agg.clear()
        return agg

    def _complete(self, agg, idx, pkt, reg, now):
        """Counter reached fan-in: emit the result and free the slot."""
        c = self.counters
        c.completions += 1
        value = agg.value
        if self.tracer is not None:
            self._trace(now, "COMPLETE_MULTICAST" if reg.root else "COMPLETE_UP",
                        agg.job, agg.seq, f"idx={idx}")
        if reg.root:
            job, seq, prio, level = agg.job, agg.seq, agg.priority, agg.level
            bitmap = agg.bitmap
            self.deallocate(idx)
            b0, b1 = (0, bitmap) if level else (bitmap, 0)
            size = self.packet_bytes
            return [Packet(RESULT, job, seq, prio, b0, b1, idx, level, value,
                           self.id, w, now, size) for w in reg.workers]
        # leaf: reuse the arriving packet as the upward result
        pkt.kind = RESULT
        pkt.job = agg.job
        pkt.seq = agg.seq
        pkt.priority = agg.priority
        pkt.bitmap0 = agg.bitmap
        pkt.bitmap1 = 1 << reg.rack_bit
        pkt.level = 1
        pkt.payload = value
        pkt.src = self.id
        pkt.dst = reg.ps
        pkt.sent_at = now
        self.deallocate(idx)
        return [pkt]

    def process_gradient(self, pkt: Packet, now: int = 0) -> list[Packet]:
        """Aggregate, allocate, preempt or forward one gradient-bearing packet."""
        reg = self.jobs.get(pkt.job)
        c = self.counters
        if reg is None:
            c.unregistered += 1
            return []
        idx = pkt.agg_index
        agg = self.pool[idx]
        bit = pkt.bitmap1 if pkt.level else pkt.bitmap0
        tracer = self.tracer
        if not agg.occupied:
            self._allocate(agg, pkt, reg, bit, now)
            if tracer is not None:
                self._trace(now, "ALLOC", pkt.job, pkt.seq, f"idx={idx} prio={agg.priority}")
            if agg.fanin == 1:
                return self._complete(agg, idx, pkt, reg, now)
            return []
        if agg.job == pkt.job and agg.seq == pkt.seq and agg.level == pkt.level:
            if agg.bitmap & bit:
                c.duplicate_bits += 1
                return []
            agg.value = payload_add(agg.value, pkt.payload)
            agg.bitmap |= bit
            agg.counter += 1
            c.aggregations += 1
            if self._prio and pkt.priority > agg.priority:
                agg.priority = pkt.priority
            if tracer is not None:
                self._trace(now, "AGGR", pkt.job, pkt.seq, f"idx={idx} counter={agg.counter}")
            if agg.counter >= agg.fanin:
                return self._complete(agg, idx, pkt, reg, now)
            return []
        return self._collide(agg, idx, pkt, reg, bit, now)

    def _collide(self, agg, idx, pkt, reg, bit, now):
        kind = self._kind
        if kind is PolicyKind.ESA:
            preempt = pkt.priority > agg.priority
        elif kind is PolicyKind.ALWAYS_PREEMPT:
            preempt = True
        elif kind is PolicyKind.COIN_FLIP:
            preempt = self._coin() < self.policy.p
        else:
            preempt = False
        c = self.counters
        if not preempt:
            c.fwd_ps += 1
            if self.tracer is not None:
                self._trace(now, "FWD_PS", pkt.job, pkt.seq,
                            f"idx={idx} holder={agg.job}:{agg.seq}")
            pkt.kind = PARTIAL_TO_PS
            pkt.src = self.id
            pkt.dst = reg.ps
            pkt.sent_at = now
            if kind is PolicyKind.ESA:
                old = agg.priority
                agg.priority = downgrade(old)
                c.downgrades += 1
                if self.tracer is not None:
                    self._trace(now, "DOWNGRADE", agg.job, agg.seq, f"{old}->{agg.priority}")
            return [pkt]
        # packet swapping: the arriving packet leaves carrying the evicted partial
        c.preemptions += 1
        old_job, old_seq, old_prio, old_level = agg.job, agg.seq, agg.priority, agg.level
        old_bitmap, old_value = agg.bitmap, agg.value
        old_reg = self.jobs[old_job]
        if self.tracer is not None:
            self._trace(now, "PREEMPT_SWAP", old_job, old_seq,
                        f"idx={idx} by={pkt.job}:{pkt.seq}")
        self.deallocate(idx)
        self._allocate(agg, pkt, reg, bit, now)
        pkt.kind = PARTIAL_TO_PS
        pkt.job = old_job
        pkt.seq = old_seq
        pkt.priority = old_prio
        pkt.level = old_level
        if old_level:
            pkt.bitmap0, pkt.bitmap1 = 0, old_bitmap
        else:
            pkt.bitmap0, pkt.bitmap1 = old_bitmap, 0
        pkt.payload = old_value
        pkt.src = self.id
        pkt.dst = old_reg.ps
        pkt.sent_at = now
        out = [pkt]
        if agg.fanin == 1:
            # newcomer completes on its own; its payload is still in the slot
            fake = Packet(GRADIENT, agg.job, agg.seq, agg.priority, level=agg.level)
            out.extend(self._complete(agg, idx, fake, reg, now))
        return out

    def process_reminder(self, pkt: Packet, now: int = 0) -> list[Packet]:
        """Flush a matching aggregator to the job's PS; a miss emits nothing."""
        idx = self.index.index(pkt.job, pkt.seq)
        agg = self.pool[idx]
        if agg.occupied and agg.job == pkt.job and agg.seq == pkt.seq:
            self.counters.reminder_hits += 1
            reg = self.jobs[agg.job]
            if self.tracer is not None:
                self._trace(now, "REMINDER_HIT", pkt.job, pkt.seq, f"idx={idx}")
            level, bitmap, value, prio = agg.level, agg.bitmap, agg.value, agg.priority
            self.deallocate(idx)
            pkt.kind = PARTIAL_TO_PS
            pkt.priority = prio
            pkt.level = level
            pkt.bitmap0, pkt.bitmap1 = (0, bitmap) if level else (bitmap, 0)
            pkt.agg_index = idx
            pkt.payload = value
            pkt.src = self.id
            pkt.dst = reg.ps
            pkt.sent_at = now
            pkt.byte_size = self.packet_bytes
            pkt.reliable = False
            return [pkt]
        self.counters.reminder_misses += 1
        if self.tracer is not None:
            self._trace(now, "REMINDER_MISS", pkt.job, pkt.seq, f"idx={idx}")
        return []

    def occupancy(self) -> int:
        return sum(1 for a in self.pool.values() if a.occupied)

    def held_contributions(self):
        """Yield ``(job, seq, payload)`` for every occupied aggregator."""
        for _, a in sorted(self.pool.items()):
            if a.occupied:
                yield a.job, a.seq, a.value

    def check_invariants(self) -> None:
        for i, a in self.pool.items():
            if not a.occupied:
                assert a.is_cleared(), f"free aggregator {i} not cleared: {a!r}"
                continue
            assert popcount(a.bitmap) == a.counter, f"bitmap/counter mismatch at {i}: {a!r}"
            assert a.counter <= a.fanin, f"counter above fan-in at {i}: {a!r}"
