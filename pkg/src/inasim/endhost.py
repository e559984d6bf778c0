"""Worker and parameter-server state machines.

Workers push windowed gradient streams tagged with a priority and pull
results from the switch or the PS. The PS merges partial aggregates, drives
the reminder mechanism and runs the query/retransmit recovery used when
packets are lost.

Recovery paths for the loss cases, all built from the operations below:

=====  ==============================================  ====================================
case   where the loss happens                          recovery sequence
=====  ==============================================  ====================================
1      gradient lost on its way to the switch          worker dupACK/timeout -> worker
                                                       reminder -> PS creates entry ->
                                                       switch reminder + queries -> missing
                                                       workers retransmit to the PS
2      multicast result lost to some/all workers       worker reminder -> PS switch reminder
                                                       + queries -> a cached copy is relayed
                                                       (or, if nobody has it, the PS
                                                       re-aggregates from retransmits)
3      fallback gradient lost on its way to the PS     worker-side reminder path as in 1
4      evicted partial lost on its way to the PS       worker-side reminder path as in 1
5      later gradient lost after a preemption          PS timer / dupACK reminders while the
                                                       entry exists, else the worker path
=====  ==============================================  ====================================
"""
from __future__ import annotations

from bisect import bisect_right

from .core import (
    CONTROL_PACKET_BYTES,
    DEFAULT_PACKET_BYTES,
    Packet,
    PacketKind,
    Payload,
    payload_add,
    worker_mask,
)
from .netsim import PS_PER_MS, Node
from .priority import JobProfile, QuantScale, compute_priority, quantize_priority

GRADIENT = PacketKind.GRADIENT
RESULT = PacketKind.RESULT
PARTIAL_TO_PS = PacketKind.PARTIAL_TO_PS
REMINDER = PacketKind.REMINDER
QUERY = PacketKind.QUERY
RETRANSMIT = PacketKind.RETRANSMIT

DEFAULT_WINDOW_BYTES = 60_000
RTO_MIN = PS_PER_MS
RTO_MAX_FACTOR = 100
DUPACK_THRESHOLD = 3

# Trace events that must appear, in this order, when each case recovers.
LOSS_CASES = {
    1: ("gradient lost before the switch",
        ["DROP", "WORKER_REMINDER", "PS_CREATE", "PS_QUERY", "PS_RETRANSMIT_REQ",
         "PS_MULTICAST"]),
    2: ("result lost on multicast",
        ["COMPLETE_MULTICAST", "DROP", "WORKER_REMINDER", "PS_QUERY", "PS_RELAYED"]),
    3: ("failed-preemption gradient lost before the PS",
        ["FWD_PS", "DROP", "WORKER_REMINDER", "PS_CREATE", "PS_RETRANSMIT_REQ",
         "PS_MULTICAST"]),
    4: ("evicted partial lost before the PS",
        ["PREEMPT_SWAP", "DROP", "WORKER_REMINDER", "PS_CREATE", "REMINDER_HIT",
         "PS_RETRANSMIT_REQ", "PS_MULTICAST"]),
    5: ("later gradient lost after a preemption",
        ["PREEMPT_SWAP", "PS_CREATE", "DROP", "WORKER_REMINDER", "REMINDER_HIT",
         "PS_RETRANSMIT_REQ", "PS_MULTICAST"]),
}


class MisuseError(RuntimeError):
    """The caller drove a state machine in a way the protocol forbids."""


class RtoEstimator:
    """TCP-style smoothed RTT with a floor and exponential backoff cap."""

    __slots__ = ("srtt", "rttvar", "rto_min", "rto_max", "rto")

    def __init__(self, rto_min: int = RTO_MIN, rto_max: int | None = None):
        self.srtt = None
        self.rttvar = 0
        self.rto_min = rto_min
        self.rto_max = rto_max if rto_max is not None else RTO_MAX_FACTOR * rto_min
        self.rto = rto_min

    def sample(self, rtt: int) -> None:
        if self.srtt is None:
            self.srtt = rtt
            self.rttvar = rtt // 2
        else:
            err = rtt - self.srtt
            self.srtt += err // 8
            self.rttvar += (abs(err) - self.rttvar) // 4
        r = self.srtt + 4 * self.rttvar
        self.rto = min(max(r, self.rto_min), self.rto_max)

    def backoff(self, current: int) -> int:
        return min(current * 2, self.rto_max)


class WorkerCounters:
    __slots__ = ("sent", "delivered", "reminders", "query_answers", "retransmits",
                 "bad_results", "redundant_results", "unknown_job")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, 0)

    def as_dict(self):
        return {n: getattr(self, n) for n in self.__slots__}


class _Segment:
    __slots__ = ("start", "end", "priority", "indices", "remaining", "token")

    def __init__(self, start, end, priority, indices, token):
        self.start = start
        self.end = end
        self.priority = priority
        self.indices = indices
        self.remaining = end - start
        self.token = token


class Worker(Node):
    """One worker of one job.

    ``index`` is the worker's position inside its job (its contribution id and
    bitmap bit); ``rack_index`` is its bit within the first-level switch.
    """

    def __init__(self, sim, node_id: int, job: int, index: int, ps: int, fanin: int,
                 index_scheme, window_bytes: int = DEFAULT_WINDOW_BYTES,
                 packet_bytes: int = DEFAULT_PACKET_BYTES, rack_index: int | None = None,
                 rto_min: int = RTO_MIN, scale: QuantScale = QuantScale(), on_complete=None):
        super().__init__(sim, node_id)
        self.job = job
        self.index = index
        self.rack_index = index if rack_index is None else rack_index
        self.ps = ps
        self.full_mask = (1 << fanin) - 1
        self.index_scheme = index_scheme
        self.packet_bytes = packet_bytes
        self.send_window = window_bytes
        self.window = max(1, window_bytes // packet_bytes)
        self.scale = scale
        self.on_complete = on_complete
        self.next_to_send = 0
        self.expected = 0
        self.released_end = 0
        self._ring_seq = [-1] * self.window
        self._ring_payload: list[Payload | None] = [None] * self.window
        self.ahead: dict[int, Payload] = {}
        self.dup_counter = 0
        self._dup_reminded = -1
        self.divert: set[int] = set()
        self.rto = RtoEstimator(rto_min)
        self.rto_cur = self.rto.rto
        self.last_progress = 0
        self._timer_at = None
        self._segments: list[_Segment] = []
        self._seg_starts: list[int] = []
        self._send_seg = 0
        self._dseg = 0
        self._sample_seq = None
        self._sample_at = 0
        self._contribution = Payload.single(index, packet_bytes)
        self._bit0 = 1 << self.rack_index
        self.counters = WorkerCounters()
        self.accepted: list[int] | None = None

    @property
    def in_flight(self) -> int:
        return self.next_to_send - self.expected

    @property
    def in_flight_bytes(self) -> int:
        return self.in_flight * self.packet_bytes

    @property
    def idle(self) -> bool:
        return self.expected >= self.released_end

    def push(self, n_fragments: int, profile: JobProfile, layer: int, now: int,
             token=None) -> list[Packet]:
        """Queue the next ``n_fragments`` consecutive seqs as one tensor.

        Priority is computed once for the whole tensor. Returns what the window
        lets out right away.
        """
        prio = quantize_priority(compute_priority(profile, layer), self.scale)
        return self.push_tagged(n_fragments, prio, now, token)

    def push_tagged(self, n_fragments: int, priority: int, now: int, token=None) -> list[Packet]:
        if n_fragments <= 0:
            raise MisuseError("a tensor needs at least one fragment")
        start = self.released_end
        end = start + n_fragments
        indices = self.index_scheme.indices(self.job, range(start, end)).tolist()
        seg = _Segment(start, end, priority, indices, token)
        self._segments.append(seg)
        self._seg_starts.append(start)
        self.released_end = end
        return self._fill_window(now)

    def _fill_window(self, now: int) -> list[Packet]:
        limit = self.expected + self.window
        if limit > self.released_end:
            limit = self.released_end
        out = []
        nxt = self.next_to_send
        if nxt >= limit:
            return out
        segs = self._segments
        si = self._send_seg
        seg = segs[si]
        job = self.job
        src = self.id
        dst = self.ps
        size = self.packet_bytes
        payload = self._contribution
        bit0 = self._bit0
        divert = self.divert
        if self._sample_seq is None:
            self._sample_seq = nxt
            self._sample_at = now
        while nxt < limit:
            while nxt >= seg.end:
                si += 1
                seg = segs[si]
            if divert and nxt in divert:
                divert.discard(nxt)
                out.append(Packet(RETRANSMIT, job, nxt, 0, 0, 0, 0, 0, payload, src, dst, now,
                                  size, True))
                self.counters.retransmits += 1
            else:
                out.append(Packet(GRADIENT, job, nxt, seg.priority, bit0, 0,
                                  seg.indices[nxt - seg.start], 0, payload, src, dst, now, size))
            nxt += 1
        self._send_seg = si
        self.counters.sent += len(out)
        if self.next_to_send == self.expected:
            self.last_progress = now
        self.next_to_send = nxt
        if self._timer_at is None:
            self._arm_timer(now)
        return out

    def _arm_timer(self, now):
        at = self.last_progress + self.rto_cur
        if at < now:
            at = now
        self._timer_at = at
        self.sim.schedule(at, self._on_timer)

    def _on_timer(self, now):
        self._timer_at = None
        if self.next_to_send <= self.expected:
            return
        if now - self.last_progress >= self.rto_cur:
            self.send(self._reminder(now), now)
            self.rto_cur = self.rto.backoff(self.rto_cur)
            self.last_progress = now
        self._arm_timer(now)

    def _reminder(self, now):
        self.counters.reminders += 1
        self.dup_counter = 0
        if self.sim.tracer is not None:
            self.sim.tracer(now, self.id, "WORKER_REMINDER", self.job, self.expected, "")
        return Packet(REMINDER, self.job, self.expected, src=self.id, dst=self.ps, sent_at=now,
                      byte_size=CONTROL_PACKET_BYTES, reliable=True)

    def _deliver(self, seq, payload, now):
        c = self.counters
        c.delivered += 1
        if self.accepted is not None:
            self.accepted.append(seq)
        if payload.mask != self.full_mask or payload.extra is not None:
            c.bad_results += 1
        if seq == self._sample_seq:
            self.rto.sample(now - self._sample_at)
            self._sample_seq = None
        seg = self._segments[self._dseg]
        if not seg.start <= seq < seg.end:
            self._dseg = bisect_right(self._seg_starts, seq) - 1
            seg = self._segments[self._dseg]
        seg.remaining -= 1
        if seg.remaining == 0 and self.on_complete is not None:
            self.on_complete(self, seg.token, now)

    def on_packet(self, pkt: Packet, now: int) -> list[Packet]:
        """Handle a result, a PS query or a retransmit request."""
        if pkt.job != self.job:
            self.counters.unknown_job += 1
            return []
        kind = pkt.kind
        if kind is RESULT:
            return self._on_result(pkt.seq, pkt.payload, now)
        if kind is QUERY:
            return [self._answer_query(pkt.seq, now)]
        if kind is RETRANSMIT:
            return self._on_retransmit_request(pkt.seq, now)
        raise MisuseError(f"worker cannot handle {kind.name}")

    def receive(self, pkt: Packet, now: int) -> None:
        if pkt.kind is RESULT and pkt.job == self.job:
            out = self._on_result(pkt.seq, pkt.payload, now)
        else:
            out = self.on_packet(pkt, now)
        for p in out:
            self.send(p, now)

    def _cache(self, seq, payload):
        i = seq % self.window
        self._ring_seq[i] = seq
        self._ring_payload[i] = payload

    def _on_result(self, seq, payload, now):
        exp = self.expected
        if seq == exp:
            self._deliver(seq, payload, now)
            i = seq % self.window
            self._ring_seq[i] = seq
            self._ring_payload[i] = payload
            exp += 1
            ahead = self.ahead
            if ahead:
                while exp in ahead:
                    self._cache(exp, ahead.pop(exp))
                    exp += 1
            self.expected = exp
            self.dup_counter = 0
            self.last_progress = now
            self.rto_cur = self.rto.rto
            if exp == self.released_end:
                self._sample_seq = None
            return self._fill_window(now)
        if seq < exp or seq in self.ahead:
            self.counters.redundant_results += 1
            return []
        self._deliver(seq, payload, now)
        self.ahead[seq] = payload
        self.dup_counter += 1
        if self.dup_counter >= DUPACK_THRESHOLD and self._dup_reminded != exp:
            self._dup_reminded = exp
            return [self._reminder(now)]
        return []

    def cached(self, seq: int) -> Payload | None:
        i = seq % self.window
        if self._ring_seq[i] == seq:
            return self._ring_payload[i]
        return self.ahead.get(seq)

    @property
    def result_cache(self) -> dict[int, Payload]:
        """Recently accepted in-order results, at most one window of them."""
        return {q: p for q, p in zip(self._ring_seq, self._ring_payload) if q >= 0}

    def _answer_query(self, seq, now):
        self.counters.query_answers += 1
        p = self.cached(seq)
        if p is not None:
            return Packet(RESULT, self.job, seq, payload=p, src=self.id, dst=self.ps,
                          sent_at=now, byte_size=self.packet_bytes, reliable=True)
        return Packet(QUERY, self.job, seq, src=self.id, dst=self.ps, sent_at=now,
                      byte_size=CONTROL_PACKET_BYTES, reliable=True)

    def _on_retransmit_request(self, seq, now):
        if seq < self.next_to_send:
            self.counters.retransmits += 1
            return [Packet(RETRANSMIT, self.job, seq, payload=self._contribution, src=self.id,
                           dst=self.ps, sent_at=now, byte_size=self.packet_bytes,
                           reliable=True)]
        self.divert.add(seq)
        return []

    def check_window(self) -> None:
        assert self.in_flight_bytes <= self.send_window, (
            f"worker {self.id}: {self.in_flight_bytes}B in flight > window {self.send_window}B")


class PsCounters:
    __slots__ = ("fallbacks", "reminders", "queries", "retransmit_requests",
                 "retransmits_received", "alarms", "stale_discards", "completions",
                 "relayed_results", "unknown_job")

    def __init__(self):
        for name in self.__slots__:
            setattr(self, name, 0)

    def as_dict(self):
        return {n: getattr(self, n) for n in self.__slots__}


NORMAL, QUERYING, RETRANSMITTING = 0, 1, 2


class PsEntry:
    """Partial aggregation state for one ``(job, seq)`` held at the PS."""

    __slots__ = ("bitmap", "partial", "timestamp", "created", "dupack", "rto_cur",
                 "timer_reminders", "worker_reminders", "mode", "pending", "notseen",
                 "result", "timer_at")

    def __init__(self, now: int, rto: int, byte_size: int):
        self.bitmap = 0
        self.partial = Payload(0, None, byte_size)
        self.timestamp = now
        self.created = now
        self.dupack = 0
        self.rto_cur = rto
        self.timer_reminders = 0
        self.worker_reminders = 0
        self.mode = NORMAL
        self.pending = None
        self.notseen = None
        self.result = None
        self.timer_at = None

    def __repr__(self):
        return (f"PsEntry(bitmap={self.bitmap:#x}, partial={self.partial!r}, "
                f"mode={self.mode})")


class PsJob:
    __slots__ = ("job", "workers", "switches", "full_mask", "entries", "closed")

    def __init__(self, job: int, workers: list[int], switches: list[int]):
        self.job = job
        self.workers = list(workers)
        self.switches = list(switches)
        self.full_mask = worker_mask(range(len(workers)))
        self.entries: dict[int, PsEntry] = {}
        self.closed: set[int] = set()


class ParameterServer(Node):
    """PS node serving one or more jobs."""

    def __init__(self, sim, node_id: int, packet_bytes: int = DEFAULT_PACKET_BYTES,
                 rto_min: int = RTO_MIN):
        super().__init__(sim, node_id)
        self.jobs: dict[int, PsJob] = {}
        self.packet_bytes = packet_bytes
        self.rto = RtoEstimator(rto_min)
        self.counters = PsCounters()
        self._worker_slot: dict[int, int] = {}

    def add_job(self, job: int, workers: list[int], switches: list[int]) -> PsJob:
        pj = PsJob(job, workers, switches)
        self.jobs[job] = pj
        for i, w in enumerate(workers):
            self._worker_slot[w] = i
        return pj

    def entry(self, job: int, seq: int) -> PsEntry | None:
        return self.jobs[job].entries.get(seq)

    def live_entries(self) -> int:
        return sum(len(pj.entries) for pj in self.jobs.values())

    def receive(self, pkt: Packet, now: int) -> None:
        for p in self.on_packet(pkt, now):
            self.send(p, now)

    def on_packet(self, pkt: Packet, now: int) -> list[Packet]:
        pj = self.jobs.get(pkt.job)
        if pj is None:
            self.counters.unknown_job += 1
            return []
        kind = pkt.kind
        if kind is PARTIAL_TO_PS:
            return self._on_partial(pj, pkt, now, network=True)
        if kind is RETRANSMIT:
            self.counters.retransmits_received += 1
            return self._on_partial(pj, pkt, now, network=False)
        if kind is REMINDER:
            return self._on_worker_reminder(pj, pkt, now)
        if kind is RESULT:
            return self._on_query_answer(pj, pkt, now, pkt.payload)
        if kind is QUERY:
            return self._on_query_answer(pj, pkt, now, None)
        raise MisuseError(f"PS cannot handle {kind.name}")

    def _trace(self, now, event, job, seq, detail=""):
        if self.sim.tracer is not None:
            self.sim.tracer(now, self.id, event, job, seq, detail)

    def _new_entry(self, pj, seq, now):
        e = PsEntry(now, self.rto.rto, self.packet_bytes)
        pj.entries[seq] = e
        self._trace(now, "PS_CREATE", pj.job, seq)
        return e

    def _arm(self, pj, seq, e, at):
        if e.timer_at is not None and e.timer_at <= at:
            return
        e.timer_at = at
        job = pj.job
        self.sim.schedule(at, lambda t: self._on_entry_timer(job, seq, t))

    def _on_partial(self, pj, pkt, now, network):
        seq = pkt.seq
        c = self.counters
        if network:
            c.fallbacks += 1
        if seq in pj.closed:
            c.stale_discards += 1
            self._trace(now, "PS_STALE", pj.job, seq)
            return []
        e = pj.entries.get(seq)
        out = []
        if e is None:
            e = self._new_entry(pj, seq, now)
        elif network and e.mode == RETRANSMITTING:
            c.stale_discards += 1
            self._trace(now, "PS_STALE", pj.job, seq)
            return []
        p = pkt.payload
        if p.extra is not None or e.bitmap & p.mask:
            c.alarms += 1
            self._trace(now, "PS_ALARM", pj.job, seq, f"dup {p!r}")
            return []
        e.partial = payload_add(e.partial, p)
        e.bitmap |= p.mask
        e.timestamp = now
        e.dupack = 0
        e.timer_reminders = 0
        e.worker_reminders = 0
        e.rto_cur = self.rto.rto
        self._trace(now, "PS_MERGE", pj.job, seq, f"bitmap={e.bitmap:#x}")
        if network:
            out.extend(self._dupack(pj, seq, now))
        if e.bitmap == pj.full_mask:
            out.extend(self._complete(pj, seq, e, now))
        elif e.mode == NORMAL:
            self._arm(pj, seq, e, now + e.rto_cur)
        return out

    def _dupack(self, pj, seq, now):
        out = []
        for s, e in pj.entries.items():
            if s < seq and e.mode == NORMAL and e.dupack < DUPACK_THRESHOLD:
                e.dupack += 1
                if e.dupack == DUPACK_THRESHOLD:
                    out.extend(self._switch_reminders(pj, s, now, "dupack"))
        return out

    def _switch_reminders(self, pj, seq, now, why):
        self.counters.reminders += len(pj.switches)
        self._trace(now, "PS_REMINDER", pj.job, seq, why)
        return [Packet(REMINDER, pj.job, seq, src=self.id, dst=sw, sent_at=now,
                       byte_size=CONTROL_PACKET_BYTES) for sw in pj.switches]

    def _multicast(self, pj, seq, payload, now, targets=None):
        size = self.packet_bytes
        workers = pj.workers if targets is None else targets
        return [Packet(RESULT, pj.job, seq, payload=payload, src=self.id, dst=w, sent_at=now,
                       byte_size=size, reliable=True) for w in workers]

    def _complete(self, pj, seq, e, now):
        self.counters.completions += 1
        self.rto.sample(now - e.created)
        del pj.entries[seq]
        pj.closed.add(seq)
        self._trace(now, "PS_MULTICAST", pj.job, seq, f"{e.partial!r}")
        out = self._multicast(pj, seq, e.partial, now)
        if e.mode == RETRANSMITTING:
            out.extend(self._switch_reminders(pj, seq, now, "flush"))
        return out

    def _start_query(self, pj, seq, e, now):
        e.mode = QUERYING
        e.pending = set(range(len(pj.workers)))
        e.notseen = set()
        self.counters.queries += len(pj.workers)
        self._trace(now, "PS_QUERY", pj.job, seq)
        return [Packet(QUERY, pj.job, seq, src=self.id, dst=w, sent_at=now,
                       byte_size=CONTROL_PACKET_BYTES, reliable=True) for w in pj.workers]

    def _on_worker_reminder(self, pj, pkt, now):
        seq = pkt.seq
        if seq in pj.closed:
            return []
        e = pj.entries.get(seq)
        if e is None:
            e = self._new_entry(pj, seq, now)
            out = self._switch_reminders(pj, seq, now, "worker")
            out.extend(self._start_query(pj, seq, e, now))
            return out
        if e.mode != NORMAL:
            return []
        e.worker_reminders += 1
        out = self._switch_reminders(pj, seq, now, "worker")
        if e.worker_reminders >= 2:
            out.extend(self._start_query(pj, seq, e, now))
        return out

    def _on_query_answer(self, pj, pkt, now, payload):
        seq = pkt.seq
        e = pj.entries.get(seq)
        if e is None or e.mode != QUERYING:
            return []
        slot = self._worker_slot[pkt.src]
        e.pending.discard(slot)
        out = []
        if payload is not None:
            if e.result is None:
                e.result = payload
                targets = [pj.workers[i] for i in sorted(e.notseen)]
                self.counters.relayed_results += len(targets)
                out.extend(self._multicast(pj, seq, payload, now, targets))
        elif e.result is not None:
            self.counters.relayed_results += 1
            out.extend(self._multicast(pj, seq, e.result, now, [pkt.src]))
        else:
            e.notseen.add(slot)
        if e.pending:
            return out
        if e.result is not None:
            del pj.entries[seq]
            pj.closed.add(seq)
            self._trace(now, "PS_RELAYED", pj.job, seq)
            return out
        e.mode = RETRANSMITTING
        missing = [i for i in range(len(pj.workers)) if not e.bitmap >> i & 1]
        self.counters.retransmit_requests += len(missing)
        self._trace(now, "PS_RETRANSMIT_REQ", pj.job, seq, f"workers={missing}")
        out.extend(Packet(RETRANSMIT, pj.job, seq, src=self.id, dst=pj.workers[i], sent_at=now,
                          byte_size=CONTROL_PACKET_BYTES, reliable=True) for i in missing)
        return out

    def _on_entry_timer(self, job, seq, now):
        pj = self.jobs[job]
        e = pj.entries.get(seq)
        if e is None:
            return
        e.timer_at = None
        if e.mode != NORMAL:
            return
        out = self._expire(pj, seq, e, now)
        for p in out:
            self.send(p, now)

    def _expire(self, pj, seq, e, now):
        if now - e.timestamp < e.rto_cur:
            self._arm(pj, seq, e, e.timestamp + e.rto_cur)
            return []
        out = self._switch_reminders(pj, seq, now, "timeout")
        e.timer_reminders += 1
        e.rto_cur = self.rto.backoff(e.rto_cur)
        e.timestamp = now
        if e.timer_reminders >= 3:
            out.extend(self._start_query(pj, seq, e, now))
        else:
            self._arm(pj, seq, e, now + e.rto_cur)
        return out

    def ps_timer(self, now: int) -> list[Packet]:
        """Check every entry against its deadline and emit due reminders.

        DupACK-triggered reminders are sent as soon as the threshold is hit,
        so only timeouts are left to this scan.
        """
        out = []
        for pj in self.jobs.values():
            for seq, e in list(pj.entries.items()):
                if e.mode == NORMAL and now - e.timestamp > e.rto_cur:
                    out.extend(self._expire(pj, seq, e, now))
        return out
