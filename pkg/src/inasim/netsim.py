"""Deterministic discrete-event engine, links and topologies.

Time is an integer number of picoseconds so that a 306 B packet at 100 Gb/s
serialises in exactly 24 480 ps and no float rounding can reorder events.
Exported times are converted to nanoseconds.

Deliveries that land at the same instant are coalesced into one queue entry
holding ``(node, packet)`` pairs in send order; timers are plain callables.
Both share a single heap ordered by ``(fire_at, insertion counter)``.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from heapq import heappop, heappush

import numpy as np

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

RNG_STREAMS = ("loss", "jitter", "start", "coinflip", "misc")


def ns(t_ps: int) -> int:
    return t_ps // PS_PER_NS


def seconds(t_ps: int) -> float:
    return t_ps / PS_PER_S


class LivenessError(RuntimeError):
    """The horizon was reached with aggregations still outstanding."""


def rng_streams(seed: int, names=RNG_STREAMS) -> dict[str, random.Random]:
    """Independent per-purpose generators derived from one root seed.

    Each stream is keyed by its name, so adding a consumer never shifts the
    draws seen by the others.
    """
    out = {}
    for name in names:
        key = [seed & 0xFFFFFFFF, seed >> 32] + list(name.encode())
        ss = np.random.SeedSequence(key)
        out[name] = random.Random(int(ss.generate_state(2, dtype=np.uint64)[0]))
    return out


class Link:
    """Directed store-and-forward link with FIFO serialisation and loss.

    ``drop_if(link, pkt)`` is an optional deterministic loss hook used by
    scripted scenarios; like random loss it never touches reliable packets.
    """

    __slots__ = ("src", "dst", "bandwidth", "latency", "loss_prob", "busy_until",
                 "sent", "delivered", "dropped", "drop_if", "_ser", "_rand", "_sim")

    def __init__(self, sim, src, dst, bandwidth: float, latency: int, loss_prob: float = 0.0):
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= loss_prob <= 1.0:
            raise ValueError(f"loss_prob must be in [0, 1], got {loss_prob}")
        self.src = src
        self.dst = dst
        self.bandwidth = bandwidth
        self.latency = latency
        self.loss_prob = loss_prob
        self.busy_until = 0
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_if = None
        self._ser = {}
        self._sim = sim
        self._rand = sim.rng["loss"].random

    def serialization(self, size: int) -> int:
        ser = self._ser.get(size)
        if ser is None:
            ser = self._ser[size] = size * 8 * PS_PER_S // int(self.bandwidth)
        return ser

    def send(self, pkt, now: int):
        """Queue ``pkt`` at ``now``; returns its arrival time or None if dropped."""
        size = pkt.byte_size
        if size <= 0:
            raise ValueError("packet byte_size must be positive")
        self.sent += 1
        ser = self._ser.get(size)
        if ser is None:
            ser = self.serialization(size)
        busy = self.busy_until
        depart = busy if busy > now else now
        busy = depart + ser
        self.busy_until = busy
        if not pkt.reliable and (
                (self.loss_prob and self._rand() < self.loss_prob)
                or (self.drop_if is not None and self.drop_if(self, pkt))):
            self.dropped += 1
            sim = self._sim
            sim.dropped += 1
            if sim.tracer is not None:
                sim.tracer(now, self.src.id, "DROP", pkt.job, pkt.seq,
                           f"{pkt.kind.name}->{self.dst.id}")
            return None
        self.delivered += 1
        at = busy + self.latency
        self._sim.deliver(at, self.dst, pkt)
        return at


class Simulator:
    """Event loop plus the shared services nodes need (clock, RNG, tracing)."""

    def __init__(self, seed: int = 0, tracer=None):
        self.now = 0
        self.seed = seed
        self.rng = rng_streams(seed)
        self.tracer = tracer
        self.dropped = 0
        self.events = 0
        self._queue = []
        self._counter = 0
        self._outbox = {}

    def schedule(self, at: int, callback) -> None:
        """Run ``callback(now)`` at time ``at`` (never earlier than now)."""
        if at < self.now:
            raise ValueError(f"cannot schedule in the past: {at} < {self.now}")
        self._counter += 1
        heappush(self._queue, (at, self._counter, callback))

    def deliver(self, at: int, node, pkt) -> None:
        box = self._outbox.get(at)
        if box is None:
            self._outbox[at] = [(node, pkt)]
        else:
            box.append((node, pkt))

    def _flush(self):
        q = self._queue
        c = self._counter
        for at, items in self._outbox.items():
            c += 1
            heappush(q, (at, c, items))
        self._counter = c
        self._outbox = {}

    def pending(self) -> int:
        return len(self._queue) + len(self._outbox)

    def run(self, until: int | None = None) -> int:
        """Process events until the queue drains or the next one is past ``until``."""
        if self._outbox:
            self._flush()
        q = self._queue
        n = 0
        while q:
            if until is not None and q[0][0] > until:
                break
            at, _, item = heappop(q)
            self.now = at
            n += 1
            if item.__class__ is list:
                for node, pkt in item:
                    node.receive(pkt, at)
            else:
                item(at)
            if self._outbox:
                self._flush()
        self.events += n
        return self.now


def run_until_quiescent(sim: Simulator, horizon: int | None = None, check=None) -> int:
    """Drain the queue; if ``horizon`` stops the run early, ``check`` decides
    whether the leftover state is a liveness failure."""
    end = sim.run(until=horizon)
    if sim.pending() and check is not None:
        check(end)
    return end


class Node:
    """Base for anything with an id that can send along a routing table."""

    def __init__(self, sim: Simulator, node_id: int):
        self.sim = sim
        self.id = node_id
        self.routes: dict[int, Link] = {}
        self.default_route: Link | None = None

    def link_to(self, dst: int) -> Link:
        link = self.routes.get(dst)
        if link is None:
            link = self.default_route
            if link is None:
                raise KeyError(f"node {self.id} has no route to {dst}")
        return link

    def send(self, pkt, now: int):
        link = self.routes.get(pkt.dst) or self.default_route
        return link.send(pkt, now)

    def receive(self, pkt, now: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError


class SwitchNode(Node):
    """Runs a ``SwitchState`` and forwards everything it does not intercept."""

    def __init__(self, sim: Simulator, state, intercept_level: int = 0):
        super().__init__(sim, state.id)
        self.state = state
        self.intercept_level = intercept_level
        self.forwarded = 0

    def receive(self, pkt, now: int) -> None:
        kind = pkt.kind
        state = self.state
        if kind == 0 and self.intercept_level == 0:
            out = state.process_gradient(pkt, now)
        elif kind == 1 and pkt.level == 1 and self.intercept_level == 1 and pkt.dst != self.id:
            out = state.process_gradient(pkt, now)
        elif kind == 3 and pkt.dst == self.id:
            out = state.process_reminder(pkt, now)
        else:
            self.forwarded += 1
            self.send(pkt, now)
            return
        routes = self.routes
        default = self.default_route
        for p in out:
            (routes.get(p.dst) or default).send(p, now)


@dataclass
class LinkSpec:
    bandwidth: float = 100e9
    latency_ps: int = 5 * PS_PER_US
    loss_prob: float = 0.0


@dataclass
class Topology:
    """Node placement and link wiring.

    ``kind`` is ``single`` (every host hangs off one switch) or ``two-level``
    (workers sit under leaf switches, PSes under the spine).
    """

    kind: str
    workers: list[int]
    pses: list[int]
    switches: list[int]
    root: int
    leaf_of: dict[int, int] = field(default_factory=dict)
    links: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def single_switch(cls, n_workers: int, n_ps: int) -> "Topology":
        workers = list(range(n_workers))
        pses = list(range(n_workers, n_workers + n_ps))
        sw = n_workers + n_ps
        links = []
        for h in workers + pses:
            links += [(h, sw), (sw, h)]
        return cls("single", workers, pses, [sw], sw, {w: sw for w in workers}, links)

    @classmethod
    def two_level(cls, n_workers: int, n_ps: int, workers_per_rack: int) -> "Topology":
        if workers_per_rack <= 0:
            raise ValueError("workers_per_rack must be positive")
        workers = list(range(n_workers))
        pses = list(range(n_workers, n_workers + n_ps))
        n_racks = -(-n_workers // workers_per_rack)
        base = n_workers + n_ps
        leaves = list(range(base, base + n_racks))
        spine = base + n_racks
        links = []
        leaf_of = {}
        for w in workers:
            leaf = leaves[w // workers_per_rack]
            leaf_of[w] = leaf
            links += [(w, leaf), (leaf, w)]
        for leaf in leaves:
            links += [(leaf, spine), (spine, leaf)]
        for p in pses:
            links += [(p, spine), (spine, p)]
        return cls("two-level", workers, pses, leaves + [spine], spine, leaf_of, links)

    @property
    def leaves(self) -> list[int]:
        return [s for s in self.switches if s != self.root]

    def switch_path(self, workers) -> list[int]:
        """Switches a job's traffic can be aggregated at."""
        if self.kind == "single":
            return [self.root]
        return sorted({self.leaf_of[w] for w in workers}) + [self.root]

    def wire(self, sim: Simulator, nodes: dict, spec: LinkSpec) -> dict[tuple[int, int], Link]:
        """Create links and fill every node's routing table."""
        built = {}
        for a, b in self.links:
            built[(a, b)] = Link(sim, nodes[a], nodes[b], spec.bandwidth, spec.latency_ps,
                                 spec.loss_prob)
        if self.kind == "single":
            sw = nodes[self.root]
            for h in self.workers + self.pses:
                nodes[h].default_route = built[(h, self.root)]
                sw.routes[h] = built[(self.root, h)]
        else:
            spine = nodes[self.root]
            for w in self.workers:
                leaf = self.leaf_of[w]
                nodes[w].default_route = built[(w, leaf)]
                nodes[leaf].routes[w] = built[(leaf, w)]
                spine.routes[w] = built[(self.root, leaf)]
            for leaf in self.leaves:
                nodes[leaf].default_route = built[(leaf, self.root)]
                spine.routes[leaf] = built[(self.root, leaf)]
            for p in self.pses:
                nodes[p].default_route = built[(p, self.root)]
                spine.routes[p] = built[(self.root, p)]
        return built
