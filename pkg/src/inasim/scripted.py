"""Hand-driven single-switch scenarios for walkthroughs and golden traces.

Pushes happen at chosen times with chosen priorities, aggregator indices can
be pinned, and individual packets can be dropped by predicate.
"""
from __future__ import annotations

from .core import DEFAULT_PACKET_BYTES, PacketKind
from .endhost import DEFAULT_WINDOW_BYTES, ParameterServer, Worker
from .netsim import PS_PER_MS, PS_PER_NS, PS_PER_US, LinkSpec, Simulator, SwitchNode, Topology
from .switchd import ESA, HashIndex, JobRegistration, SwitchState
from .experiment import TraceLog


class PinnedIndex:
    """Index scheme that maps every (job, seq) through a user function."""

    def __init__(self, pool_size: int, fn):
        self.pool_size = pool_size
        self.fn = fn

    def index(self, job, seq):
        return self.fn(job, seq) % self.pool_size

    def indices(self, job, seqs):
        import numpy as np
        return np.array([self.index(job, s) for s in seqs], dtype=np.int64)


class ScriptedNet:
    """One switch, one PS per job, ``sizes[job]`` workers per job.

    Node ids: workers in job order, then the PSes, then the switch. Workers
    are addressed by ``(job, rank)``.
    """

    def __init__(self, sizes: dict[int, int], policy=ESA, pool_size: int = 16, index=None,
                 seed: int = 0, window_bytes: int = DEFAULT_WINDOW_BYTES,
                 packet_bytes: int = DEFAULT_PACKET_BYTES, latency_ns: int = 5_000,
                 loss_prob: float = 0.0, trace: bool = True):
        self.trace = TraceLog() if trace else None
        self.sim = Simulator(seed, self.trace)
        jobs = sorted(sizes)
        n_workers = sum(sizes[j] for j in jobs)
        self.topo = Topology.single_switch(n_workers, len(jobs))
        self.index = index if index is not None else HashIndex(pool_size)
        state = SwitchState(self.topo.root, self.index.pool_size, policy, self.index,
                            self.sim.rng["coinflip"], self.trace, packet_bytes)
        self.switch = SwitchNode(self.sim, state)
        nodes = {self.topo.root: self.switch}
        self.ps: dict[int, ParameterServer] = {}
        self.workers: dict[tuple[int, int], Worker] = {}
        self.members: dict[int, list[int]] = {}
        w_iter = iter(self.topo.workers)
        for k, j in enumerate(jobs):
            ps_id = self.topo.pses[k]
            ps = ParameterServer(self.sim, ps_id, packet_bytes)
            nodes[ps_id] = self.ps[j] = ps
            ids = [next(w_iter) for _ in range(sizes[j])]
            self.members[j] = ids
            state.register(JobRegistration(j, ps_id, ids, len(ids)))
            ps.add_job(j, ids, [self.topo.root])
            for rank, wid in enumerate(ids):
                w = Worker(self.sim, wid, j, rank, ps_id, len(ids), self.index, window_bytes,
                           packet_bytes)
                w.accepted = []
                nodes[wid] = self.workers[(j, rank)] = w
        self.nodes = nodes
        self.links = self.topo.wire(self.sim, nodes, LinkSpec(100e9, latency_ns * PS_PER_NS,
                                                              loss_prob))

    @property
    def state(self) -> SwitchState:
        return self.switch.state

    def worker(self, job: int, rank: int) -> Worker:
        return self.workers[(job, rank)]

    def push(self, job: int, ranks, n: int, priority: int, at_us: float) -> None:
        """Schedule ``n`` fresh fragments from each worker rank in ``ranks``."""
        at = int(at_us * PS_PER_US)
        for r in ranks:
            w = self.worker(job, r)
            self.sim.schedule(at, lambda now, w=w: self._send_all(
                w, w.push_tagged(n, priority, now), now))

    @staticmethod
    def _send_all(node, pkts, now):
        for p in pkts:
            node.send(p, now)

    def drop_once(self, pred) -> list:
        """Drop the first unreliable packet for which ``pred(link, pkt)`` holds."""
        hits = []

        def hook(link, pkt):
            if not hits and pred(link, pkt):
                hits.append((link.src.id, link.dst.id, PacketKind(pkt.kind).name, pkt.job,
                             pkt.seq))
                return True
            return False

        for link in self.links.values():
            link.drop_if = hook
        return hits

    def run(self, until_ms: float = 50.0) -> int:
        return self.sim.run(until=int(until_ms * PS_PER_MS))

    def events(self, kinds=None, job=None):
        """``(node_role, event, job, seq)`` tuples in trace order."""
        out = []
        for t, node, ev, j, s, _ in self.trace.rows:
            if kinds is not None and ev not in kinds:
                continue
            if job is not None and j != job:
                continue
            out.append((self.role(node), ev, j, s))
        return out

    def role(self, node: int) -> str:
        if node == self.topo.root:
            return "switch"
        for j, ps in self.ps.items():
            if ps.id == node:
                return f"ps{j}"
        return "worker"

    def exactly_once(self, fragments: dict[int, int]) -> list[str]:
        """Problems found when checking every worker got seqs ``0..n-1`` once, intact."""
        problems = []
        for (j, r), w in sorted(self.workers.items()):
            n = fragments.get(j, 0)
            if sorted(w.accepted) != list(range(n)):
                problems.append(f"job {j} rank {r}: accepted {sorted(w.accepted)}")
            if w.counters.bad_results:
                problems.append(f"job {j} rank {r}: {w.counters.bad_results} bad results")
        for j, ps in self.ps.items():
            if ps.counters.alarms:
                problems.append(f"ps of job {j}: {ps.counters.alarms} multiplicity alarms")
        return problems


def preemption_example() -> tuple[ScriptedNet, dict[int, int]]:
    """Two jobs on one aggregator; the high-priority job evicts the other.

    Job 1 has four workers (ranks 2 and 3 straggle), job 2 two workers at
    higher priority. Returns the net and the fragment count per job.
    """
    net = ScriptedNet({1: 4, 2: 2}, index=PinnedIndex(4, lambda j, s: 0))
    net.push(1, [0, 1], 1, 100, 0)
    net.push(2, [0], 1, 200, 10)
    net.push(2, [1], 1, 200, 12)
    net.push(1, [2, 3], 1, 100, 30)
    return net, {1: 1, 2: 1}


def reminder_example() -> tuple[ScriptedNet, dict[int, int]]:
    """Job 1's first fragment fails to preempt and must be pulled by a reminder.

    Job 2's first worker holds aggregators 0..3 at high priority. Job 1 (three
    workers) loses seq 0 to the PS, its later seqs trigger a dupACK at the PS.
    """
    net = ScriptedNet({1: 3, 2: 2}, index=PinnedIndex(4, lambda j, s: s))
    net.push(2, [0], 4, 200, 0)
    net.push(1, [0], 1, 100, 10)
    net.push(2, [1], 1, 200, 20)
    net.push(1, [1, 2], 1, 100, 40)
    net.push(1, [0], 3, 100, 60)
    net.push(1, [1, 2], 3, 100, 200)
    net.push(2, [1], 3, 200, 300)
    return net, {1: 4, 2: 4}


def single_job_example() -> tuple[ScriptedNet, dict[int, int]]:
    net = ScriptedNet({1: 2})
    net.push(1, [0, 1], 8, 100, 0)
    return net, {1: 8}


# One targeted drop per loss case: (scenario builder, predicate factory).
LOSS_SCENARIOS = {
    1: (single_job_example, lambda n: lambda link, p: p.kind == PacketKind.GRADIENT
        and p.seq == 0 and link.src is n.worker(1, 1)),
    2: (single_job_example, lambda n: lambda link, p: p.kind == PacketKind.RESULT
        and p.seq == 0 and link.dst is n.worker(1, 1)),
    3: (reminder_example, lambda n: lambda link, p: p.job == 1 and p.seq == 0
        and link.dst is n.ps[1]),
    4: (preemption_example, lambda n: lambda link, p: p.kind == PacketKind.PARTIAL_TO_PS
        and link.dst is n.ps[1]),
    5: (preemption_example, lambda n: lambda link, p: p.kind == PacketKind.GRADIENT
        and link.src is n.worker(1, 2)),
}


def run_loss_case(case: int, until_ms: float = 30.0):
    """Run one loss scenario; returns ``(net, dropped packets, fragment counts)``."""
    build, pred = LOSS_SCENARIOS[case]
    net, frags = build()
    hits = net.drop_once(pred(net))
    net.run(until_ms)
    return net, hits, frags


def random_two_job_run(policy, loss_prob: float, seed: int, fragments: int = 64,
                       workers: int = 4, pool_size: int = 32, until_ms: float = 500.0):
    """Two jobs with random priorities and start offsets on a small shared pool.

    Returns the finished net; callers check ``exactly_once`` on it.
    """
    import random

    rng = random.Random(seed * 7919 + 1)
    net = ScriptedNet({1: workers, 2: workers}, policy=policy, pool_size=pool_size, seed=seed,
                      loss_prob=loss_prob, trace=False)
    for j in (1, 2):
        prio = rng.randrange(256)
        for r in range(workers):
            net.push(j, [r], fragments, prio, rng.uniform(0, 50))
    net.run(until_ms)
    return net
