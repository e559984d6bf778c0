"""Two-layer DNN training workloads and per-job timing metrics.

Each iteration a worker pushes four tensor partitions in the order
``[L2P1, L1P1, L1P2, L2P2]``. Layer-1 computation starts once the worker holds
both layer-1 results; layer-2 computation starts when layer-1 computation is
done and both layer-2 results are in. The next iteration's communication
starts when layer-2 computation finishes, after a per-worker straggler delay.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .netsim import PS_PER_S
from .priority import JobProfile, estimate_remaining_time

PARTITION_ORDER = ((2, 0), (1, 0), (1, 1), (2, 1))  # (layer, partition within layer)
DEFAULT_WARMUP = 2
DEFAULT_ITERATIONS = 10
DEFAULT_BANDWIDTH = 100e9


class EmptyResultError(ValueError):
    """No measured iteration completed, so there is nothing to report."""


@dataclass(frozen=True)
class DnnModel:
    """A two-layer model with two equal tensor partitions per layer."""

    name: str
    partition_bytes: int
    comp_time: float
    layer_count: int = 2
    partitions_per_layer: int = 2

    def __post_init__(self):
        if self.partition_bytes <= 0:
            raise ValueError(f"partition_bytes must be > 0, got {self.partition_bytes}")
        if not self.comp_time > 0:
            raise ValueError(f"comp_time must be > 0, got {self.comp_time}")

    @property
    def iteration_bytes(self) -> int:
        return self.partition_bytes * self.partitions_per_layer * self.layer_count

    def comm_time(self, bandwidth: float = DEFAULT_BANDWIDTH) -> float:
        return self.iteration_bytes * 8 / bandwidth

    def iteration_comp_time(self) -> float:
        return self.comp_time * self.layer_count

    def comm_comp_ratio(self, bandwidth: float = DEFAULT_BANDWIDTH) -> float:
        return self.comm_time(bandwidth) / self.iteration_comp_time()

    def packets_per_partition(self, packet_bytes: int) -> int:
        return -(-self.partition_bytes // packet_bytes)

    def scaled(self, factor: float) -> "DnnModel":
        """Same model with partition size and compute time scaled by ``factor``."""
        return DnnModel(self.name, max(1, round(self.partition_bytes * factor)),
                        self.comp_time * factor, self.layer_count, self.partitions_per_layer)


DNN_A = DnnModel("dnnA", 4_000_000, 0.32e-3)
DNN_B = DnnModel("dnnB", 2_000_000, 0.64e-3)
PRESETS = {"dnnA": (DNN_A,), "dnnB": (DNN_B,), "mixAB": (DNN_A, DNN_B)}


def preset_models(name: str, n_jobs: int) -> list[DnnModel]:
    """Models for ``n_jobs`` jobs; mixed presets alternate their members."""
    try:
        cycle = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return [cycle[i % len(cycle)] for i in range(n_jobs)]


@dataclass
class JobSpec:
    job: int
    model: DnnModel
    workers: tuple[int, ...]
    ps: int
    start_time: int = 0
    iterations: int = DEFAULT_ITERATIONS + DEFAULT_WARMUP
    jitter_bound: int = 300 * PS_PER_S // 1_000_000
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        self.workers = tuple(self.workers)
        if not self.workers:
            raise ValueError(f"job {self.job} has no workers")
        if len(set(self.workers)) != len(self.workers):
            raise ValueError(f"job {self.job} lists a worker twice")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.start_time < 0 or self.jitter_bound < 0:
            raise ValueError("start_time and jitter_bound must be >= 0")


def check_disjoint(jobs) -> None:
    seen = {}
    for j in jobs:
        for w in j.workers:
            if w in seen:
                raise ValueError(f"worker {w} is placed in both job {seen[w]} and job {j.job}")
            seen[w] = j.job


@dataclass
class IterationRecord:
    job: int
    iteration: int
    comm_start: int
    comp_done: int

    def __post_init__(self):
        assert self.comp_done >= self.comm_start, (
            f"job {self.job} iteration {self.iteration}: comp_done before comm_start")

    @property
    def jct(self) -> int:
        return self.comp_done - self.comm_start


@dataclass(frozen=True)
class Push:
    """One scheduled tensor push of one worker."""

    worker: int
    release: int
    partition: int
    layer: int
    first_seq: int
    n_packets: int


def emit_iteration(job: JobSpec, iteration: int, begin: dict[int, int],
                   jitter: dict[int, int], packet_bytes: int) -> list[Push]:
    """Push schedule of one iteration.

    ``begin`` maps a worker to the time its previous iteration finished
    computing (or the job start), ``jitter`` to its straggler delay.
    """
    npp = job.model.packets_per_partition(packet_bytes)
    per_iter = npp * len(PARTITION_ORDER)
    out = []
    for w in job.workers:
        release = begin[w] + jitter.get(w, 0)
        for k, (layer, _) in enumerate(PARTITION_ORDER):
            out.append(Push(w, release, k, layer, iteration * per_iter + k * npp, npp))
    return out


@dataclass
class _WorkerRun:
    iteration: int = 0
    done: list = field(default_factory=lambda: [False] * 4)
    l1_started: bool = False
    l1_done_at: int | None = None
    l2_started: bool = False
    release: int = 0
    last_result: int = 0
    active: int = 0


class JobDriver:
    """Runs one job's iterations on its ``Worker`` objects.

    ``remaining`` chooses the T_j estimate: ``known`` uses the remaining
    communication plus computation time, ``attained`` the service so far.
    """

    def __init__(self, sim, spec: JobSpec, workers, packet_bytes: int,
                 bandwidth: float = DEFAULT_BANDWIDTH, remaining: str = "known",
                 jitter_rng=None, tracer=None):
        if remaining not in ("known", "attained"):
            raise ValueError(f"remaining must be 'known' or 'attained', got {remaining!r}")
        self.sim = sim
        self.spec = spec
        self.workers = list(workers)
        self.packet_bytes = packet_bytes
        self.bandwidth = bandwidth
        self.remaining = remaining
        self.jitter_rng = jitter_rng
        self.npp = spec.model.packets_per_partition(packet_bytes)
        self.comp_ps = round(spec.model.comp_time * PS_PER_S)
        self._runs = {w.id: _WorkerRun() for w in self.workers}
        self._release: dict[int, dict[int, int]] = {}
        self._comp_done: dict[int, dict[int, int]] = {}
        self._active: dict[int, list[int]] = {}
        self.finished_workers = 0
        m = spec.model
        self._comm_s = m.comm_time(bandwidth)
        self._comp_s = m.iteration_comp_time()
        for w in self.workers:
            w.on_complete = self._on_partition
        self.schedule_log: list[tuple[int, int, int, int]] = []

    @property
    def done(self) -> bool:
        return self.finished_workers == len(self.workers)

    def start(self) -> None:
        t = self.spec.start_time
        for w in self.workers:
            self.sim.schedule(t, lambda now, w=w: self._begin(w, now))

    def _jitter(self) -> int:
        bound = self.spec.jitter_bound
        if not bound or self.jitter_rng is None:
            return 0
        return int(self.jitter_rng.random() * bound)

    def _begin(self, w, now):
        run = self._runs[w.id]
        release = now + self._jitter()
        run.release = release
        self._release.setdefault(run.iteration, {})[w.id] = release
        if release == now:
            self._push_all(w, now)
        else:
            self.sim.schedule(release, lambda t: self._push_all(w, t))

    def profile(self, iteration: int, partition: int, now: int) -> JobProfile:
        spec = self.spec
        left_iters = spec.iterations - iteration
        if self.remaining == "known":
            frac = partition / len(PARTITION_ORDER)
            t = self._comm_s * (left_iters - frac) + self._comp_s * left_iters
        else:
            t = None
        t = estimate_remaining_time(t, (now - spec.start_time) / PS_PER_S)
        return JobProfile(spec.job, t, spec.model.layer_count, self._comm_s, self._comp_s)

    def _push_all(self, w, now):
        run = self._runs[w.id]
        i = run.iteration
        for k, (layer, _) in enumerate(PARTITION_ORDER):
            prof = self.profile(i, k, now)
            pkts = w.push(self.npp, prof, layer, now, token=(i, k))
            self.schedule_log.append((now, w.id, i, k))
            for p in pkts:
                w.send(p, now)

    def _on_partition(self, w, token, now):
        i, k = token
        run = self._runs[w.id]
        assert i == run.iteration, f"worker {w.id}: result for iteration {i} during {run.iteration}"
        run.done[k] = True
        run.last_result = now
        d = run.done
        if not run.l1_started and d[1] and d[2]:
            run.l1_started = True
            self.sim.schedule(now + self.comp_ps, lambda t: self._l1_done(w, t))
        self._maybe_l2(w, now)

    def _l1_done(self, w, now):
        self._runs[w.id].l1_done_at = now
        self._maybe_l2(w, now)

    def _maybe_l2(self, w, now):
        run = self._runs[w.id]
        if run.l2_started or run.l1_done_at is None or not (run.done[0] and run.done[3]):
            return
        run.l2_started = True
        self.sim.schedule(now + self.comp_ps, lambda t: self._l2_done(w, t))

    def _l2_done(self, w, now):
        run = self._runs[w.id]
        i = run.iteration
        self._comp_done.setdefault(i, {})[w.id] = now
        self._active.setdefault(i, []).append(run.last_result - run.release)
        run.iteration += 1
        run.done = [False] * 4
        run.l1_started = run.l2_started = False
        run.l1_done_at = None
        if run.iteration < self.spec.iterations:
            self._begin(w, now)
        else:
            self.finished_workers += 1

    def records(self) -> list[IterationRecord]:
        out = []
        n = len(self.workers)
        for i in sorted(self._comp_done):
            done = self._comp_done[i]
            if len(done) < n:
                continue
            out.append(IterationRecord(self.spec.job, i, min(self._release[i].values()),
                                       max(done.values())))
        return out

    def active_times(self, include_warmup: bool = False) -> list[int]:
        """Per worker-iteration active communication time in picoseconds."""
        start = 0 if include_warmup else self.spec.warmup
        return [a for i, acts in sorted(self._active.items()) if i >= start for a in acts]

    def iteration_result_bytes(self) -> int:
        return self.npp * len(PARTITION_ORDER) * self.packet_bytes


def compute_jct(records, warmup: int = DEFAULT_WARMUP) -> tuple[dict[int, float], float]:
    """Per-job mean JCT over measured iterations, and the mean across jobs (ps)."""
    per_job: dict[int, list[int]] = {}
    for r in records:
        if r.iteration >= warmup:
            per_job.setdefault(r.job, []).append(r.jct)
    if not per_job:
        raise EmptyResultError("no completed iterations beyond warm-up")
    means = {j: sum(v) / len(v) for j, v in sorted(per_job.items())}
    return means, sum(means.values()) / len(means)


def compute_utilization(drivers, bandwidth: float = DEFAULT_BANDWIDTH,
                        warmup: int = DEFAULT_WARMUP) -> tuple[dict[int, float], float]:
    """Per-job utilization (aggregation throughput / line rate) and the job mean.

    Throughput is the result bytes a worker receives in one iteration divided
    by that worker's active communication time (first send to last result).
    """
    per_job = {}
    for d in drivers:
        acts = d.active_times() or ([] if warmup else d.active_times(True))
        if not acts:
            raise EmptyResultError(f"job {d.spec.job} has no measured iterations")
        if min(acts) <= 0:
            raise ValueError(f"job {d.spec.job} has zero active communication time")
        nbytes = d.iteration_result_bytes()
        vals = [nbytes * 8 / (a / PS_PER_S) / bandwidth for a in acts]
        per_job[d.spec.job] = sum(vals) / len(vals)
    if not per_job:
        raise EmptyResultError("no jobs")
    return per_job, sum(per_job.values()) / len(per_job)


def pipeline_bound(model: DnnModel, packet_bytes: int, window_bytes: int, bandwidth: float,
                   rtt: float) -> float:
    """Analytic no-contention JCT of one iteration in seconds.

    Throughput is the lesser of line rate and one window per round trip; the
    last partition's results arrive one RTT after its last byte leaves.
    """
    npp = model.packets_per_partition(packet_bytes)
    ser = packet_bytes * 8 / bandwidth
    window = max(1, window_bytes // packet_bytes)
    per_pkt = max(ser, (rtt + ser) / window)
    comm_end = 4 * npp * per_pkt + rtt + ser
    l1_results = 3 * npp * per_pkt + rtt + ser
    l1_done = l1_results + model.comp_time
    return max(l1_done, comm_end) + model.comp_time


__all__ = [
    "DnnModel", "DNN_A", "DNN_B", "PRESETS", "preset_models", "JobSpec", "check_disjoint",
    "IterationRecord", "Push", "emit_iteration", "JobDriver", "compute_jct",
    "compute_utilization", "pipeline_bound", "EmptyResultError", "PARTITION_ORDER",
]
