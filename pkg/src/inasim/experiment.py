"""Scenario configuration, simulation assembly and run reporting."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .core import DEFAULT_PACKET_BYTES, MAX_FANIN, SWITCHML_PACKET_BYTES, FanInError
from .endhost import DEFAULT_WINDOW_BYTES, ParameterServer, Worker
from .netsim import (
    PS_PER_MS,
    PS_PER_NS,
    PS_PER_S,
    PS_PER_US,
    LinkSpec,
    LivenessError,
    Simulator,
    SwitchNode,
    Topology,
)
from .priority import QuantScale, compute_priority
from .switchd import (
    AGGREGATOR_FOOTPRINT,
    AllocationPolicy,
    HashIndex,
    JobRegistration,
    PartitionIndex,
    PolicyKind,
    SwitchState,
    pool_size_for,
)
from .workload import (
    PARTITION_ORDER,
    JobDriver,
    JobSpec,
    check_disjoint,
    compute_jct,
    compute_utilization,
    preset_models,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("policy", "seed", "jobs", "workers", "mean_jct_ns", "utilization", "reminders",
               "preemptions", "ps_fallbacks")
TRACE_COLUMNS = ("time_ns", "node", "event", "job", "seq", "detail")


class ConfigError(ValueError):
    """A scenario setting is invalid; the message names the key."""


@dataclass
class ScenarioConfig:
    """Everything needed to build one scenario. Times are in the unit named
    by the field suffix; sizes are bytes; bandwidth is bits per second.

    ``workload_scale`` shrinks partition size, compute time, straggler jitter
    and start-time spread together, keeping their ratios; link parameters,
    window and memory are untouched.
    """

    preset: str = "dnnA"
    jobs: int = 8
    workers_per_job: int = 8
    workers: int | None = None
    topology: str = "single"
    workers_per_rack: int = 8
    policy: str = "esa"
    memory_bytes: int = 5_000_000
    aggregator_bytes: int = AGGREGATOR_FOOTPRINT
    packet_bytes: int | None = None
    window_bytes: int = DEFAULT_WINDOW_BYTES
    bandwidth: float = 100e9
    latency_ns: int = 5_000
    loss_prob: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    iterations: int = 10
    warmup: int = 2
    quant_k: float = 16.0
    quant_p_ref: float | str = "auto"
    remaining: str = "known"
    jitter_us: float = 300.0
    start_spread_us: float = 1000.0
    rto_min_us: float = 1000.0
    workload_scale: float = 1.0
    horizon_ms: float | None = None
    out_dir: str | None = None

    @property
    def policy_obj(self) -> AllocationPolicy:
        return AllocationPolicy.parse(self.policy)

    @property
    def effective_packet_bytes(self) -> int:
        if self.policy_obj.kind is PolicyKind.SWITCHML:
            return SWITCHML_PACKET_BYTES
        return self.packet_bytes or DEFAULT_PACKET_BYTES

    @property
    def pool_size(self) -> int:
        return pool_size_for(self.memory_bytes, self.aggregator_bytes)

    def with_policy(self, policy: str) -> "ScenarioConfig":
        d = asdict(self)
        d["policy"] = policy
        if AllocationPolicy.parse(policy).kind is not PolicyKind.SWITCHML:
            d["packet_bytes"] = self.packet_bytes if self.packet_bytes != SWITCHML_PACKET_BYTES \
                else None
        cfg = ScenarioConfig(**d)
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "ScenarioConfig":
        d = asdict(self)
        d.update(changes)
        cfg = ScenarioConfig(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(self.jobs >= 1, "jobs", "must be >= 1")
        need(self.workers_per_job >= 1, "workers_per_job", "must be >= 1")
        total = self.jobs * self.workers_per_job
        if self.workers is None:
            self.workers = total
        need(self.workers == total, "workers",
             f"{self.workers} workers cannot be split into {self.jobs} disjoint jobs of "
             f"{self.workers_per_job}")
        need(self.topology in ("single", "two-level"), "topology",
             "must be 'single' or 'two-level'")
        try:
            policy = AllocationPolicy.parse(self.policy)
        except ValueError as e:
            raise ConfigError(f"policy: {e}") from None
        if self.topology == "single":
            if self.workers_per_job > MAX_FANIN:
                raise FanInError(f"workers_per_job: fan-in {self.workers_per_job} does not fit a "
                                 f"{MAX_FANIN}-bit bitmap")
        else:
            need(self.workers_per_rack >= 1, "workers_per_rack", "must be >= 1")
            if self.workers_per_rack > MAX_FANIN:
                raise FanInError(f"workers_per_rack: fan-in {self.workers_per_rack} does not fit "
                                 f"a {MAX_FANIN}-bit bitmap")
            racks = -(-self.workers_per_job // self.workers_per_rack) + 1
            if racks > MAX_FANIN:
                raise FanInError(f"workers_per_job: a job spans {racks} racks, more than the "
                                 f"{MAX_FANIN}-bit bitmap allows")
        if policy.kind is PolicyKind.SWITCHML and self.packet_bytes not in (
                None, SWITCHML_PACKET_BYTES):
            log.warning("packet_bytes: SwitchML uses %d B packets; overriding %s",
                        SWITCHML_PACKET_BYTES, self.packet_bytes)
            self.packet_bytes = SWITCHML_PACKET_BYTES
        for key in ("memory_bytes", "aggregator_bytes", "window_bytes", "bandwidth",
                    "latency_ns", "iterations", "quant_k", "rto_min_us",
                    "workload_scale"):
            need(getattr(self, key) > 0, key, "must be positive")
        if self.packet_bytes is not None:
            need(self.packet_bytes > 0, "packet_bytes", "must be positive")
        if self.quant_p_ref != "auto":
            need(isinstance(self.quant_p_ref, (int, float)) and self.quant_p_ref > 0,
                 "quant_p_ref", "must be 'auto' or a positive number")
        need(self.warmup >= 0, "warmup", "must be >= 0")
        need(self.iterations > 0, "iterations", "must be positive")
        need(0.0 <= self.loss_prob <= 1.0, "loss_prob", "must be in [0, 1]")
        need(self.jitter_us >= 0, "jitter_us", "must be >= 0")
        need(self.start_spread_us >= 0, "start_spread_us", "must be >= 0")
        need(self.remaining in ("known", "attained"), "remaining", "must be known|attained")
        need(self.pool_size >= 1, "memory_bytes", "smaller than one aggregator")
        if policy.kind is PolicyKind.SWITCHML:
            need(self.pool_size >= self.jobs, "memory_bytes",
                 "static partitioning needs at least one aggregator per job")
        need(len(self.seeds) >= 1, "seeds", "need at least one seed")
        preset_models(self.preset, self.jobs)


def load_config(path) -> ScenarioConfig:
    """Read a JSON scenario; unknown keys are rejected by name."""
    with open(path) as f:
        raw = json.load(f)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ScenarioConfig:
    known = {f.name for f in fields(ScenarioConfig)}
    bad = sorted(set(raw) - known)
    if bad:
        raise ConfigError(f"{bad[0]}: unknown configuration key")
    raw = dict(raw)
    if "seeds" in raw:
        raw["seeds"] = parse_seeds(raw["seeds"])
    cfg = ScenarioConfig(**raw)
    cfg.validate()
    return cfg


def parse_seeds(spec) -> list[int]:
    """``[1, 2]``, ``3``, ``"1..5"`` or ``"1,4,7"``."""
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, (list, tuple)):
        return [int(s) for s in spec]
    s = str(spec).strip()
    if ".." in s:
        a, b = s.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ConfigError(f"seeds: empty range {s!r}")
        return list(range(lo, hi + 1))
    return [int(x) for x in s.split(",") if x.strip()]


class TraceLog:
    """In-memory event trace; rows are ``(time_ps, node, event, job, seq, detail)``."""

    def __init__(self):
        self.rows: list[tuple] = []

    def __call__(self, now, node, event, job, seq, detail=""):
        self.rows.append((now, node, event, job, seq, detail))

    def lines(self):
        for t, node, event, job, seq, detail in self.rows:
            yield f"{t // PS_PER_NS},{node},{event},{job},{seq},{detail}"

    def events(self, *, node=None, job=None) -> list[str]:
        return [r[2] for r in self.rows
                if (node is None or r[1] == node) and (job is None or r[3] == job)]


@dataclass
class Scenario:
    """A wired simulation ready to run."""

    config: ScenarioConfig
    seed: int
    sim: Simulator
    topology: Topology
    switches: dict[int, SwitchNode]
    pses: dict[int, ParameterServer]
    workers: dict[int, Worker]
    drivers: list[JobDriver]
    links: dict
    trace: TraceLog | None

    def run(self) -> int:
        cfg = self.config
        horizon = self.horizon()
        end = self.sim.run(until=horizon)
        if not all(d.done for d in self.drivers):
            stuck = [d.spec.job for d in self.drivers if not d.done]
            live = sum(p.live_entries() for p in self.pses.values())
            raise LivenessError(
                f"policy {cfg.policy} seed {self.seed}: jobs {stuck} unfinished at "
                f"{end / PS_PER_MS:.3f} ms ({live} PS entries live)")
        return end

    def horizon(self) -> int:
        cfg = self.config
        if cfg.horizon_ms is not None:
            return int(cfg.horizon_ms * PS_PER_MS)
        per_iter = max(d.spec.model.comm_time(cfg.bandwidth) + d.spec.model.iteration_comp_time()
                       for d in self.drivers)
        return int((cfg.start_spread_us * 1e-6 + 100 * per_iter * cfg.iterations + 1.0) * PS_PER_S)


def build_scenario(cfg: ScenarioConfig, seed: int, trace: bool = False) -> Scenario:
    """Wire nodes, links, switch registrations and job drivers for one seed."""
    cfg.validate()
    tracer = TraceLog() if trace else None
    sim = Simulator(seed, tracer)
    policy = cfg.policy_obj
    pkt = cfg.effective_packet_bytes
    n_workers = cfg.jobs * cfg.workers_per_job
    if cfg.topology == "single":
        topo = Topology.single_switch(n_workers, cfg.jobs)
    else:
        topo = Topology.two_level(n_workers, cfg.jobs, cfg.workers_per_rack)
    pool = cfg.pool_size
    job_ids = list(range(cfg.jobs))
    if policy.kind is PolicyKind.SWITCHML:
        index = PartitionIndex(pool, job_ids)
    else:
        index = HashIndex(pool)
    nodes = {}
    switches = {}
    for sid in topo.switches:
        state = SwitchState(sid, pool, policy, index, sim.rng["coinflip"], tracer, pkt)
        node = SwitchNode(sim, state, 1 if (topo.kind != "single" and sid == topo.root) else 0)
        nodes[sid] = switches[sid] = node
    rto_min = int(cfg.rto_min_us * PS_PER_US)
    pses = {}
    for p in topo.pses:
        nodes[p] = pses[p] = ParameterServer(sim, p, pkt, rto_min)
    models = preset_models(cfg.preset, cfg.jobs)
    start_rng = sim.rng["start"]
    jitter_rng = sim.rng["jitter"]
    specs = []
    workers = {}
    drivers = []
    for j in job_ids:
        members = topo.workers[j * cfg.workers_per_job:(j + 1) * cfg.workers_per_job]
        ps = topo.pses[j]
        model = models[j]
        ws = cfg.workload_scale
        if ws != 1.0:
            model = model.scaled(ws)
        start = int(start_rng.random() * cfg.start_spread_us * ws * PS_PER_US)
        spec = JobSpec(j, model, tuple(members), ps, start, cfg.iterations + cfg.warmup,
                       int(cfg.jitter_us * ws * PS_PER_US), cfg.warmup)
        specs.append(spec)
        path = topo.switch_path(members)
        _register(topo, switches, j, ps, members)
        pses[ps].add_job(j, members, path)
        leaf_rank = {}
        job_workers = []
        for i, w in enumerate(members):
            if topo.kind == "single":
                rack_index = i
            else:
                leaf = topo.leaf_of[w]
                rack_index = leaf_rank.setdefault(leaf, {}).setdefault(w, len(leaf_rank[leaf]))
            wk = Worker(sim, w, j, i, ps, len(members), index, cfg.window_bytes, pkt, rack_index,
                        rto_min)
            nodes[w] = workers[w] = wk
            job_workers.append(wk)
        drivers.append(JobDriver(sim, spec, job_workers, pkt, cfg.bandwidth, cfg.remaining,
                                 jitter_rng))
    check_disjoint(specs)
    p_ref = auto_p_ref(drivers) if cfg.quant_p_ref == "auto" else cfg.quant_p_ref
    scale = QuantScale(cfg.quant_k, p_ref)
    for w in workers.values():
        w.scale = scale
    links = topo.wire(sim, nodes, LinkSpec(cfg.bandwidth, cfg.latency_ns * PS_PER_NS,
                                           cfg.loss_prob))
    for d in drivers:
        d.start()
    return Scenario(cfg, seed, sim, topo, switches, pses, workers, drivers, links, tracer)


def auto_p_ref(drivers) -> float:
    """Geometric midpoint of the raw priorities the drivers can produce.

    Centres the log quantizer on the scenario so tags do not pile up at 0 or
    255. The extremes are taken over first and last iteration, every
    partition, at each job's start time.
    """
    raws = []
    for d in drivers:
        spec = d.spec
        for i in (0, spec.iterations - 1):
            for k, (layer, _) in enumerate(PARTITION_ORDER):
                raws.append(compute_priority(d.profile(i, k, spec.start_time), layer))
    return math.sqrt(min(raws) * max(raws))


def _register(topo, switches, job, ps, members):
    if topo.kind == "single":
        reg = JobRegistration(job, ps, list(members), len(members))
        switches[topo.root].state.register(reg)
        return
    racks = {}
    for w in members:
        racks.setdefault(topo.leaf_of[w], []).append(w)
    leaves = sorted(racks)
    for bit, leaf in enumerate(leaves):
        ws = racks[leaf]
        switches[leaf].state.register(JobRegistration(job, ps, ws, len(ws), 1, 0, False, bit))
    switches[topo.root].state.register(
        JobRegistration(job, ps, list(members), 1, len(leaves), 1, True, 0))


def _sum_counters(objs) -> dict[str, int]:
    out: dict[str, int] = {}
    for o in objs:
        for k, v in o.counters.as_dict().items():
            out[k] = out.get(k, 0) + v
    return out


@dataclass
class RunReport:
    policy: str
    seed: int
    jobs: int
    workers: int
    job_jct_ns: dict[int, float]
    mean_jct_ns: float
    job_utilization: dict[int, float]
    utilization: float
    switch_counters: dict[str, int]
    ps_counters: dict[str, int]
    worker_counters: dict[str, int]
    digest: str
    wall_s: float
    events: int
    end_ns: int
    trace: TraceLog | None = None

    @property
    def reminders(self) -> int:
        return self.ps_counters["reminders"] + self.worker_counters["reminders"]

    @property
    def preemptions(self) -> int:
        return self.switch_counters["preemptions"]

    @property
    def ps_fallbacks(self) -> int:
        return self.ps_counters["fallbacks"]

    def csv_row(self) -> dict:
        return {"policy": self.policy, "seed": self.seed, "jobs": self.jobs,
                "workers": self.workers, "mean_jct_ns": round(self.mean_jct_ns),
                "utilization": f"{self.utilization:.6f}", "reminders": self.reminders,
                "preemptions": self.preemptions, "ps_fallbacks": self.ps_fallbacks}

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "trace"}
        d["reminders"] = self.reminders
        return d


def _digest(sc: Scenario, records) -> str:
    h = hashlib.blake2b(digest_size=16)
    if sc.trace is not None:
        for line in sc.trace.lines():
            h.update(line.encode())
            h.update(b"\n")
    else:
        for r in records:
            h.update(f"{r.job},{r.iteration},{r.comm_start},{r.comp_done}\n".encode())
        for sid in sorted(sc.switches):
            h.update(repr(sorted(sc.switches[sid].state.counters.as_dict().items())).encode())
        h.update(f"{sc.sim.now},{sc.sim.events},{sc.sim.dropped}".encode())
    return h.hexdigest()


def run_scenario(cfg: ScenarioConfig, seed: int, trace: bool = False) -> RunReport:
    """Build, run to completion and summarise one (config, seed)."""
    t0 = time.perf_counter()
    sc = build_scenario(cfg, seed, trace)
    end = sc.run()
    records = [r for d in sc.drivers for r in d.records()]
    per_job, mean = compute_jct(records, cfg.warmup)
    util_job, util = compute_utilization(sc.drivers, cfg.bandwidth, cfg.warmup)
    return RunReport(
        policy=cfg.policy_obj.name, seed=seed, jobs=cfg.jobs, workers=cfg.workers,
        job_jct_ns={j: v / PS_PER_NS for j, v in per_job.items()}, mean_jct_ns=mean / PS_PER_NS,
        job_utilization=util_job, utilization=util,
        switch_counters=_sum_counters(s.state for s in sc.switches.values()),
        ps_counters=_sum_counters(sc.pses.values()),
        worker_counters=_sum_counters(sc.workers.values()),
        digest=_digest(sc, records), wall_s=time.perf_counter() - t0, events=sc.sim.events,
        end_ns=end // PS_PER_NS, trace=sc.trace)


def export_trace(report: RunReport, path) -> Path:
    """Write the run's trace as CSV; raises if tracing was off."""
    if report.trace is None:
        raise ValueError("run was not traced; rerun with trace=True")
    path = Path(path)
    with open(path, "w", newline="") as f:
        f.write(",".join(TRACE_COLUMNS) + "\n")
        for line in report.trace.lines():
            f.write(line + "\n")
    return path


def run_matrix(cfg: ScenarioConfig, policies, seeds, out_dir=None, trace: bool = False,
               progress=None) -> tuple[list[RunReport], list[dict]]:
    """One run per (policy, seed), sorted by that key, plus the comparison table.

    A liveness failure aborts the matrix and names the failing pair.
    """
    reports = []
    for pol in policies:
        pcfg = cfg.with_policy(pol)
        for seed in seeds:
            try:
                rep = run_scenario(pcfg, seed, trace)
            except LivenessError as e:
                raise LivenessError(f"({pcfg.policy_obj.name}, seed {seed}): {e}") from e
            if progress is not None:
                progress(rep)
            reports.append(rep)
    reports.sort(key=lambda r: (r.policy, r.seed))
    table = comparison_table([r.csv_row() for r in reports])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_runs_csv(reports, out / "runs.csv")
        write_table_csv(table, out / "speedup.csv")
        with open(out / "reports.json", "w") as f:
            json.dump([r.to_json() for r in reports], f, indent=1, sort_keys=True, default=str)
        if trace:
            for r in reports:
                export_trace(r, out / f"trace_{r.policy.replace(':', '_')}_{r.seed}.csv")
    return reports, table


def write_runs_csv(reports, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


def read_runs_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and tuple(rows[0].keys()) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {list(rows[0].keys())}")
    return rows


def comparison_table(rows, baseline: str = "esa") -> list[dict]:
    """Mean JCT per policy and its ratio to the baseline policy's mean JCT."""
    by_policy: dict[str, list[float]] = {}
    for r in rows:
        by_policy.setdefault(r["policy"], []).append(float(r["mean_jct_ns"]))
    means = {p: sum(v) / len(v) for p, v in sorted(by_policy.items())}
    base = means.get(baseline)
    table = []
    for p, m in means.items():
        table.append({"policy": p, "runs": len(by_policy[p]), "mean_jct_ns": round(m),
                      "speedup_of_" + baseline: f"{m / base:.4f}" if base else ""})
    return table


def write_table_csv(table, path) -> None:
    if not table:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0].keys()))
        w.writeheader()
        w.writerows(table)
