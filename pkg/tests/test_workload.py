import math

import pytest

from inasim.experiment import ScenarioConfig, build_scenario, run_scenario
from inasim.workload import (
    DNN_A,
    DNN_B,
    PARTITION_ORDER,
    DnnModel,
    EmptyResultError,
    IterationRecord,
    JobSpec,
    check_disjoint,
    compute_jct,
    emit_iteration,
    pipeline_bound,
    preset_models,
)


def tiny(**kw):
    base = dict(preset="dnnA", jobs=1, workers_per_job=4, jitter_us=0, start_spread_us=0,
                workload_scale=0.05, iterations=2, warmup=1, seeds=[1])
    base.update(kw)
    return ScenarioConfig(**base)


def test_packets_per_partition():
    assert DNN_A.packets_per_partition(306) == math.ceil(4_000_000 / 306) == 13072
    assert DNN_B.packets_per_partition(306) == math.ceil(2_000_000 / 306)
    assert DNN_A.packets_per_partition(180) == math.ceil(4_000_000 / 180)


def test_comm_comp_ratios():
    # 16 MB at 100 Gb/s against 0.64 ms of compute, and 8 MB against 1.28 ms
    assert DNN_A.comm_comp_ratio() == pytest.approx(2.0)
    assert DNN_B.comm_comp_ratio() == pytest.approx(0.5)


def test_scaled_keeps_ratio():
    m = DNN_A.scaled(0.1)
    assert m.partition_bytes == 400_000
    assert m.comm_comp_ratio() == pytest.approx(DNN_A.comm_comp_ratio())


def test_model_validation():
    with pytest.raises(ValueError, match="partition_bytes"):
        DnnModel("x", 0, 1e-3)
    with pytest.raises(ValueError, match="comp_time"):
        DnnModel("x", 10, 0.0)


def test_preset_models_alternate():
    assert [m.name for m in preset_models("mixAB", 4)] == ["dnnA", "dnnB", "dnnA", "dnnB"]
    with pytest.raises(ValueError, match="unknown preset"):
        preset_models("dnnC", 1)


def test_emit_iteration_order_and_seqs():
    spec = JobSpec(0, DNN_B, (3, 4), 9, jitter_bound=0)
    pushes = emit_iteration(spec, 1, {3: 100, 4: 200}, {4: 7}, 306)
    npp = DNN_B.packets_per_partition(306)
    per_worker = [p for p in pushes if p.worker == 3]
    assert [p.layer for p in per_worker] == [layer for layer, _ in PARTITION_ORDER]
    assert [p.first_seq for p in per_worker] == [4 * npp + k * npp for k in range(4)]
    assert {p.release for p in pushes if p.worker == 4} == {207}


def test_jobspec_validation_and_disjoint():
    with pytest.raises(ValueError, match="no workers"):
        JobSpec(0, DNN_A, (), 0)
    with pytest.raises(ValueError, match="twice"):
        JobSpec(0, DNN_A, (1, 1), 0)
    a = JobSpec(0, DNN_A, (1, 2), 10)
    b = JobSpec(1, DNN_A, (2, 3), 11)
    with pytest.raises(ValueError, match="worker 2"):
        check_disjoint([a, b])


def test_compute_jct_skips_warmup():
    recs = [IterationRecord(0, 0, 0, 1000), IterationRecord(0, 1, 1000, 1500),
            IterationRecord(1, 1, 0, 2500)]
    per_job, mean = compute_jct(recs, warmup=1)
    assert per_job == {0: 500, 1: 2500}
    assert mean == 1500
    with pytest.raises(EmptyResultError):
        compute_jct(recs, warmup=5)


def test_iteration_record_rejects_negative_jct():
    with pytest.raises(AssertionError):
        IterationRecord(0, 0, 10, 5)


@pytest.mark.parametrize("preset,model", [("dnnA", DNN_A), ("dnnB", DNN_B)])
def test_single_job_jct_matches_pipeline_bound(preset, model):
    # oracle: closed-form no-contention pipeline; the round trip is two 5 us hops
    cfg = tiny(preset=preset)
    rtt = 2 * cfg.latency_ns * 1e-9
    bound_ns = pipeline_bound(model.scaled(cfg.workload_scale), 306, cfg.window_bytes,
                              cfg.bandwidth, rtt) * 1e9
    rep = run_scenario(cfg, 1)
    assert rep.mean_jct_ns == pytest.approx(bound_ns, rel=0.05)


def test_symmetric_jobs_get_equal_jct():
    cfg = tiny(jobs=2, workers_per_job=2, memory_bytes=10**8)
    rep = run_scenario(cfg, 3)
    a, b = rep.job_jct_ns.values()
    assert a == pytest.approx(b, rel=0.02)


def test_compute_starts_only_after_dependencies():
    cfg = tiny(jobs=2, workers_per_job=3, jitter_us=300, start_spread_us=500, iterations=3)
    sc = build_scenario(cfg, 5)
    done_at = {}

    for d in sc.drivers:
        orig = d._on_partition

        def spy(w, token, now, orig=orig):
            done_at[(w.id, token)] = now
            orig(w, token, now)

        for w in d.workers:
            w.on_complete = spy
    sc.run()
    comp = sc.drivers[0].comp_ps
    for d in sc.drivers:
        for rec in d.records():
            i = rec.iteration
            for w in d.workers:
                parts = [done_at[(w.id, (i, k))] for k in range(4)]
                l1_ready = max(parts[1], parts[2])
                l2_ready = max(l1_ready + comp, parts[0], parts[3])
                assert d._comp_done[i][w.id] == l2_ready + comp


def test_utilization_bounded_by_window():
    rep = run_scenario(tiny(), 1)
    # 196 packets per 10 us round trip is under half of line rate
    assert 0.3 < rep.utilization < 0.5


def test_loss_slows_training():
    clean = run_scenario(tiny(workers_per_job=3), 2)
    lossy = run_scenario(tiny(workers_per_job=3, loss_prob=0.002), 2)
    assert lossy.mean_jct_ns > clean.mean_jct_ns
    assert lossy.reminders > 0
