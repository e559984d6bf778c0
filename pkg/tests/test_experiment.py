import csv
import json
import logging

import pytest

from inasim.cli import EXIT_INVALID, EXIT_LIVENESS, main
from inasim.core import FanInError
from inasim.experiment import (
    CSV_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    comparison_table,
    config_from_dict,
    export_trace,
    load_config,
    parse_seeds,
    read_runs_csv,
    run_matrix,
    run_scenario,
)
from inasim.netsim import LivenessError

SMALL = dict(preset="dnnB", jobs=2, workers_per_job=3, workload_scale=0.01, iterations=2,
             warmup=1, seeds=[1, 2], memory_bytes=306 * 256)


def small(**kw):
    d = dict(SMALL)
    d.update(kw)
    return config_from_dict(d)


def test_minimal_config_gets_defaults():
    cfg = config_from_dict({"preset": "dnnA", "jobs": 1})
    assert cfg.memory_bytes == 5_000_000
    assert cfg.effective_packet_bytes == 306
    assert cfg.bandwidth == 100e9
    assert cfg.latency_ns == 5_000
    assert cfg.workers == 8
    assert cfg.pool_size == 5_000_000 // 306


def test_fanin_40_rejected():
    with pytest.raises(FanInError, match="32-bit bitmap"):
        config_from_dict({"jobs": 1, "workers_per_job": 40})


def test_switchml_packet_size_corrected(caplog):
    with caplog.at_level(logging.WARNING):
        cfg = config_from_dict({"policy": "switchml", "packet_bytes": 306})
    assert cfg.packet_bytes == 180
    assert cfg.effective_packet_bytes == 180
    assert "packet_bytes" in caplog.text


@pytest.mark.parametrize("raw,key", [
    ({"bogus": 1}, "bogus"),
    ({"jobs": 0}, "jobs"),
    ({"policy": "fifo"}, "policy"),
    ({"loss_prob": 2.0}, "loss_prob"),
    ({"memory_bytes": 100}, "memory_bytes"),
    ({"topology": "ring"}, "topology"),
    ({"jobs": 2, "workers_per_job": 4, "workers": 7}, "workers"),
    ({"remaining": "guess"}, "remaining"),
])
def test_validation_names_key(raw, key):
    with pytest.raises(ConfigError, match=f"^{key}:"):
        config_from_dict(raw)


def test_parse_seeds():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,9") == [3, 9]
    assert parse_seeds(4) == [4]
    with pytest.raises(ConfigError):
        parse_seeds("5..1")


def test_with_policy_switches_packet_size_both_ways():
    cfg = small()
    sw = cfg.with_policy("switchml")
    assert sw.effective_packet_bytes == 180
    assert sw.with_policy("atp").effective_packet_bytes == 306


def test_csv_schema_golden(tmp_path):
    reps, _ = run_matrix(small(seeds=[1]), ["esa"], [1], tmp_path)
    with open(tmp_path / "runs.csv") as f:
        header = f.readline().strip()
    assert header == "policy,seed,jobs,workers,mean_jct_ns,utilization,reminders,preemptions," \
                     "ps_fallbacks"
    assert tuple(header.split(",")) == CSV_COLUMNS
    row = read_runs_csv(tmp_path / "runs.csv")[0]
    # times are integer nanoseconds
    assert row["mean_jct_ns"] == str(int(row["mean_jct_ns"]))
    assert int(row["mean_jct_ns"]) == round(reps[0].mean_jct_ns)


def test_run_is_deterministic():
    cfg = small()
    a = run_scenario(cfg, 7, trace=True)
    b = run_scenario(cfg, 7, trace=True)
    assert a.digest == b.digest
    assert a.trace.rows == b.trace.rows
    assert run_scenario(cfg, 8).digest != run_scenario(cfg, 7).digest


def test_matrix_sorted_and_table_recomputable(tmp_path):
    reps, table = run_matrix(small(), ["atp", "esa"], [2, 1], tmp_path)
    assert [(r.policy, r.seed) for r in reps] == [("atp", 1), ("atp", 2), ("esa", 1), ("esa", 2)]
    rows = read_runs_csv(tmp_path / "runs.csv")
    assert comparison_table(rows) == table
    with open(tmp_path / "speedup.csv") as f:
        on_disk = list(csv.DictReader(f))
    assert [r["policy"] for r in on_disk] == ["atp", "esa"]
    # oracle: plain averages of the CSV column
    atp = [float(r["mean_jct_ns"]) for r in rows if r["policy"] == "atp"]
    esa = [float(r["mean_jct_ns"]) for r in rows if r["policy"] == "esa"]
    ratio = (sum(atp) / len(atp)) / (sum(esa) / len(esa))
    assert float(table[0]["speedup_of_esa"]) == pytest.approx(ratio, abs=1e-4)
    data = json.loads((tmp_path / "reports.json").read_text())
    assert len(data) == 4 and "digest" in data[0]


def test_liveness_failure_names_pair():
    cfg = small(horizon_ms=0.01)
    with pytest.raises(LivenessError, match=r"\(esa, seed 2\)"):
        run_matrix(cfg, ["esa"], [2])


def test_export_trace(tmp_path):
    rep = run_scenario(small(), 1, trace=True)
    path = export_trace(rep, tmp_path / "t.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    times = [int(line.split(",")[0]) for line in lines[1:]]
    assert times == sorted(times)
    assert {"ALLOC", "AGGR", "COMPLETE_MULTICAST"} <= {line.split(",")[2] for line in lines[1:]}


def test_export_without_trace_refused(tmp_path):
    rep = run_scenario(small(), 1)
    with pytest.raises(ValueError, match="not traced"):
        export_trace(rep, tmp_path / "t.csv")
    assert not (tmp_path / "t.csv").exists()


def test_two_level_topology_runs():
    cfg = small(topology="two-level", workers_per_job=4, workers_per_rack=2)
    rep = run_scenario(cfg, 1)
    assert rep.switch_counters["completions"] > 0
    assert rep.mean_jct_ns > 0


@pytest.mark.parametrize("policy", ["switchml", "always", "coinflip:0.5"])
def test_every_policy_completes(policy):
    rep = run_scenario(small().with_policy(policy), 1)
    assert rep.mean_jct_ns > 0


def _write_cfg(tmp_path, **kw):
    d = dict(SMALL)
    d.update(kw)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


def test_load_config_roundtrip(tmp_path):
    cfg = load_config(_write_cfg(tmp_path, seeds="1..3"))
    assert cfg.seeds == [1, 2, 3]


def test_cli_run_and_compare(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", "--config", str(cfg), "--policy", "esa,atp", "--seeds", "1..2",
               "--out", str(out), "--trace"])
    assert rc == 0
    assert (out / "runs.csv").exists()
    assert len(list(out.glob("trace_*.csv"))) == 4
    before = (out / "speedup.csv").read_text()
    (out / "speedup.csv").unlink()
    assert main(["compare", "--out", str(out)]) == 0
    assert (out / "speedup.csv").read_text() == before
    assert "speedup_of_esa" in capsys.readouterr().out


def test_cli_invalid_config_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, workers_per_job=40)
    assert main(["run", "--config", str(cfg)]) == EXIT_INVALID
    assert "bitmap" in capsys.readouterr().err


def test_cli_liveness_exit_code(tmp_path):
    cfg = _write_cfg(tmp_path, horizon_ms=0.01)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_LIVENESS


def test_cli_compare_missing_runs(tmp_path):
    assert main(["compare", "--out", str(tmp_path)]) == EXIT_INVALID


def _tags(cfg, seed=1):
    from inasim.priority import compute_priority, quantize_priority
    from inasim.experiment import build_scenario
    from inasim.workload import PARTITION_ORDER
    sc = build_scenario(cfg, seed)
    scale = next(iter(sc.workers.values())).scale
    tags = set()
    for d in sc.drivers:
        for i in range(d.spec.iterations):
            for k, (layer, _) in enumerate(PARTITION_ORDER):
                raw = compute_priority(d.profile(i, k, d.spec.start_time), layer)
                tags.add(quantize_priority(raw, scale))
    return tags


def test_auto_p_ref_keeps_tags_off_the_rails():
    tags = _tags(small(preset="mixAB", workload_scale=0.05))
    assert 0 < min(tags) and max(tags) < 255
    assert len(tags) > 8


def test_auto_p_ref_is_scale_invariant():
    assert _tags(small(workload_scale=0.05)) == _tags(small(workload_scale=1.0))


def test_fixed_p_ref_saturates_desk_scale():
    # raw priorities of a desk-scale run sit far above 2**8 * p_ref for p_ref = 1
    assert _tags(small(quant_p_ref=1.0, workload_scale=0.05)) == {255}


@pytest.mark.parametrize("bad", ["fast", 0, -2.0])
def test_p_ref_validation(bad):
    with pytest.raises(ConfigError, match="^quant_p_ref:"):
        small(quant_p_ref=bad)
