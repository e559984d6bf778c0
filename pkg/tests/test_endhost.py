import pytest

from inasim.core import PacketKind as K
from inasim.core import Packet, Payload
from inasim.endhost import LOSS_CASES, ParameterServer, RtoEstimator, Worker, MisuseError
from inasim.netsim import PS_PER_MS, PS_PER_US, Simulator
from inasim.scripted import (
    ScriptedNet,
    preemption_example,
    reminder_example,
    run_loss_case,
)
from inasim.switchd import ATP, HashIndex

FIG_EVENTS = {"ALLOC", "AGGR", "PREEMPT_SWAP", "FWD_PS", "COMPLETE_MULTICAST", "PS_CREATE",
              "PS_MERGE", "REMINDER_HIT", "PS_MULTICAST"}


def test_preemption_golden_trace():
    net, frags = preemption_example()
    net.run(20)
    got = [e for e in net.events(FIG_EVENTS) if e[3] == 0]
    assert got == [
        ("switch", "ALLOC", 1, 0),
        ("switch", "AGGR", 1, 0),
        ("switch", "PREEMPT_SWAP", 1, 0),
        ("switch", "AGGR", 2, 0),
        ("switch", "COMPLETE_MULTICAST", 2, 0),
        ("ps1", "PS_CREATE", 1, 0),
        ("ps1", "PS_MERGE", 1, 0),
        ("switch", "ALLOC", 1, 0),
        ("switch", "AGGR", 1, 0),
        ("switch", "REMINDER_HIT", 1, 0),
        ("ps1", "PS_MERGE", 1, 0),
        ("ps1", "PS_MULTICAST", 1, 0),
    ]
    assert net.exactly_once(frags) == []
    # the stuck partial is only released by a reminder, about one RTO later
    hit = next(r for r in net.trace.rows if r[2] == "REMINDER_HIT")
    assert hit[0] >= PS_PER_MS


def test_failed_preemption_golden_trace():
    net, frags = reminder_example()
    net.run(20)
    got = [e for e in net.events(FIG_EVENTS | {"PS_REMINDER"}, job=1) if e[3] == 0]
    assert got == [
        ("switch", "FWD_PS", 1, 0),
        ("ps1", "PS_CREATE", 1, 0),
        ("ps1", "PS_MERGE", 1, 0),
        ("switch", "ALLOC", 1, 0),
        ("switch", "AGGR", 1, 0),
        ("ps1", "PS_REMINDER", 1, 0),
        ("switch", "REMINDER_HIT", 1, 0),
        ("ps1", "PS_MERGE", 1, 0),
        ("ps1", "PS_MULTICAST", 1, 0),
    ]
    # the reminder is dupACK-driven: later seqs reach the PS well before any RTO
    rem = next(r for r in net.trace.rows if r[2] == "PS_REMINDER" and r[3] == 1)
    assert rem[5] == "dupack"
    assert rem[0] < 100 * PS_PER_US
    assert net.exactly_once(frags) == []


def test_failed_preemption_downgrades_holder():
    net, _ = reminder_example()
    net.run(0.02)
    downs = [r for r in net.trace.rows if r[2] == "DOWNGRADE"]
    assert downs[0][3:] == (2, 0, "200->100")


def is_subsequence(needle, hay):
    it = iter(hay)
    return all(any(x == y for y in it) for x in needle)


@pytest.mark.parametrize("case", sorted(LOSS_CASES))
def test_loss_case_recovers_exactly_once(case):
    net, hits, frags = run_loss_case(case)
    assert len(hits) == 1
    assert net.exactly_once(frags) == []
    events = [r[2] for r in net.trace.rows]
    assert is_subsequence(LOSS_CASES[case][1], events), events


def test_gradient_loss_reminder_is_dupack_driven():
    net, _, _ = run_loss_case(1)
    first = next(r for r in net.trace.rows if r[2] == "WORKER_REMINDER")
    assert first[0] < 50 * PS_PER_US


@pytest.mark.parametrize("policy", ["esa", "atp"])
def test_no_loss_no_contention_is_silent(policy):
    from inasim.switchd import AllocationPolicy
    net = ScriptedNet({1: 4, 2: 3}, policy=AllocationPolicy.parse(policy), pool_size=16339)
    net.push(1, range(4), 300, 150, 0)
    net.push(2, range(3), 300, 120, 3)
    net.run(30)
    assert net.exactly_once({1: 300, 2: 300}) == []
    kinds = {r[2] for r in net.trace.rows}
    assert not kinds & {"WORKER_REMINDER", "PS_REMINDER", "PS_QUERY", "DROP"}
    assert all(w.counters.reminders == 0 for w in net.workers.values())


@pytest.mark.parametrize("seed", range(4))
def test_random_loss_exactly_once_and_window_safe(seed):
    net = ScriptedNet({1: 3, 2: 3}, policy=ATP, pool_size=64, seed=seed, loss_prob=0.01,
                      trace=False)
    net.push(1, range(3), 400, 150, 0)
    net.push(2, range(3), 400, 150, 2)
    worst = []

    def probe(now):
        for w in net.workers.values():
            w.check_window()
        worst.append(max(w.in_flight for w in net.workers.values()))
        if now < 20 * PS_PER_MS:
            net.sim.schedule(now + 5 * PS_PER_US, probe)

    net.sim.schedule(0, probe)
    net.run(200)
    assert net.sim.dropped > 0
    assert net.exactly_once({1: 400, 2: 400}) == []
    assert max(worst) <= net.worker(1, 0).window
    assert sum(ps.live_entries() for ps in net.ps.values()) == 0


def _ps():
    sim = Simulator(0)
    ps = ParameterServer(sim, 10)
    ps.add_job(1, [0, 1, 2], [20])
    return ps


def test_ps_merge_and_complete():
    ps = _ps()
    a = Packet(K.PARTIAL_TO_PS, 1, 5, payload=Payload.from_contributions({0: 1, 1: 1}))
    b = Packet(K.PARTIAL_TO_PS, 1, 5, payload=Payload.single(2))
    assert ps.on_packet(a, 0) == []
    out = ps.on_packet(b, 10)
    assert [p.dst for p in out] == [0, 1, 2]
    assert all(p.kind == K.RESULT and p.reliable for p in out)
    assert out[0].payload.contributions == {0: 1, 1: 1, 2: 1}
    assert ps.entry(1, 5) is None
    assert ps.on_packet(b, 20) == []
    assert ps.counters.stale_discards == 1


def test_ps_overlap_raises_alarm_and_rejects():
    ps = _ps()
    ps.on_packet(Packet(K.PARTIAL_TO_PS, 1, 0, payload=Payload.single(1)), 0)
    ps.on_packet(Packet(K.PARTIAL_TO_PS, 1, 0,
                        payload=Payload.from_contributions({1: 1, 2: 1})), 1)
    assert ps.counters.alarms == 1
    assert ps.entry(1, 0).bitmap == 0b10


def test_ps_dupack_reminder_once_per_progress():
    ps = _ps()
    ps.on_packet(Packet(K.PARTIAL_TO_PS, 1, 0, payload=Payload.single(0)), 0)
    sent = []
    for s in range(1, 6):
        sent += ps.on_packet(Packet(K.PARTIAL_TO_PS, 1, s, payload=Payload.single(0)), s)
    reminders = [p for p in sent if p.kind == K.REMINDER and p.seq == 0]
    assert len(reminders) == 1
    assert reminders[0].dst == 20


def test_ps_unknown_job_counted():
    ps = _ps()
    ps.on_packet(Packet(K.PARTIAL_TO_PS, 9, 0, payload=Payload.single(0)), 0)
    assert ps.counters.unknown_job == 1


def _worker():
    sim = Simulator(0)
    return Worker(sim, 0, 1, 0, 5, 2, HashIndex(64), window_bytes=306 * 4)


def test_worker_window_limits_initial_burst():
    w = _worker()
    out = w.push_tagged(10, 7, 0)
    assert [p.seq for p in out] == [0, 1, 2, 3]
    assert all(p.priority == 7 and p.kind == K.GRADIENT for p in out)


def test_worker_query_answers_from_cache():
    w = _worker()
    w.push_tagged(4, 7, 0)
    full = Payload.from_contributions({0: 1, 1: 1})
    w.on_packet(Packet(K.RESULT, 1, 0, payload=full), 10)
    hit = w.on_packet(Packet(K.QUERY, 1, 0), 20)[0]
    miss = w.on_packet(Packet(K.QUERY, 1, 1), 20)[0]
    assert hit.kind == K.RESULT and hit.payload == full
    assert miss.kind == K.QUERY


def test_worker_retransmit_now_or_divert():
    w = _worker()
    w.push_tagged(10, 7, 0)
    now = w.on_packet(Packet(K.RETRANSMIT, 1, 2), 5)
    assert now[0].kind == K.RETRANSMIT and now[0].reliable
    assert w.on_packet(Packet(K.RETRANSMIT, 1, 8), 5) == []
    assert 8 in w.divert


def test_worker_rejects_unexpected_kind():
    w = _worker()
    with pytest.raises(MisuseError):
        w.on_packet(Packet(K.GRADIENT, 1, 0), 0)
    with pytest.raises(MisuseError):
        w.push_tagged(0, 1, 0)


def test_worker_dupack_reminder_once_per_expected():
    w = _worker()
    w.push_tagged(10, 7, 0)
    full = Payload.from_contributions({0: 1, 1: 1})
    out = []
    for s in (1, 2, 3):
        out += w.on_packet(Packet(K.RESULT, 1, s, payload=full), s)
    assert [p.kind for p in out] == [K.REMINDER]
    assert out[0].seq == 0
    w.on_packet(Packet(K.RESULT, 1, 1, payload=full), 9)
    assert w.counters.redundant_results == 1


def test_rto_floor_and_backoff_cap():
    r = RtoEstimator(rto_min=1000)
    r.sample(10)
    assert r.rto == 1000
    r.sample(100_000)
    assert r.rto > 1000
    cur = 1000
    for _ in range(20):
        cur = r.backoff(cur)
    assert cur == r.rto_max == 100_000
