import random

import pytest

from conftest import scripted_cluster
from woc.harness import ScenarioConfig, build_cluster, run_scenario
from woc.checker import dump_trace
from woc.node import CABINET
from woc.protocol import Operation, Path
from woc.simnet import (EventKind, Link, LinkModel, Livelock, Simulator, heterogeneous_profile,
                        make_profile, sample_delay, uniform_profile)


def test_events_run_in_time_order():
    sim = Simulator()
    seen = []
    sim.handlers[EventKind.TIMEOUT] = seen.append
    sim.schedule(2.0, EventKind.TIMEOUT, "late")
    sim.schedule(1.0, EventKind.TIMEOUT, "early")
    trace = sim.run()
    assert seen == ["early", "late"]
    assert [t for t, _, _ in trace] == [1.0, 2.0]


def test_ties_break_by_insertion_order():
    sim = Simulator()
    seen = []
    sim.handlers[EventKind.TIMEOUT] = seen.append
    for name in "abc":
        sim.schedule(1.0, EventKind.TIMEOUT, name)
    sim.run()
    assert seen == ["a", "b", "c"]


def test_seq_strictly_increasing_and_past_rejected():
    sim = Simulator()
    a = sim.schedule(1.0, EventKind.TIMEOUT)
    b = sim.schedule(0.5, EventKind.TIMEOUT)
    assert b.seq > a.seq
    sim.handlers[EventKind.TIMEOUT] = lambda _: None
    sim.run()
    with pytest.raises(ValueError):
        sim.schedule(0.1, EventKind.TIMEOUT)


def test_run_is_single_use():
    sim = Simulator()
    sim.run()
    with pytest.raises(AssertionError):
        sim.run()


def test_livelock_detected():
    sim = Simulator(event_budget=50)

    def again(_):
        sim.schedule(sim.now, EventKind.TIMEOUT)

    sim.handlers[EventKind.TIMEOUT] = again
    sim.schedule(0.0, EventKind.TIMEOUT)
    with pytest.raises(Livelock):
        sim.run()


def test_sample_delay():
    assert sample_delay(Link(1.5, 0.0), random.Random(1)) == 1.5
    link = Link(1.0, 0.5)
    a = [sample_delay(link, random.Random("x")) for _ in range(1)]
    r1, r2 = random.Random(9), random.Random(9)
    seq1 = [sample_delay(link, r1) for _ in range(20)]
    seq2 = [sample_delay(link, r2) for _ in range(20)]
    assert seq1 == seq2
    assert all(1.0 <= d <= 1.5 for d in seq1 + a)


def test_profiles():
    het = heterogeneous_profile(5)
    assert list(het.access_ms) == sorted(het.access_ms)
    assert het.cpu_speed[0] == 1.0 and het.cpu_speed[-1] > 1.0
    # the spread between fastest and slowest is fixed regardless of n
    h9 = heterogeneous_profile(9)
    assert h9.access_ms[0] == het.access_ms[0] and h9.access_ms[-1] == het.access_ms[-1]
    assert len(set(uniform_profile(5).access_ms)) == 1
    with pytest.raises(ValueError):
        make_profile("nope", 3)
    links = LinkModel(het)
    assert all(d >= 0 for d in links.prior_latency().values())
    assert links.p99_one_way() > 0


def test_same_seed_same_trace():
    cfg = ScenarioConfig(seed=11, ops_per_client=200)
    a, b = run_scenario(cfg), run_scenario(cfg)
    assert a.sim_trace == b.sim_trace
    assert dump_trace(a.trace) == dump_trace(b.trace)
    assert a.report == b.report
    c = run_scenario(cfg.replace(seed=12))
    assert c.sim_trace != a.sim_trace


def test_deliveries_respect_link_delay(monkeypatch):
    cluster = build_cluster(ScenarioConfig(seed=3, ops_per_client=100))
    sched = cluster.sim.schedule
    checked = []

    def spy(time, kind, payload=None):
        if kind is EventKind.DELIVER:
            src, dst = payload.src, payload.dst
            if src in cluster.replicas and dst in cluster.replicas:
                base = cluster.links.replica_link(src, dst).base_ms
            else:
                base = cluster.links.client_link(dst if dst in cluster.replicas else src).base_ms
            assert time >= cluster.now + base
            checked.append(time)
        return sched(time, kind, payload)

    monkeypatch.setattr(cluster.sim, "schedule", spy)
    cluster.run()
    assert checked


@pytest.mark.parametrize("rate", [None, 2.0])
def test_in_flight_cap_respected(rate):
    cluster = build_cluster(ScenarioConfig(seed=5, ops_per_client=300, max_inflight=3, rate=rate))
    cluster.run()
    for client in cluster.clients.values():
        assert 1 <= client.max_seen_inflight <= 3
        assert len(client.completed) == 300


def test_crashed_replica_goes_silent():
    cfg = ScenarioConfig(seed=2, ops_per_client=400, crashes=1, crash_at=1.0)
    result = run_scenario(cfg)
    (at, _, victim), = result.trace.crash_schedule()
    late = [e for e in result.trace.events if e[1] == "apply" and e[2] == victim and e[0] > at]
    assert not late
    assert result.report.committed == result.report.submitted


def test_quorum_destroying_crash_fails_ops_instead_of_hanging():
    cfg = ScenarioConfig(seed=2, ops_per_client=40, crashes=3, crash_at=0.2, batch_size=2)
    result = run_scenario(cfg)
    assert result.ok
    assert result.report.failed > 0
    assert result.report.failed + result.report.committed == result.report.submitted


def test_crash_after_commit_keeps_record():
    op = Operation(("a", 1), "iX")
    cluster = scripted_cluster({"a": [(0.0, 0, op)]})
    cluster.crash(0, 50.0)
    cluster.run()
    (rec,) = cluster.om.records
    assert rec.path is Path.FAST and rec.commit_time < 50.0


def test_cabinet_clients_only_talk_to_leader():
    cluster = build_cluster(ScenarioConfig(seed=1, protocol=CABINET, ops_per_client=50))
    for client in cluster.clients.values():
        assert client.targets == [cluster.om.leader]


def test_object_ranking_learned_within_one_window():
    # Replica 0 is ten times closer than replica 4, but the prior says the opposite.
    access = (1.0, 2.0, 4.0, 7.0, 10.0)
    prior = {r: 10.0 - 2 * r for r in range(5)}
    script = [(i * 100.0, i % 5, Operation(("a", i), "iX")) for i in range(120)]
    cluster = scripted_cluster({"a": script}, prior=prior, profile="heterogeneous",
                               fast_timeout=200.0, slow_timeout=300.0)
    cluster.links.profile = cluster.profile = heterogeneous_profile(5, access_ms=access)
    om = cluster.om
    assert om.object_weights("iX").rank_to_replica[0] == 4
    cluster.run()
    assert len(om.records) == 120
    assert om.object_weights("iX").rank_to_replica == (0, 1, 2, 3, 4)


def test_node_priorities_converge():
    cfg = ScenarioConfig(seed=4, conflict_fraction=1.0, ops_per_client=1500)
    cluster = build_cluster(cfg)
    cluster.run()
    assert cluster.om.node_rerank_count >= 5
    assert cluster.om.node_weights.rank_to_replica == tuple(range(5))
