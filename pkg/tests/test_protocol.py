import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funion import bacap
from funion.bacap import CTX_OUT
from funion.mixnet.sim import ECHO_HOPS, ECHO_LINKS, DelayModel, Simulator, Topology
from funion.pigeonhole import PlacementConfig, ReplicaStore
from funion.protocol import (
    CHUNK_TOKENS,
    OVERFLOW_MARKER,
    BucketGrid,
    BucketStatus,
    CapabilityRegistry,
    Client,
    ComputeModel,
    ComputeService,
    ConfigError,
    Deployment,
    FreshnessViolation,
    JobOutcome,
    chunk_count,
    five_echo_latency,
    observable_outcome,
    round_up_to_bucket,
    split_chunks,
    wait_for_bucket_edge,
)

from simkit import IDS, deployment, run_jobs


# -- bucket policy


@pytest.mark.parametrize("t,want", [(19.41, 19.6), (0.0, 0.0), (38.59, 38.6), (10.34, 10.4), (3.85, 4.0), (0.6, 0.6), (4.0, 4.0)])
def test_round_up_to_bucket(t, want):
    assert round_up_to_bucket(t, 0.2) == pytest.approx(want, abs=1e-12)


def test_round_up_other_width():
    assert round_up_to_bucket(3.85, 1.0) == 4.0
    assert round_up_to_bucket(4.0, 1.0) == 4.0
    with pytest.raises(ValueError):
        round_up_to_bucket(-1.0, 0.2)


def test_wait_examples():
    grid = BucketGrid(0.2, 10)
    assert wait_for_bucket_edge(1.0, 0.3, grid) == (BucketStatus.OK, 1.0)
    assert wait_for_bucket_edge(1.0, 1.0, grid) == (BucketStatus.OVERFLOW, 1.0)
    with pytest.raises(ConfigError):
        wait_for_bucket_edge(0.3, 0.1, grid)
    with pytest.raises(ConfigError):
        wait_for_bucket_edge(4.0, 0.1, grid)


def test_wait_sweep():
    grid = BucketGrid(0.2, 10)
    t_j = grid.edge(5)
    for m in range(0, 2000):
        t_finish = m * 1e-3
        status, release = wait_for_bucket_edge(t_j, t_finish, grid)
        assert release == t_j
        assert (status is BucketStatus.OVERFLOW) == (t_finish >= t_j)


def test_grid():
    g = BucketGrid(0.2, 5)
    assert g.edges == [0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]
    assert g.index_of(0.6) == 3 and g.index_of(0.5) is None
    assert g.bucket_for(3.85 / 10) == 2
    assert BucketGrid().bucket_for(3.85) == 20
    with pytest.raises(ConfigError):
        BucketGrid(0.0, 5)
    with pytest.raises(ConfigError):
        g.edge(6)


def test_observable_cardinality_small():
    grid = BucketGrid(0.2, 8)
    seen = set()
    for j in range(1, grid.n + 1):
        for t in np.linspace(0, 3, 61):
            seen.add(observable_outcome(*wait_for_bucket_edge(grid.edge(j), float(t), grid)))
    assert len(seen) <= grid.n + 1


def test_compute_model():
    assert ComputeModel(0.5, 0.01, 100).t_llm == pytest.approx(1.5)
    assert ComputeModel(0.2).t_llm == 0.2
    with pytest.raises(ConfigError):
        ComputeModel(-1.0)


def test_chunking():
    assert chunk_count(5000) == 1
    assert chunk_count(7500) == 1
    assert chunk_count(7501) == 2
    assert chunk_count(0) == 1
    assert CHUNK_TOKENS == 7500
    assert split_chunks(b"") == [b""]
    assert [len(c) for c in split_chunks(bytes(70_000))] == [30_000, 30_000, 10_000]


def test_registry_freshness(caps):
    reg = CapabilityRegistry()
    reg.register(caps[0])
    assert caps[0] in reg
    with pytest.raises(FreshnessViolation):
        reg.register(caps[0])


# -- pipeline


def test_identity_round_trip():
    dep = deployment(seed=1)
    data = bytes(range(256)) * 10
    (run,) = run_jobs(dep, [(data, 1, ComputeModel(ttft=0.1))])
    o = run.outcome
    assert o.status == "ok" and o.output == data
    assert o.release_time == pytest.approx(0.2)
    assert o.result_boxes == run.output_boxes and len(o.result_boxes) == 1


def test_balanced_scenario_lands_on_4s_edge():
    dep = deployment(seed=2)
    j = dep.grid.bucket_for(3.85)
    (run,) = run_jobs(dep, [(b"prompt", j, ComputeModel(ttft=3.85))])
    assert run.outcome.status == "ok"
    assert run.outcome.release_time == pytest.approx(4.0)
    assert run.t_release - run.charlie_epoch == pytest.approx(4.0)


def test_finish_on_edge_overflows():
    dep = deployment(seed=3)
    (run,) = run_jobs(dep, [(b"prompt", 5, ComputeModel(ttft=1.0))])
    o = run.outcome
    assert o.status == "overflow" and o.output is None and o.result_boxes == []
    assert o.release_time == pytest.approx(1.0)
    rec = dep.replicas[dep.placement.replica_ids[0]]
    marker = next(iter(s.records[run.output_boxes[0]] for s in dep.replicas.values() if run.output_boxes[0] in s.records))
    assert bacap.open_record(run.read_out, 1, CTX_OUT, marker) == OVERFLOW_MARKER


def test_empty_input():
    dep = deployment(seed=4)
    (run,) = run_jobs(dep, [(b"", 1, ComputeModel())])
    assert run.outcome.status == "ok" and run.outcome.output == b""
    assert len(run.input_boxes) == 1


def test_multi_chunk_input_and_output():
    dep = deployment(seed=5)
    data = np.random.default_rng(0).bytes(7501 * 4)
    (run,) = run_jobs(dep, [(data, 3, ComputeModel(stub_fn=lambda x: x + x))])
    assert len(run.input_boxes) == 2
    assert run.outcome.output == data + data
    assert len(run.output_boxes) == math.ceil(2 * len(data) / (30_000 - 5))


def test_charlie_echoes_look_like_client_traffic():
    dep = deployment(seed=6)
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel())])
    by_label = {}
    for e in dep.sim.echo_log:
        by_label.setdefault(e.label, []).append(e)
    charlie = by_label["E3"][0]
    assert charlie.origin == "compute-0"
    assert len(charlie.packet.route) == len(by_label["E1"][0].packet.route)
    assert charlie.packet.route[1] in dep.sim.topology.gateways


def test_single_job_event_accounting():
    dep = deployment(seed=7)
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel())])
    labels = [e.label for e in dep.sim.echo_log]
    assert [labels.count(k) for k in ("E1", "E2", "E3", "E4")] == [1, 1, 1, 1]
    assert labels.count("E5") == run.outcome.fetch_polls
    assert all(len(e.delays) == ECHO_HOPS for e in dep.sim.echo_log)
    assert len(dep.sim.observer_view()) == ECHO_LINKS * len(labels)


def test_mix_time_is_sum_of_five_echoes():
    dep = deployment(seed=8)
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel())])
    log = {e.label: e for e in reversed(dep.sim.echo_log)}  # first of each label
    rec = five_echo_latency(run)
    for k in ("E1", "E2", "E3", "E4", "E5"):
        assert rec[k] == pytest.approx(log[k].round_trip)
    assert rec["mix_time"] == pytest.approx(sum(log[k].round_trip for k in ("E1", "E2", "E3", "E4", "E5")))
    assert rec["total"] == pytest.approx(rec["mix_time"] + 0.2)


def test_zero_delay_total_is_bucket_time():
    dep = deployment(seed=9, mu=0.0)
    (run,) = run_jobs(dep, [(b"x", 7, ComputeModel(ttft=0.5))])
    rec = five_echo_latency(run)
    assert rec["mix_time"] == 0.0
    assert rec["total"] == pytest.approx(1.4)


def test_early_fetch_retries_then_succeeds():
    dep = deployment(seed=10, bucketing=False)
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel(ttft=2.0))])
    assert run.outcome.status == "ok"
    assert run.outcome.fetch_polls > 1


def test_no_bucketing_releases_at_finish():
    dep = deployment(seed=11, bucketing=False)
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel(ttft=0.73))])
    assert run.outcome.status == "ok"
    assert run.outcome.release_time == pytest.approx(0.73)


def test_wrong_read_capability_times_out():
    dep = deployment(seed=12, grid=BucketGrid(0.2, 10))
    run = Client(dep, "alice").submit(b"x", 1, ComputeModel())
    _, stranger = bacap.generate_capability(bytes([3]) * 64)
    run.fetch_cap = stranger
    dep.sim.call_at(0.0, run.start)
    dep.sim.run()
    assert run.outcome.status == "failed" and run.outcome.error.startswith("FetchTimeout")


def test_charlie_crash_times_out(monkeypatch):
    monkeypatch.setattr(ComputeService, "accept", lambda self, ticket, run: None)
    dep = deployment(seed=13, grid=BucketGrid(0.2, 10))
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel())])
    assert run.outcome.error.startswith("FetchTimeout")
    # a new poll one bucket width after each miss, for at most 3 * t_n
    assert run.outcome.fetch_polls >= 2
    assert run.t_done - run.t_first_poll <= 3 * 2.0 + 10.0


def test_tampered_output_is_integrity_error():
    dep = deployment(seed=14)
    run = Client(dep, "alice").submit(b"x", 1, ComputeModel())
    for store in dep.replicas.values():
        orig = store.handle

        def handle(op, orig=orig):
            got = orig(op)
            if isinstance(got, bacap.BoxRecord) and got.box_id in run.output_boxes:
                return bacap.BoxRecord(got.box_id, bytes([got.ciphertext[0] ^ 1]) + got.ciphertext[1:], got.signature)
            return got

        store.handle = handle
    dep.sim.call_at(0.0, run.start)
    dep.sim.run()
    assert run.outcome.error.startswith("IntegrityError")


def test_replicas_down_fail_the_job():
    dep = deployment(seed=15)
    for s in dep.replicas.values():
        s.online = False
    (run,) = run_jobs(dep, [(b"x", 1, ComputeModel())])
    assert run.outcome.status == "failed" and run.outcome.error.startswith("JobFailed")


def test_tolerates_minority_replica_loss():
    dep = deployment(seed=16)
    dep.replicas["replica-3"].online = False
    runs = run_jobs(dep, [(bytes([i]) * 50, 1, ComputeModel()) for i in range(6)])
    # k=3 and one replica down leaves every box a quorum of 2
    assert all(r.outcome.status == "ok" for r in runs)


def test_write_capability_reuse_is_refused():
    dep = deployment(seed=17)
    a = Client(dep, "alice").submit(b"x", 1, ComputeModel())
    b = Client(dep, "bob").submit(b"y", 1, ComputeModel())
    b.write_out = a.write_out
    dep.sim.call_at(0.0, a.start)
    dep.sim.call_at(0.0, b.start)
    with pytest.raises(FreshnessViolation):
        dep.sim.run()


def test_context_separation():
    dep = deployment(seed=18)
    runs = run_jobs(dep, [(bytes([i]) * 10, 1, ComputeModel()) for i in range(5)])
    ins = {b for r in runs for b in r.input_boxes}
    outs = {b for r in runs for b in r.output_boxes}
    assert ins and outs and not ins & outs


def test_charlie_selection_uniform():
    dep = deployment(seed=19, compute=("compute-0", "compute-1", "compute-2", "compute-3"))
    names = sorted(dep.charlies)
    picks = [dep.pick(names) for _ in range(10_000)]
    for n in names:
        assert abs(picks.count(n) - 2500) < 3 * math.sqrt(10_000 * 0.25 * 0.75)
    runs = run_jobs(dep, [(b"x", 1, ComputeModel()) for _ in range(40)])
    assert {r.charlie for r in runs} == set(names)


def test_outcome_json_fields():
    o = JobOutcome(3, "ok", release_time=0.2, total_latency=10.0, mix_time=9.5, compute_bucket_time=0.2)
    assert set(o.to_record()) == {"job_id", "status", "release_time", "total_latency", "mix_time", "compute_bucket_time"}


def test_bad_deployment():
    topo = Topology.build(services=("storage-0",))
    sim = Simulator(topo, DelayModel(), 0)
    reps = {r: ReplicaStore(r) for r in IDS}
    with pytest.raises(ConfigError):
        Deployment(sim, reps, PlacementConfig(IDS, 3), ["storage-0"], ["compute-0"])
    with pytest.raises(ConfigError):
        Deployment(sim, reps, PlacementConfig(IDS, 3), ["storage-0"], [])


def test_bucket_index_out_of_range():
    dep = deployment(seed=20, grid=BucketGrid(0.2, 10))
    with pytest.raises(ConfigError):
        Client(dep, "a").submit(b"x", 11, ComputeModel())
    with pytest.raises(ConfigError):
        Client(dep, "b").submit(b"x", 0, ComputeModel())


@settings(max_examples=15, deadline=None)
@given(st.binary(max_size=3000), st.floats(0, 3.0), st.integers(1, 20))
def test_end_to_end_property(data, t_llm, j):
    dep = deployment(seed=len(data), record_trace=False)
    (run,) = run_jobs(dep, [(data, j, ComputeModel(ttft=t_llm, stub_fn=lambda x: x[::-1]))])
    o = run.outcome
    overflow = t_llm >= dep.grid.edge(j)
    assert o.status == ("overflow" if overflow else "ok")
    assert o.release_time == dep.grid.edge(j)
    if not overflow:
        assert o.output == data[::-1]


def test_mix_time_kept_when_fetch_beats_store_reply():
    # the result is readable once E4 reaches a replica, often before E4 returns
    dep = deployment(seed=31, record_trace=False)
    runs = run_jobs(dep, [(b"x", 1, ComputeModel()) for _ in range(300)])
    early = [r for r in runs if r.t_done < r.t_release + r.outcome.echo_times["E4"]]
    assert early
    assert all(r.outcome.mix_time == pytest.approx(sum(r.outcome.echo_times.values())) for r in runs)
    assert all(len(r.outcome.echo_times) == 5 for r in runs)
