import json
import subprocess
import sys
from pathlib import Path

import pytest

from funion import cli
from funion.harness import (
    ConfigError,
    JobSpec,
    RunConfig,
    adversary_guess,
    check_iou_jobs,
    emit_tables,
    iou_config,
    job_input,
    run_e2e,
    run_iou_experiment,
    table4_csv,
)
from funion.mixnet.sim import ObserverTrace

DATA = Path(__file__).parent / "data"


def read_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_config_round_trip():
    cfg = RunConfig(seed=4, jobs=[JobSpec(input_tokens=3, bucket_index=2, count=5, spacing=1.0)])
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_config_field_errors():
    bad = {"mu": -1, "replicas": {"n": 2, "k": 3}, "jobs": [{"bucket_index": 0, "stub": "nope"}], "extra": 1}
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(bad)
    msg = str(err.value)
    for field in ("extra: unknown field", "mu:", "replicas.k:", "jobs[0].bucket_index:", "jobs[0].stub:"):
        assert field in msg


def test_config_types():
    for bad in ({"seed": "x"}, {"layer_sizes": [4, 4]}, {"cover": 1}, {"delta": 0}, {"payload_size": 40_000}, {"jobs": {}}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load("/nonexistent/config.json")


def test_job_ids_expand():
    cfg = RunConfig(jobs=[JobSpec(count=3, start=1.0, spacing=0.5), JobSpec(job_id=10)])
    assert [(j, t) for j, _, t in cfg.expanded_jobs()] == [(0, 1.0), (1, 1.5), (2, 2.0), (10, 0.0)]
    with pytest.raises(ConfigError):
        RunConfig(jobs=[JobSpec(count=2), JobSpec(job_id=1)]).expanded_jobs()


def test_job_input_deterministic():
    assert job_input(1, 2, 10) == job_input(1, 2, 10)
    assert job_input(1, 2, 10) != job_input(1, 3, 10)
    assert len(job_input(0, 0, 7500)) == 30_000


def test_default_run_identity(tmp_path):
    res = run_e2e(RunConfig(), tmp_path)
    (o,) = res.outcomes
    assert o.status == "ok"
    assert res.runs[0].outcome.output == res.runs[0].data
    names = set(read_tree(tmp_path))
    assert {"outcomes.json", "summary.json", "config.json", "trace.jsonl"} <= names
    assert any(n.startswith("stores/") for n in names)
    rec = json.loads((tmp_path / "outcomes.json").read_text())[0]
    assert set(rec) == {"job_id", "status", "release_time", "total_latency", "mix_time", "compute_bucket_time"}


def test_run_is_deterministic(tmp_path):
    cfg = RunConfig(seed=11, cover=True, cover_duration=60.0, jobs=[JobSpec(input_tokens=100, count=3, spacing=0.7, stub="reverse", bucket_index=4, ttft=0.3)])
    run_e2e(cfg, tmp_path / "a")
    run_e2e(cfg, tmp_path / "b")
    assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")
    cfg.seed = 12
    run_e2e(cfg, tmp_path / "c")
    assert read_tree(tmp_path / "a")["trace.jsonl"] != read_tree(tmp_path / "c")["trace.jsonl"]


def test_backends_give_identical_files(tmp_path):
    from funion.mixnet import engine

    if "cython" not in engine.BACKENDS:
        pytest.skip("compiled engine not built")
    cfg = RunConfig(seed=2, jobs=[JobSpec(count=4, spacing=0.3)])
    run_e2e(cfg, tmp_path / "c", backend="cython")
    run_e2e(cfg, tmp_path / "p", backend="python")
    assert read_tree(tmp_path / "c") == read_tree(tmp_path / "p")


def test_cover_run_completes():
    res = run_e2e(RunConfig(cover=True, cover_duration=100.0, jobs=[JobSpec(count=2)]))
    assert [o.status for o in res.outcomes] == ["ok", "ok"]
    trace = res.world.sim.observer_view()
    assert set(trace.sizes.tolist()) == {31_000}


def test_unfinished_jobs_reported():
    # cover slots run out before the pipeline can finish
    res = run_e2e(RunConfig(cover=True, cover_duration=1.0))
    assert res.outcomes[0].status == "incomplete"


def test_iou_zero_trials():
    rep = run_iou_experiment(iou_config(), 0)
    assert rep.trials == 0 and rep.adversary_accuracy is None and rep.confidence_interval == (0.0, 1.0)
    json.loads(rep.to_json())


def test_iou_requires_matched_jobs():
    cfg = iou_config()
    cfg.jobs[1].ttft = 10.0  # overflows bucket 20
    with pytest.raises(ConfigError):
        check_iou_jobs(cfg)
    cfg = iou_config()
    cfg.jobs[1].bucket_index = 21
    with pytest.raises(ConfigError):
        run_iou_experiment(cfg, 5)
    cfg = iou_config(bucketing=False)
    cfg.jobs[1].bucket_index = 21
    check_iou_jobs(cfg)


def test_iou_small_runs():
    on = run_iou_experiment(iou_config(True, seed=3), 60)
    off = run_iou_experiment(iou_config(False, seed=3), 60)
    assert off.adversary_accuracy >= on.adversary_accuracy
    assert off.adversary_accuracy > 0.9
    lo, hi = on.confidence_interval
    assert 0 <= lo <= on.adversary_accuracy <= hi <= 1


def test_adversary_uses_only_trace():
    import numpy as np

    trace = ObserverTrace(np.array([0.0, 1.0, 5.0, 0.0, 1.0]), ["client-0", "gw-0", "client-0", "client-1", "gw-1"], ["gw-0", "client-0", "gw-0", "gw-1", "client-1"], np.full(5, 31_000))
    # client 0 looks slower, job 1 is the slower job
    assert adversary_guess(trace, ("client-0", "client-1"), 1, 0.9) == 1
    assert adversary_guess(trace, ("client-0", "client-1"), 0, 0.9) == 0
    assert adversary_guess(trace, ("client-0", "client-1"), None, 0.1) == 1


def test_tables(tmp_path):
    files = emit_tables(tmp_path)
    t4 = files["table4"].read_text().splitlines()
    assert t4[1] == "Balanced,4.00,9.0,13.00,69"
    assert files["table3"].read_text().splitlines()[1].endswith(",3.85")
    assert "Balanced,4.00,4.5,8.50" in table4_csv(mu=0.1)
    assert table4_csv(delta=1.0).splitlines()[1].startswith("Balanced,4.00,")


def test_tables_bad_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_tables(blocker / "sub")


def test_cli_tables(tmp_path, capsys):
    assert cli.main(["tables", "--out-dir", str(tmp_path), "--check"]) == 0
    assert "Balanced" in capsys.readouterr().out
    assert (tmp_path / "table4.csv").exists()


def test_cli_simulate(tmp_path):
    assert cli.main(["simulate", "--out-dir", str(tmp_path), "--jobs", "2", "--check", "--seed", "5"]) == 0
    assert len(json.loads((tmp_path / "outcomes.json").read_text())) == 2


def test_cli_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mu": "fast"}))
    assert cli.main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    assert "mu:" in capsys.readouterr().err
    assert cli.main(["simulate", "--delta", "-1", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["simulate", "--layers", "4,4", "--out-dir", str(tmp_path)]) == 2


def test_cli_config_file(tmp_path):
    cfg = RunConfig(seed=3, jobs=[JobSpec(input_tokens=8, bucket_index=3, ttft=0.2)])
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert cli.main(["simulate", "--config", str(path), "--out-dir", str(tmp_path / "o"), "--check"]) == 0
    assert RunConfig.load(tmp_path / "o" / "config.json") == cfg


def test_cli_check_failure(tmp_path):
    # a job that cannot finish: cover slots end too early
    cfg = RunConfig(cover=True, cover_duration=1.0)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert cli.main(["simulate", "--config", str(path), "--out-dir", str(tmp_path / "o"), "--check"]) == 3


def test_cli_iou(tmp_path):
    assert cli.main(["iou", "--trials", "10", "--out-dir", str(tmp_path)]) == 0
    assert cli.main(["iou", "--trials", "10", "--no-bucketing", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "iou.json").read_text())["trials"] == 10
    assert json.loads((tmp_path / "iou-no-bucketing.json").read_text())["bucketing"] is False


def test_cli_vectors_match_frozen(tmp_path, capsys):
    assert cli.main(["bacap-vectors", "--out-dir", str(tmp_path), "--check"]) == 0
    assert (tmp_path / "bacap_vectors.txt").read_text() == (DATA / "bacap_vectors.txt").read_text()


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "funion.cli", "bacap-vectors", "--indices", "1"], capture_output=True, text=True, check=True)
    assert len(out.stdout.splitlines()) == 8
