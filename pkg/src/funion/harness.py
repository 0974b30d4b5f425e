"""Run configuration, end-to-end runs, the IO-unlinkability experiment and table output."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import perfmodel
from .mixnet.sim import MIX_LAYERS, PACKET_OVERHEAD, SPHINX_PAYLOAD, STREAMS, CoverSource, DelayModel, RngStreams, Simulator, Topology
from .pigeonhole import PlacementConfig, ReplicaStore, full_gossip
from .protocol import TOKEN_BYTES, BucketGrid, Client, ComputeModel, Deployment, JobOutcome, JobRun


class ConfigError(ValueError):
    """Invalid run configuration; the message names every offending field."""


STUBS = {
    "identity": lambda x: x,
    "reverse": lambda x: x[::-1],
    "empty": lambda x: b"",
}

# spawn keys past the simulator streams
_INPUT_KEY = len(STREAMS)
_TRIAL_KEY = len(STREAMS) + 1


@dataclass
class JobSpec:
    input_tokens: int = 16
    bucket_index: int = 1
    ttft: float = 0.0
    itl: float = 0.0
    n_out: int = 0
    stub: str = "identity"
    count: int = 1
    start: float = 0.0
    spacing: float = 0.0
    job_id: int | None = None
    client: str | None = None

    @property
    def t_llm(self) -> float:
        return self.ttft + self.n_out * self.itl

    def compute(self) -> ComputeModel:
        return ComputeModel(self.ttft, self.itl, self.n_out, STUBS[self.stub])


@dataclass
class ReplicaConfig:
    n: int = 5
    k: int = 3
    vnodes: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    gateways: int = 2
    layer_sizes: list[int] = field(default_factory=lambda: [4, 4, 4])
    storage_couriers: int = 2
    compute_couriers: int = 1
    mu: float = 0.2
    lambda_s: float = 2.5
    cover: bool = False
    cover_duration: float = 300.0
    delta: float = 0.2
    grid_n: int = 256
    bucketing: bool = True
    replicas: ReplicaConfig = field(default_factory=ReplicaConfig)
    payload_size: int = SPHINX_PAYLOAD
    jobs: list[JobSpec] = field(default_factory=lambda: [JobSpec()])
    write_trace: bool = True
    write_dumps: bool = True
    gossip: bool = True

    # -- serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        errors: list[str] = []
        known = {f.name for f in fields(cls)}
        for key in sorted(set(data) - known):
            errors.append(f"{key}: unknown field")
        kw = {k: v for k, v in data.items() if k in known}
        if "replicas" in kw:
            kw["replicas"] = _build(ReplicaConfig, kw["replicas"], "replicas", errors)
        if "jobs" in kw:
            if isinstance(kw["jobs"], list):
                kw["jobs"] = [_build(JobSpec, j, f"jobs[{i}]", errors) for i, j in enumerate(kw["jobs"])]
            else:
                errors.append("jobs: expected a list")
                kw.pop("jobs")
        cfg = cls(**kw)
        try:
            cfg.validate()
        except ConfigError as exc:
            errors.append(str(exc))
        if errors:
            raise ConfigError("; ".join(errors))
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        return cls.from_json(text)

    # -- validation

    def validate(self) -> "RunConfig":
        errors: list[str] = []

        def need(ok, name, msg):
            if not ok:
                errors.append(f"{name}: {msg}")

        def integer(name, value, lo):
            need(_is_int(value) and value >= lo, name, f"expected an integer >= {lo}, got {value!r}")

        def number(name, value, lo, strict=False):
            ok = _is_num(value) and math.isfinite(value) and (value > lo if strict else value >= lo)
            need(ok, name, f"expected a finite number {'>' if strict else '>='} {lo}, got {value!r}")

        integer("seed", self.seed, 0)
        integer("gateways", self.gateways, 1)
        ok = isinstance(self.layer_sizes, (list, tuple)) and len(self.layer_sizes) == MIX_LAYERS
        need(ok and all(_is_int(x) and x >= 1 for x in self.layer_sizes), "layer_sizes", f"expected {MIX_LAYERS} positive integers")
        integer("storage_couriers", self.storage_couriers, 1)
        integer("compute_couriers", self.compute_couriers, 1)
        number("mu", self.mu, 0)
        number("lambda_s", self.lambda_s, 0)
        number("cover_duration", self.cover_duration, 0)
        number("delta", self.delta, 0, strict=True)
        integer("grid_n", self.grid_n, 1)
        for name in ("cover", "bucketing", "write_trace", "write_dumps", "gossip"):
            need(isinstance(getattr(self, name), bool), name, "expected true or false")
        r = self.replicas
        integer("replicas.n", r.n, 1)
        integer("replicas.k", r.k, 1)
        integer("replicas.vnodes", r.vnodes, 1)
        if _is_int(r.n) and _is_int(r.k):
            need(r.k <= r.n, "replicas.k", f"must not exceed replicas.n ({r.n})")
        need(_is_int(self.payload_size) and 64 <= self.payload_size <= SPHINX_PAYLOAD, "payload_size", f"expected an integer in [64, {SPHINX_PAYLOAD}]")
        need(isinstance(self.jobs, list), "jobs", "expected a list")
        for i, job in enumerate(self.jobs if isinstance(self.jobs, list) else []):
            p = f"jobs[{i}]"
            integer(f"{p}.input_tokens", job.input_tokens, 0)
            integer(f"{p}.bucket_index", job.bucket_index, 1)
            if _is_int(job.bucket_index) and _is_int(self.grid_n):
                need(job.bucket_index <= self.grid_n, f"{p}.bucket_index", f"exceeds grid_n ({self.grid_n})")
            number(f"{p}.ttft", job.ttft, 0)
            number(f"{p}.itl", job.itl, 0)
            integer(f"{p}.n_out", job.n_out, 0)
            need(job.stub in STUBS, f"{p}.stub", f"expected one of {sorted(STUBS)}")
            integer(f"{p}.count", job.count, 1)
            number(f"{p}.start", job.start, 0)
            number(f"{p}.spacing", job.spacing, 0)
            need(job.job_id is None or (_is_int(job.job_id) and job.job_id >= 0), f"{p}.job_id", "expected a non-negative integer")
            need(job.client is None or (isinstance(job.client, str) and job.client), f"{p}.client", "expected a non-empty string")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    # -- derived objects

    @property
    def wire_size(self) -> int:
        return self.payload_size + PACKET_OVERHEAD

    def topology(self) -> Topology:
        services = (*self.storage_names, *self.compute_names)
        return Topology.build(self.gateways, tuple(self.layer_sizes), services)

    @property
    def storage_names(self) -> list[str]:
        return [f"storage-{i}" for i in range(self.storage_couriers)]

    @property
    def compute_names(self) -> list[str]:
        return [f"compute-{i}" for i in range(self.compute_couriers)]

    @property
    def grid(self) -> BucketGrid:
        return BucketGrid(self.delta, self.grid_n)

    def expanded_jobs(self) -> list[tuple[int, JobSpec, float]]:
        """``(job_id, spec, start_time)`` for every job after ``count`` expansion."""
        out = []
        next_id = 0
        for spec in self.jobs:
            base = spec.job_id if spec.job_id is not None else next_id
            for r in range(spec.count):
                out.append((base + r, spec, spec.start + r * spec.spacing))
            next_id = base + spec.count
        ids = [j for j, _, _ in out]
        if len(set(ids)) != len(ids):
            raise ConfigError("jobs: job ids collide")
        return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _build(cls, data, path, errors):
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in sorted(set(data) - known):
        errors.append(f"{path}.{key}: unknown field")
    return cls(**{k: v for k, v in data.items() if k in known})


def job_input(seed: int, job_id: int, tokens: int) -> bytes:
    """Deterministic pseudo-random input of ``tokens`` tokens for one job."""
    ss = np.random.SeedSequence(seed, spawn_key=(_INPUT_KEY, job_id))
    return np.random.Generator(np.random.PCG64(ss)).bytes(tokens * TOKEN_BYTES)


@dataclass
class World:
    sim: Simulator
    deployment: Deployment
    replicas: dict[str, ReplicaStore]
    placement: PlacementConfig


def build_world(cfg: RunConfig, seed: int | None = None, *, record_trace: bool = True, backend: str | None = None) -> World:
    sim = Simulator(
        cfg.topology(),
        DelayModel(cfg.mu),
        cfg.seed if seed is None else seed,
        wire_size=cfg.wire_size,
        record_trace=record_trace,
        keep_echoes=False,
        backend=backend,
    )
    ids = [f"replica-{i}" for i in range(cfg.replicas.n)]
    placement = PlacementConfig(tuple(ids), cfg.replicas.k, cfg.replicas.vnodes)
    replicas = {rid: ReplicaStore(rid, ids) for rid in ids}
    dep = Deployment(
        sim,
        replicas,
        placement,
        cfg.storage_names,
        cfg.compute_names,
        cfg.grid,
        bucketing=cfg.bucketing,
        chunk_bytes=cfg.payload_size,
    )
    return World(sim, dep, replicas, placement)


@dataclass
class E2EResult:
    outcomes: list[JobOutcome]
    runs: list[JobRun]
    world: World
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def mix_times(self) -> np.ndarray:
        return np.array([o.mix_time for o in self.outcomes if o.mix_time is not None])

    def summary(self) -> dict:
        statuses: dict[str, int] = {}
        for o in self.outcomes:
            statuses[o.status] = statuses.get(o.status, 0) + 1
        mt = self.mix_times
        return {
            "jobs": len(self.outcomes),
            "statuses": dict(sorted(statuses.items())),
            "mix_time_mean": float(mt.mean()) if mt.size else None,
            "mix_time_var": float(mt.var(ddof=1)) if mt.size > 1 else None,
            "echoes": self.world.sim.echo_count,
            "link_events": int(self.world.sim.engine.event_count),
            "outputs_match": sum(1 for r in self.runs if r.outcome and r.outcome.output is not None and r.outcome.output == STUBS[_stub_of(r)](r.data)),
        }


def _stub_of(run: JobRun) -> str:
    for name, fn in STUBS.items():
        if run.compute.stub_fn is fn:
            return name
    return "identity"


def run_e2e(cfg: RunConfig, out_dir=None, *, backend: str | None = None) -> E2EResult:
    """Run every configured job to completion and optionally write the artifacts."""
    cfg.validate()
    jobs = cfg.expanded_jobs()
    world = build_world(cfg, backend=backend)
    sim, dep = world.sim, world.deployment
    clients: dict[str, Client] = {}
    runs: list[JobRun] = []
    for job_id, spec, start in jobs:
        name = spec.client or f"client-{job_id}"
        if name not in clients:
            clients[name] = Client(dep, name)
            if cfg.cover:
                sim.start_cover(name, CoverSource(cfg.lambda_s), cfg.cover_duration)
        run = clients[name].submit(job_input(cfg.seed, job_id, spec.input_tokens), spec.bucket_index, spec.compute(), job_id)
        runs.append(run)
        sim.call_at(start, run.start)
    sim.run()
    outcomes = [r.outcome or JobOutcome(r.job_id, "incomplete") for r in runs]
    result = E2EResult(outcomes, runs, world)
    if cfg.gossip:
        full_gossip(world.replicas, world.placement)
    if out_dir is not None:
        result.files = write_e2e(result, cfg, Path(out_dir))
    return result


def write_e2e(result: E2EResult, cfg: RunConfig, out: Path) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["outcomes"] = _write(out / "outcomes.json", json.dumps([o.to_record() for o in result.outcomes], indent=1) + "\n")
    files["summary"] = _write(out / "summary.json", json.dumps(result.summary(), indent=1, sort_keys=True) + "\n")
    files["config"] = _write(out / "config.json", cfg.to_json() + "\n")
    if cfg.write_trace:
        trace = result.world.sim.observer_view()
        files["trace"] = _write(out / "trace.jsonl", "".join(line + "\n" for line in trace.jsonl_lines()))
    if cfg.write_dumps:
        stores = out / "stores"
        stores.mkdir(exist_ok=True)
        for rid, store in sorted(result.world.replicas.items()):
            files[f"store:{rid}"] = _write(stores / f"{rid}.jsonl", "".join(line + "\n" for line in store.dump_lines()))
    return files


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    return path


# -- IO-unlinkability experiment

FEATURES = ("last_event_offset", "access_link_packets", "median_gap")


@dataclass
class DistinguisherReport:
    trials: int
    correct: int
    adversary_accuracy: float | None
    confidence_interval: tuple[float, float]
    features: tuple[str, ...] = FEATURES
    bucketing: bool = True
    counterfactual_identical: int = 0

    @property
    def advantage(self) -> float | None:
        return None if self.adversary_accuracy is None else abs(self.adversary_accuracy - 0.5)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confidence_interval"] = list(self.confidence_interval)
        d["features"] = list(self.features)
        d["advantage"] = self.advantage
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def client_features(trace, client: str) -> np.ndarray:
    """Timing features on one client's access link, computed from the observer trace only."""
    t = np.sort(trace.link_events(client))
    if t.size == 0:
        return np.zeros(3)
    gaps = np.diff(t)
    return np.array([t[-1] - t[0], float(t.size), float(np.median(gaps)) if gaps.size else 0.0])


# a slower job means a later last event, more polls and denser traffic
_ORIENT = np.array([1.0, 1.0, -1.0])


def adversary_guess(trace, clients: tuple[str, str], slower_job: int | None, coin: float) -> int:
    """Guess whether the first client received job 1's output.

    Each feature votes by the sign of its difference between the two
    clients, oriented so that "looks slower" points at the publicly slower
    job.  Ties, and jobs of equal public cost, fall back on ``coin``.
    """
    if slower_job is None:
        return int(coin < 0.5)
    diff = client_features(trace, clients[0]) - client_features(trace, clients[1])
    score = float(np.sum(np.sign(diff) * _ORIENT))
    if score == 0:
        return int(coin < 0.5)
    looks_slower = score > 0
    return slower_job if looks_slower else 1 - slower_job


def check_iou_jobs(cfg: RunConfig) -> tuple[JobSpec, JobSpec]:
    if len(cfg.jobs) != 2 or any(j.count != 1 for j in cfg.jobs):
        raise ConfigError("jobs: the experiment needs exactly two single jobs")
    a, b = cfg.jobs
    if cfg.bucketing:
        grid = cfg.grid
        oa = a.t_llm >= grid.edge(a.bucket_index)
        ob = b.t_llm >= grid.edge(b.bucket_index)
        if (a.bucket_index, oa) != (b.bucket_index, ob):
            raise ConfigError("jobs: bucket index and overflow flag must match across the two jobs")
        if a.input_tokens != b.input_tokens or a.stub != b.stub:
            raise ConfigError("jobs: input length and stub must match so output sizes agree")
    return a, b


def _trial_seed(seed: int, trial: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(_TRIAL_KEY, trial))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _simulate_pairing(cfg: RunConfig, seed: int, swap: int, inputs, specs):
    world = build_world(cfg, seed)
    dep = world.deployment
    names = ("client-0", "client-1")
    runs = []
    for i, (name, spec) in enumerate(zip(names, specs)):
        runs.append(Client(dep, name).submit(inputs[i], spec.bucket_index, spec.compute(), job_id=i))
    # the challenger hands client 0 the output capability of job ``swap``
    runs[0].fetch_cap = runs[swap].read_out
    runs[1].fetch_cap = runs[1 - swap].read_out
    for r in runs:
        world.sim.call_at(0.0, r.start)
    world.sim.run()
    return world.sim.observer_view(), runs


def run_iou_experiment(cfg: RunConfig, trials: int) -> DistinguisherReport:
    """Play the input-output unlinkability game ``trials`` times.

    Each trial simulates both pairings under one seed, so both worlds share
    every delay draw up to the point where the protocol makes them differ.
    The adversary sees only the observer trace of the world the challenger
    picked.
    """
    cfg.validate()
    specs = check_iou_jobs(cfg)
    if trials < 0:
        raise ConfigError("trials: must be non-negative")
    if trials == 0:
        return DistinguisherReport(0, 0, None, (0.0, 1.0), bucketing=cfg.bucketing)
    ta, tb = specs[0].t_llm, specs[1].t_llm
    slower = None if ta == tb else int(tb > ta)
    inputs = [job_input(cfg.seed, i, s.input_tokens) for i, s in enumerate(specs)]
    correct = identical = 0
    for trial in range(trials):
        seed = _trial_seed(cfg.seed, trial)
        challenge = RngStreams(seed).challenge
        b = int(challenge.integers(2))
        coin = float(challenge.random())
        views = [_simulate_pairing(cfg, seed, w, inputs, specs)[0] for w in (0, 1)]
        identical += _same_trace(*views)
        guess = adversary_guess(views[b], ("client-0", "client-1"), slower, coin)
        correct += guess == b
    ci = binomtest(correct, trials).proportion_ci(0.95, method="exact")
    return DistinguisherReport(trials, correct, correct / trials, (float(ci.low), float(ci.high)), bucketing=cfg.bucketing, counterfactual_identical=identical)


def _same_trace(a, b) -> bool:
    return len(a) == len(b) and np.array_equal(a.times, b.times) and a.src == b.src and a.dst == b.dst


def iou_config(bucketing: bool = True, seed: int = 0, **overrides) -> RunConfig:
    """Two-client setup: a 1 s job against a slower one, both in bucket 20 (4 s).

    With bucketing the second job takes 3 s, so both finish inside the
    same bucket; without it the second job takes 11 s.
    """
    slow = 3.0 if bucketing else 11.0
    jobs = [JobSpec(input_tokens=16, bucket_index=20, ttft=1.0), JobSpec(input_tokens=16, bucket_index=20, ttft=slow)]
    cfg = RunConfig(seed=seed, bucketing=bucketing, jobs=jobs, write_dumps=False, gossip=False)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()


# -- tables


def _fmt_mix(x: float) -> str:
    s = f"{x:.2f}"
    return s[:-1] if s.endswith("0") else s


def table3_csv(scenarios=perfmodel.SCENARIOS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "n_in", "n_out", "ttft_ms", "itl_ms", "t_llm_s"])
    for s in scenarios:
        w.writerow([s.name, s.n_in, s.n_out, f"{s.ttft * 1e3:.2f}", f"{s.itl * 1e3:.2f}", f"{perfmodel.llm_latency(s):.2f}"])
    return buf.getvalue()


def table4_csv(mu: float = 0.2, delta: float = 0.2, echoes: int = perfmodel.PIPELINE_ECHOES, scenarios=perfmodel.SCENARIOS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "t_llm_rounded", "t_mix", "total", "mix_pct"])
    for r in perfmodel.overhead_table(scenarios, mu, delta, echoes):
        w.writerow([r.name, f"{r.t_llm_rounded:.2f}", _fmt_mix(r.t_mix), f"{r.total:.2f}", r.mix_pct])
    return buf.getvalue()


def aligned(csv_text: str) -> str:
    rows = list(csv.reader(io.StringIO(csv_text)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows)


def emit_tables(out_dir, mu: float = 0.2, delta: float = 0.2, echoes: int = perfmodel.PIPELINE_ECHOES) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create {out}: {exc.strerror}") from None
    return {
        "table3": _write(out / "table3.csv", table3_csv()),
        "table4": _write(out / "table4.csv", table4_csv(mu, delta, echoes)),
    }
