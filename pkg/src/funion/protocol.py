"""Store -> compute -> store inference over Pigeonhole, with latency buckets.

One job is five echoes through the mixnet:

E1 upload    Alice -> storage courier, input chunks sealed under ``W_in``
E2 dispatch  Alice -> Charlie, ticket ``(R_in, W_out, j)``
E3 fetch     Charlie -> storage courier, input chunks read with ``R_in``
E4 store     Charlie -> storage courier, result sealed under ``W_out``,
             sent exactly at bucket edge ``t_j``
E5 fetch     Alice -> storage courier, result read with ``R_out``

Bucket edges are measured from the moment Charlie holds the input (start
of compute), so the visible gap between E3 and E4 is always ``t_j``.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import bacap
from .bacap import CTX_IN, CTX_OUT, MAX_PLAINTEXT, ReadCapability, WriteCapability
from .mixnet.sim import Simulator
from .pigeonhole import (
    AllReplicasFailed,
    Courier,
    Envelope,
    Get,
    GetReply,
    PlacementConfig,
    Put,
    PutReply,
    ReplicaStore,
    select_replicas,
    write_quorum,
)

TOKEN_BYTES = 4
CHUNK_BYTES = MAX_PLAINTEXT
CHUNK_TOKENS = CHUNK_BYTES // TOKEN_BYTES

# output records: kind byte + 4-byte total chunk count + data
_DATA = 0x00
OVERFLOW_MARKER = b"\xff"
OUT_HEADER = 5
OUT_CHUNK_BYTES = CHUNK_BYTES - OUT_HEADER


class ProtocolError(Exception):
    pass


class ConfigError(ProtocolError, ValueError):
    pass


class FreshnessViolation(ProtocolError):
    """A write capability was offered for a second job."""


class JobFailed(ProtocolError):
    pass


class FetchTimeout(ProtocolError):
    pass


class IntegrityError(ProtocolError):
    pass


class BucketStatus(enum.Enum):
    OK = "ok"
    OVERFLOW = "overflow"


@dataclass(frozen=True)
class BucketGrid:
    """Public release grid ``t_m = m * delta`` for ``m = 0 .. n``."""

    delta: float = 0.2
    n: int = 256

    def __post_init__(self):
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ConfigError("bucket width must be positive")
        if self.n < 1:
            raise ConfigError("grid needs at least one edge after t_0")

    def edge(self, j: int) -> float:
        if not 0 <= j <= self.n:
            raise ConfigError(f"bucket index {j} outside [0, {self.n}]")
        return j * self.delta

    @property
    def edges(self) -> list[float]:
        return [self.edge(m) for m in range(self.n + 1)]

    @property
    def t_n(self) -> float:
        return self.edge(self.n)

    def index_of(self, t: float) -> int | None:
        m = round(t / self.delta)
        if 0 <= m <= self.n and math.isclose(m * self.delta, t, rel_tol=1e-12, abs_tol=1e-12):
            return m
        return None

    def bucket_for(self, t: float) -> int:
        """Smallest index whose edge lies strictly after ``t`` (finishing on an edge overflows)."""
        m = math.floor(t / self.delta + 1e-9) + 1
        if m > self.n:
            raise ConfigError(f"no bucket on this grid admits t={t}")
        return max(m, 1)


def round_up_to_bucket(t: float, delta: float) -> float:
    """``ceil(t / delta) * delta``; exact multiples map to themselves."""
    if t < 0 or delta <= 0:
        raise ValueError("need t >= 0 and delta > 0")
    q = t / delta
    m = round(q)
    if not math.isclose(q, m, rel_tol=0.0, abs_tol=1e-9):
        m = math.ceil(q)
    return m * delta


def wait_for_bucket_edge(t_j: float, t_finish: float, grid: BucketGrid) -> tuple[BucketStatus, float]:
    """Release decision for a result that finished at ``t_finish``.

    Both outcomes are released at ``t_j``, never earlier.
    """
    if grid.index_of(t_j) is None:
        raise ConfigError(f"t_j={t_j} is not an edge of the grid")
    if t_finish < 0:
        raise ValueError("t_finish must be non-negative")
    if t_finish >= t_j:
        return BucketStatus.OVERFLOW, t_j
    return BucketStatus.OK, t_j


def observable_outcome(status: BucketStatus, release_time: float):
    """What an observer who knows the bucket index can tell apart."""
    return "OVERFLOW" if status is BucketStatus.OVERFLOW else release_time


def identity(x: bytes) -> bytes:
    return x


@dataclass(frozen=True)
class ComputeModel:
    """Simulated model cost ``ttft + n_out * itl`` and a deterministic stand-in forward pass."""

    ttft: float = 0.0
    itl: float = 0.0
    n_out: int = 0
    stub_fn: Callable[[bytes], bytes] = identity

    def __post_init__(self):
        if self.ttft < 0 or self.itl < 0 or self.n_out < 0:
            raise ConfigError("compute model parameters must be non-negative")

    @property
    def t_llm(self) -> float:
        return self.ttft + self.n_out * self.itl


def split_chunks(data: bytes, size: int = CHUNK_BYTES) -> list[bytes]:
    """Fixed-size chunks; empty input still gives one (empty) chunk."""
    if not data:
        return [b""]
    return [data[i : i + size] for i in range(0, len(data), size)]


def chunk_count(n_tokens: int) -> int:
    return max(1, math.ceil(n_tokens / CHUNK_TOKENS))


class CapabilityRegistry:
    """Remembers every write root handed to a job; reuse is refused."""

    def __init__(self):
        self._used: set[bytes] = set()

    def __len__(self):
        return len(self._used)

    def __contains__(self, cap: WriteCapability):
        return cap.p_root in self._used

    def register(self, cap: WriteCapability) -> None:
        root = cap.p_root
        if root in self._used:
            raise FreshnessViolation("write capability already used by another job")
        self._used.add(root)


@dataclass
class DispatchTicket:
    job_id: int
    read_in: ReadCapability
    write_out: WriteCapability
    bucket_index: int
    chunk_count: int
    compute: ComputeModel


@dataclass
class InferenceJob:
    job_id: int
    read_in: ReadCapability
    write_out: WriteCapability
    bucket_index: int
    chunk_count: int


@dataclass
class JobOutcome:
    job_id: int
    status: str
    release_time: float | None = None
    result_boxes: list[bytes] = field(default_factory=list)
    t_finish: float | None = None
    output: bytes | None = None
    error: str | None = None
    total_latency: float | None = None
    mix_time: float | None = None
    compute_bucket_time: float | None = None
    echo_times: dict[str, float] = field(default_factory=dict)
    fetch_polls: int = 0

    def to_record(self) -> dict:
        return {
            "job_id": self.job_id,
            "status": self.status,
            "release_time": self.release_time,
            "total_latency": self.total_latency,
            "mix_time": self.mix_time,
            "compute_bucket_time": self.compute_bucket_time,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


class _Phase:
    """Bookkeeping for a group of echoes sent together."""

    __slots__ = ("t0", "pending", "replies", "t_end", "done")

    def __init__(self, t0: float, n: int, done: Callable[["_Phase"], None]):
        self.t0 = t0
        self.pending = n
        self.replies: list = [None] * n
        self.t_end: float | None = None
        self.done = done

    @property
    def span(self) -> float:
        return self.t_end - self.t0

    def returned(self, i: int, t: float, reply) -> None:
        self.replies[i] = reply
        self.pending -= 1
        if self.pending == 0:
            self.t_end = t
            self.done(self)


class Deployment:
    """Couriers, compute services and replicas wired onto one simulator."""

    def __init__(
        self,
        sim: Simulator,
        replicas: dict[str, ReplicaStore],
        placement: PlacementConfig,
        storage_couriers: Sequence[str],
        compute_couriers: Sequence[str],
        grid: BucketGrid | None = None,
        *,
        bucketing: bool = True,
        registry: CapabilityRegistry | None = None,
        chunk_bytes: int = CHUNK_BYTES,
    ):
        self.sim = sim
        self.replicas = replicas
        self.placement = placement
        self.grid = grid or BucketGrid()
        self.bucketing = bucketing
        self.registry = registry if registry is not None else CapabilityRegistry()
        if not OUT_HEADER < chunk_bytes <= CHUNK_BYTES:
            raise ConfigError(f"chunk size must be in ({OUT_HEADER}, {CHUNK_BYTES}]")
        self.chunk_bytes = chunk_bytes
        for name in (*storage_couriers, *compute_couriers):
            if name not in sim.topology.services:
                raise ConfigError(f"{name!r} is not a service node of the topology")
        if not storage_couriers or not compute_couriers:
            raise ConfigError("need at least one storage courier and one compute courier")
        self.storage_couriers = list(storage_couriers)
        self.couriers = {name: Courier(name) for name in self.storage_couriers}
        self.charlies = {name: ComputeService(self, name) for name in compute_couriers}
        self.rng = sim.streams.protocol

    def pick(self, names: Sequence[str]) -> str:
        return names[int(self.rng.integers(len(names)))]

    def new_capability(self) -> tuple[WriteCapability, ReadCapability]:
        return bacap.generate_capability(self.sim.streams.entropy(bacap.ENTROPY_SIZE))

    def envelope_for(self, op) -> Envelope:
        box_id = op.record.box_id if isinstance(op, Put) else op.box_id
        return Envelope(tuple(select_replicas(box_id, self.placement)), op)

    def storage_echo(self, origin: str, envelope: Envelope, label: str, on_return: Callable) -> None:
        courier = self.couriers[self.pick(self.storage_couriers)]

        def deliver(echo):
            try:
                return courier.forward(envelope, self.replicas, echo.t_deliver)
            except AllReplicasFailed:
                if isinstance(envelope.op, Put):
                    return PutReply(0, (), write_quorum(len(envelope.target_replicas)))
                return GetReply(None)

        self.sim.send_echo(
            origin,
            courier.courier_id,
            body=envelope,
            # record and envelope framing ride in the packet overhead
            payload_size=min(envelope.size, self.chunk_bytes),
            label=label,
            on_deliver=deliver,
            on_return=on_return,
        )


class ComputeService:
    """Charlie: fetch input, run the model, wait for the bucket edge, store the result."""

    def __init__(self, dep: Deployment, name: str):
        self.dep = dep
        self.name = name
        self.jobs_seen = 0

    def accept(self, ticket: DispatchTicket, run: "JobRun") -> None:
        self.jobs_seen += 1
        dep = self.dep
        m = ticket.chunk_count
        keys = [bacap.derive_box(ticket.read_in, i, CTX_IN) for i in range(1, m + 1)]

        def fetched(phase: _Phase):
            run.e3 = phase.span
            self._compute(ticket, run, phase.replies, keys)

        phase = _Phase(dep.sim.now, m, fetched)
        for i, k in enumerate(keys):
            dep.storage_echo(
                self.name,
                dep.envelope_for(Get(k.box_id)),
                "E3",
                lambda echo, i=i: phase.returned(i, echo.t_return, echo.reply),
            )

    def _compute(self, ticket: DispatchTicket, run: "JobRun", replies: list[GetReply], keys) -> None:
        dep = self.dep
        try:
            chunks = []
            for i, reply in enumerate(replies, start=1):
                if not reply.found:
                    raise JobFailed(f"input box {i} not found on any replica")
                chunks.append(bacap.open_with_keys(keys[i - 1], reply.record))
        except (JobFailed, bacap.OpenError) as exc:
            run.fail("JobFailed", str(exc))
            return
        epoch = dep.sim.now
        y = ticket.compute.stub_fn(b"".join(chunks))
        t_finish = ticket.compute.t_llm
        if dep.bucketing:
            status, offset = wait_for_bucket_edge(dep.grid.edge(ticket.bucket_index), t_finish, dep.grid)
        else:
            status, offset = BucketStatus.OK, t_finish
        run.charlie_epoch = epoch
        run.t_finish = t_finish
        run.release_offset = offset
        run.bucket_status = status
        dep.sim.call_at(epoch + offset, lambda: self._release(ticket, run, status, y))

    def _release(self, ticket: DispatchTicket, run: "JobRun", status: BucketStatus, y: bytes) -> None:
        dep = self.dep
        run.t_release = dep.sim.now
        if status is BucketStatus.OVERFLOW:
            payloads = [OVERFLOW_MARKER]
        else:
            parts = split_chunks(y, dep.chunk_bytes - OUT_HEADER)
            header = struct.pack(">BI", _DATA, len(parts))
            payloads = [header + p for p in parts]
        records = [bacap.seal(ticket.write_out, i, CTX_OUT, p) for i, p in enumerate(payloads, start=1)]
        run.output_boxes = [r.box_id for r in records]
        if status is BucketStatus.OK:
            run.result_boxes = list(run.output_boxes)

        def stored(phase: _Phase):
            run.e4 = phase.span
            run._fill_echo_times()
            if not all(r.ok for r in phase.replies):
                run.fail("JobFailed", "result store missed the write quorum")

        phase = _Phase(dep.sim.now, len(records), stored)
        for i, rec in enumerate(records):
            dep.storage_echo(
                self.name,
                dep.envelope_for(Put(rec)),
                "E4",
                lambda echo, i=i: phase.returned(i, echo.t_return, echo.reply),
            )


class JobRun:
    """One client's job as it moves through the five echoes."""

    def __init__(self, client: "Client", job_id: int, data: bytes, bucket_index: int, compute: ComputeModel, on_done=None):
        dep = client.dep
        self.client = client
        self.dep = dep
        self.job_id = job_id
        self.data = data
        self.bucket_index = bucket_index
        self.compute = compute
        self.on_done = on_done
        dep.grid.edge(bucket_index)
        if bucket_index < 1:
            raise ConfigError("bucket index must be >= 1")
        self.write_in, self.read_in = dep.new_capability()
        self.write_out, self.read_out = dep.new_capability()
        # the IO-U challenger may hand this client someone else's output
        self.fetch_cap: ReadCapability = self.read_out
        self.chunks = split_chunks(data, dep.chunk_bytes)
        self.input_boxes: list[bytes] = []
        self.result_boxes: list[bytes] = []
        # every box written under ctx_out, including an overflow marker
        self.output_boxes: list[bytes] = []
        self.e1 = self.e2 = self.e3 = self.e4 = self.e5 = None
        self.t_start = self.t_ack = self.t_first_poll = self.t_done = None
        self.charlie = None
        self.charlie_epoch = self.t_release = self.t_finish = self.release_offset = None
        self.bucket_status: BucketStatus | None = None
        self.polls = 0
        self._first_keys = None
        self.outcome: JobOutcome | None = None

    @property
    def job(self) -> InferenceJob:
        return InferenceJob(self.job_id, self.read_in, self.write_out, self.bucket_index, len(self.chunks))

    # E1
    def start(self) -> None:
        dep = self.dep
        dep.registry.register(self.write_in)
        self.t_start = dep.sim.now
        records = [bacap.seal(self.write_in, i, CTX_IN, c) for i, c in enumerate(self.chunks, start=1)]
        self.input_boxes = [r.box_id for r in records]

        def uploaded(phase: _Phase):
            self.e1 = phase.span
            if not all(isinstance(r, PutReply) and r.ok for r in phase.replies):
                self.fail("JobFailed", "input upload missed the write quorum")
                return
            self.dispatch()

        phase = _Phase(dep.sim.now, len(records), uploaded)
        for i, rec in enumerate(records):
            dep.storage_echo(
                self.client.name,
                dep.envelope_for(Put(rec)),
                "E1",
                lambda echo, i=i: phase.returned(i, echo.t_return, echo.reply),
            )

    # E2
    def dispatch(self) -> None:
        dep = self.dep
        dep.registry.register(self.write_out)
        name = dep.pick(sorted(dep.charlies))
        self.charlie = name
        ticket = DispatchTicket(self.job_id, self.read_in, self.write_out, self.bucket_index, len(self.chunks), self.compute)
        t0 = dep.sim.now

        def deliver(echo):
            dep.charlies[name].accept(ticket, self)
            return "ack"

        def acked(echo):
            self.e2 = echo.t_return - t0
            self.t_ack = echo.t_return
            wait = dep.grid.edge(self.bucket_index) if dep.bucketing else 0.0
            dep.sim.call_at(self.t_ack + wait, self.poll)

        dep.sim.send_echo(self.client.name, name, body=ticket, payload_size=256, label="E2", on_deliver=deliver, on_return=acked)

    # E5
    def poll(self) -> None:
        if self.outcome is not None:
            return
        dep = self.dep
        if self.t_first_poll is None:
            self.t_first_poll = dep.sim.now
        self.polls += 1
        first = self.polls == 1
        if self._first_keys is None:
            self._first_keys = bacap.derive_box(self.fetch_cap, 1, CTX_OUT)
        box_id = self._first_keys.box_id
        t0 = dep.sim.now

        def back(echo):
            if first:
                self.e5 = echo.t_return - t0
            self._first_box(echo.reply)

        dep.storage_echo(self.client.name, dep.envelope_for(Get(box_id)), "E5", back)

    def _first_box(self, reply: GetReply) -> None:
        dep = self.dep
        if self.outcome is not None:
            return
        if not reply.found:
            budget = 3 * dep.grid.t_n
            if dep.sim.now + dep.grid.delta - self.t_first_poll > budget:
                self.fail("FetchTimeout", f"result not found after {self.polls} polls")
            else:
                dep.sim.call_later(dep.grid.delta, self.poll)
            return
        try:
            first = bacap.open_with_keys(self._first_keys, reply.record)
        except bacap.OpenError as exc:
            self.fail("IntegrityError", f"{type(exc).__name__}: {exc}")
            return
        if first == OVERFLOW_MARKER:
            self.finish("overflow", None)
            return
        kind, total = struct.unpack_from(">BI", first)
        if kind != _DATA or total < 1:
            self.fail("IntegrityError", "malformed result header")
            return
        if total == 1:
            self.finish("ok", first[OUT_HEADER:])
            return
        parts: list[bytes | None] = [first[OUT_HEADER:]] + [None] * (total - 1)
        keys = [bacap.derive_box(self.fetch_cap, k, CTX_OUT) for k in range(2, total + 1)]

        def rest(phase: _Phase):
            for idx, r in enumerate(phase.replies, start=2):
                if not r.found:
                    self.fail("FetchTimeout", f"result chunk {idx} missing")
                    return
                try:
                    parts[idx - 1] = bacap.open_with_keys(keys[idx - 2], r.record)[OUT_HEADER:]
                except bacap.OpenError as exc:
                    self.fail("IntegrityError", f"{type(exc).__name__}: {exc}")
                    return
            self.finish("ok", b"".join(parts))

        phase = _Phase(dep.sim.now, total - 1, rest)
        for i, k in enumerate(keys):
            dep.storage_echo(
                self.client.name,
                dep.envelope_for(Get(k.box_id)),
                "E5",
                lambda echo, i=i: phase.returned(i, echo.t_return, echo.reply),
            )

    def finish(self, status: str, output: bytes | None) -> None:
        self.t_done = self.dep.sim.now
        self._settle(JobOutcome(self.job_id, status, output=output))

    def fail(self, error: str, message: str) -> None:
        if self.outcome is not None:
            return
        self.t_done = self.dep.sim.now
        self._settle(JobOutcome(self.job_id, "failed", output=None, error=f"{error}: {message}"))

    def _fill_echo_times(self) -> None:
        # Alice can read the result once E4 reaches a replica, before E4 returns to Charlie
        outcome = self.outcome
        if outcome is None:
            return
        outcome.echo_times = {k: v for k, v in zip(("E1", "E2", "E3", "E4", "E5"), (self.e1, self.e2, self.e3, self.e4, self.e5)) if v is not None}
        if len(outcome.echo_times) == 5:
            outcome.mix_time = sum(outcome.echo_times.values())

    def _settle(self, outcome: JobOutcome) -> None:
        outcome.release_time = self.release_offset
        outcome.result_boxes = list(self.result_boxes)
        outcome.t_finish = self.t_finish
        outcome.fetch_polls = self.polls
        self.outcome = outcome
        self._fill_echo_times()
        outcome.compute_bucket_time = self.release_offset
        if self.t_done is not None and self.t_start is not None:
            outcome.total_latency = self.t_done - self.t_start
        if self.on_done is not None:
            self.on_done(self)


class Client:
    """Alice: uploads, dispatches and fetches her own jobs."""

    def __init__(self, dep: Deployment, name: str, gateway: str | None = None):
        self.dep = dep
        self.name = name
        dep.sim.attach(name, gateway)

    def submit(self, data: bytes, bucket_index: int, compute: ComputeModel | None = None, job_id: int = 0, on_done=None) -> JobRun:
        run = JobRun(self, job_id, data, bucket_index, compute or ComputeModel(), on_done)
        return run


def five_echo_latency(run: JobRun) -> dict:
    """Per-echo mixnet times, compute-bucket time and wall clock for one finished job.

    ``total`` is the sequential view: mix time plus bucket time, with E5
    the first fetch attempt.  ``wall_clock`` is what the client actually
    waited; Charlie's E3 and E4 overlap the client's wait for ``t_j``, and
    polls that arrive before the result is stored add retries.
    """
    o = run.outcome
    if o is None:
        raise ProtocolError("job has not finished")
    rec = dict(o.echo_times)
    rec["mix_time"] = o.mix_time
    rec["compute_bucket_time"] = o.compute_bucket_time
    rec["total"] = None if o.mix_time is None or o.compute_bucket_time is None else o.mix_time + o.compute_bucket_time
    rec["wall_clock"] = o.total_latency
    rec["fetch_polls"] = o.fetch_polls
    return rec
