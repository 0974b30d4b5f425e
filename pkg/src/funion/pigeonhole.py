"""Pigeonhole storage: replicas, consistent-hash placement, gossip, couriers."""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from .bacap import BOX_ID_SIZE, BoxRecord, verify_record

DEFAULT_VNODES = 64


class PigeonholeError(Exception):
    pass


class ConfigError(PigeonholeError, ValueError):
    pass


class NotFound(PigeonholeError, KeyError):
    """No record stored under the requested Box-ID."""


class AllReplicasFailed(PigeonholeError):
    """None of an envelope's target replicas could be reached."""


def _ring_point(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


@dataclass(frozen=True)
class PlacementConfig:
    """Hash ring with ``vnodes`` points per replica; each box lives on ``k`` replicas."""

    replica_ids: tuple[str, ...]
    k: int
    vnodes: int = DEFAULT_VNODES
    ring: tuple[tuple[int, str], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(self.replica_ids)
        object.__setattr__(self, "replica_ids", ids)
        if len(set(ids)) != len(ids):
            raise ConfigError("replica ids must be unique")
        if not 1 <= self.k <= len(ids):
            raise ConfigError(f"need 1 <= k <= n, got k={self.k}, n={len(ids)}")
        if self.vnodes < 1:
            raise ConfigError("vnodes must be positive")
        ring = sorted(
            (_ring_point(rid.encode() + v.to_bytes(4, "big")), rid) for rid in ids for v in range(self.vnodes)
        )
        object.__setattr__(self, "ring", tuple(ring))
        object.__setattr__(self, "_points", [p for p, _ in ring])

    @property
    def n(self) -> int:
        return len(self.replica_ids)


def select_replicas(box_id: bytes, cfg: PlacementConfig) -> list[str]:
    """The ``k`` replicas responsible for ``box_id``, in ring-walk order."""
    if cfg.k > cfg.n:
        raise ConfigError("k exceeds the number of replicas")
    start = bisect.bisect_left(cfg._points, _ring_point(box_id))
    chosen: list[str] = []
    ring = cfg.ring
    for step in range(len(ring)):
        rid = ring[(start + step) % len(ring)][1]
        if rid not in chosen:
            chosen.append(rid)
            if len(chosen) == cfg.k:
                break
    return chosen


class PutStatus(enum.Enum):
    ACK = "ack"
    BAD_SIGNATURE = "bad-signature"
    CONFLICT = "conflict"


@dataclass(frozen=True)
class Put:
    record: BoxRecord


@dataclass(frozen=True)
class Get:
    box_id: bytes


Op = Union[Put, Get]


class ReplicaStore:
    """Key-value store indexed by Box-ID that only admits verified records."""

    def __init__(self, replica_id: str, peers: Iterable[str] = ()):
        self.replica_id = replica_id
        self.peer_set = [p for p in peers if p != replica_id]
        self.records: dict[bytes, BoxRecord] = {}
        self.online = True

    def __repr__(self):
        return f"ReplicaStore({self.replica_id!r}, records={len(self.records)})"

    def put(self, record: BoxRecord) -> PutStatus:
        existing = self.records.get(record.box_id)
        if existing is not None:
            return PutStatus.ACK if existing == record else PutStatus.CONFLICT
        if not verify_record(record):
            return PutStatus.BAD_SIGNATURE
        self.records[record.box_id] = record
        return PutStatus.ACK

    def get(self, box_id: bytes) -> BoxRecord:
        try:
            return self.records[box_id]
        except KeyError:
            raise NotFound(box_id.hex()) from None

    def handle(self, op: Op):
        if isinstance(op, Put):
            return self.put(op.record)
        try:
            return self.get(op.box_id)
        except NotFound:
            return None

    def dump_lines(self) -> list[str]:
        return [
            json.dumps(
                {"replica_id": self.replica_id, "box_id_hex": box_id.hex(), "record_hex": rec.to_bytes().hex()},
                sort_keys=True,
            )
            for box_id, rec in sorted(self.records.items())
        ]


def replica_put(store: ReplicaStore, record: BoxRecord) -> PutStatus:
    return store.put(record)


def replica_get(store: ReplicaStore, box_id: bytes) -> BoxRecord:
    return store.get(box_id)


def gossip_sync(a: ReplicaStore, b: ReplicaStore, cfg: PlacementConfig) -> int:
    """Anti-entropy between two replicas; returns the number of records copied.

    A record moves only when its placement set holds both replicas, and the
    receiving side re-verifies it like any other write.
    """
    if a is b or a.replica_id == b.replica_id:
        raise ConfigError("cannot gossip a replica with itself")
    copied = 0
    for src, dst in ((a, b), (b, a)):
        for box_id, record in list(src.records.items()):
            if box_id in dst.records:
                continue
            placed = select_replicas(box_id, cfg)
            if src.replica_id in placed and dst.replica_id in placed:
                if dst.put(record) is PutStatus.ACK:
                    copied += 1
    return copied


def full_gossip(stores: Mapping[str, ReplicaStore], cfg: PlacementConfig) -> int:
    ids = sorted(stores)
    total = 0
    for i, x in enumerate(ids):
        for y in ids[i + 1 :]:
            total += gossip_sync(stores[x], stores[y], cfg)
    return total


def _op_size(op: Op) -> int:
    return len(op.record) if isinstance(op, Put) else BOX_ID_SIZE


@dataclass(frozen=True)
class Envelope:
    """Request addressed to replicas; a courier sees only targets and size."""

    target_replicas: tuple[str, ...]
    op: Op = field(repr=False)
    reply_handle: bytes = b""

    @property
    def size(self) -> int:
        return _op_size(self.op) + len(self.reply_handle)

    def courier_view(self) -> tuple[tuple[str, ...], int]:
        return self.target_replicas, self.size


@dataclass(frozen=True)
class PutReply:
    acks: int
    rejects: tuple[PutStatus, ...]
    quorum: int

    @property
    def ok(self) -> bool:
        return self.acks >= self.quorum


@dataclass(frozen=True)
class GetReply:
    record: BoxRecord | None
    replica_id: str | None = None

    @property
    def found(self) -> bool:
        return self.record is not None


def write_quorum(k: int) -> int:
    return math.ceil(k / 2)


class Courier:
    """Stateless relay between the mixnet and the replicas.

    The courier log keeps ``(time, size)`` per envelope and nothing else.
    """

    def __init__(self, courier_id: str):
        self.courier_id = courier_id
        self.log: list[tuple[float, int]] = []

    def forward(self, envelope: Envelope, replicas: Mapping[str, ReplicaStore], now: float = 0.0):
        targets, size = envelope.courier_view()
        self.log.append((now, size))
        live = [replicas[r] for r in targets if r in replicas and replicas[r].online]
        if not live:
            raise AllReplicasFailed(f"no reachable replica among {len(targets)} targets")
        if isinstance(envelope.op, Put):
            statuses = [store.handle(envelope.op) for store in live]
            acks = sum(s is PutStatus.ACK for s in statuses)
            rejects = tuple(s for s in statuses if s is not PutStatus.ACK)
            return PutReply(acks, rejects, write_quorum(len(targets)))
        for store in live:
            record = store.handle(envelope.op)
            if record is not None:
                return GetReply(record, store.replica_id)
        return GetReply(None)

    def log_bytes(self) -> bytes:
        return "\n".join(f"{t!r} {s}" for t, s in self.log).encode()


def courier_forward(envelope: Envelope, replicas: Mapping[str, ReplicaStore], courier: Courier | None = None, now: float = 0.0):
    return (courier or Courier("courier")).forward(envelope, replicas, now)
