"""Discrete-event simulation of an Echomix-style stratified mixnet.

Every echo crosses ``origin -> gateway -> 3 mixes -> service`` and back
along an independently drawn reply path, picking up one exponential delay
at each of the 9 intermediate nodes.  A global passive observer sees one
``(time, link, size)`` event per link traversal and nothing else.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .engine import DELIVERED, RETURNED, TIMER, make_engine

SPHINX_PAYLOAD = 30_000
PACKET_OVERHEAD = 1_000
WIRE_SIZE = SPHINX_PAYLOAD + PACKET_OVERHEAD
MIX_LAYERS = 3
# gateway, 3 mixes, service, 3 mixes, gateway
ECHO_HOPS = 9
ECHO_LINKS = ECHO_HOPS + 1
DELIVER_LINK = MIX_LAYERS + 1

STREAMS = ("delays", "cover", "routing", "protocol", "crypto", "challenge")


class ConfigError(ValueError):
    pass


class RngStreams:
    """Independent generators per purpose, all derived from one seed.

    Consuming more of one stream (say, an extra cover packet) never shifts
    the draws of another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        for i, name in enumerate(STREAMS):
            ss = np.random.SeedSequence(self.seed, spawn_key=(i,))
            setattr(self, name, np.random.Generator(np.random.PCG64(ss)))

    def entropy(self, n: int = 64) -> bytes:
        return self.crypto.bytes(n)


@dataclass(frozen=True)
class DelayModel:
    """Per-hop delay ``Exp(1/mu)``; ``mu = 0`` is the zero-delay limit."""

    mu: float = 0.20

    def __post_init__(self):
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ConfigError(f"mean hop delay must be finite and >= 0, got {self.mu}")

    @property
    def rate(self) -> float:
        return math.inf if self.mu == 0 else 1.0 / self.mu

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.exponential(self.mu, n)


@dataclass(frozen=True)
class CoverSource:
    lambda_s: float = 2.5

    def __post_init__(self):
        if not (self.lambda_s >= 0 and math.isfinite(self.lambda_s)):
            raise ConfigError(f"cover rate must be finite and >= 0, got {self.lambda_s}")


@dataclass(frozen=True)
class Topology:
    gateways: tuple[str, ...]
    mix_layers: tuple[tuple[str, ...], ...]
    services: tuple[str, ...]

    def __post_init__(self):
        if len(self.mix_layers) != MIX_LAYERS:
            raise ConfigError(f"need exactly {MIX_LAYERS} mix layers")
        if not self.gateways or not self.services:
            raise ConfigError("need at least one gateway and one service")
        for i, layer in enumerate(self.mix_layers):
            if not layer:
                raise ConfigError(f"mix layer {i} is empty")
        names = self.nodes
        if len(set(names)) != len(names):
            raise ConfigError("node ids must be globally unique")

    @property
    def nodes(self) -> list[str]:
        return [*self.gateways, *(n for layer in self.mix_layers for n in layer), *self.services]

    @classmethod
    def build(cls, gateways: int = 2, layer_sizes=(4, 4, 4), services=("storage-0", "compute-0")) -> "Topology":
        return cls(
            tuple(f"gw-{i}" for i in range(gateways)),
            tuple(tuple(f"mix-{l}-{i}" for i in range(n)) for l, n in enumerate(layer_sizes, start=1)),
            tuple(services),
        )


def build_route(topology: Topology, gateway: str, destination: str, rng: np.random.Generator) -> list[str]:
    """``gateway -> one uniform mix per layer -> destination``."""
    layers = topology.mix_layers
    if not all(layers):
        raise ConfigError("cannot route through an empty mix layer")
    # floor(u * size) for u ~ U[0, 1) is a uniform index
    u = rng.random(len(layers)).tolist()
    return [gateway, *(layer[int(x * len(layer))] for layer, x in zip(layers, u)), destination]


@dataclass
class Packet:
    packet_id: int
    route: tuple[str, ...]
    wire_size: int = WIRE_SIZE
    payload_size: int = 0
    body: Any = field(default=None, repr=False)
    loop: bool = False

    def __post_init__(self):
        if not 0 <= self.payload_size <= SPHINX_PAYLOAD:
            raise ConfigError(f"payload of {self.payload_size} bytes exceeds Sphinx capacity {SPHINX_PAYLOAD}")


@dataclass
class Echo:
    echo_id: int
    label: str
    origin: str
    dest: str
    packet: Packet
    delays: np.ndarray
    t_send: float
    t_deliver: float | None = None
    t_return: float | None = None
    reply: Any = None
    on_deliver: Callable | None = field(default=None, repr=False)
    on_return: Callable | None = field(default=None, repr=False)

    @property
    def round_trip(self) -> float:
        return self.t_return - self.t_send


@dataclass
class ObserverTrace:
    """What a global passive adversary records: ``(t, src, dst, size)``."""

    times: np.ndarray
    src: list[str]
    dst: list[str]
    sizes: np.ndarray

    def __len__(self):
        return len(self.times)

    @property
    def events(self) -> list[tuple[float, tuple[str, str], int]]:
        return [(float(t), (s, d), int(z)) for t, s, d, z in zip(self.times, self.src, self.dst, self.sizes)]

    def jsonl_lines(self) -> list[str]:
        return [
            json.dumps({"t": float(t), "src": s, "dst": d, "size": int(z)})
            for t, s, d, z in zip(self.times, self.src, self.dst, self.sizes)
        ]

    def link_events(self, node: str) -> np.ndarray:
        """Timestamps of every event on a link touching ``node``."""
        mask = [s == node or d == node for s, d in zip(self.src, self.dst)]
        return self.times[np.asarray(mask, dtype=bool)] if len(mask) else self.times[:0]


class CoverProcess:
    """Poisson emission slots for one client; application packets take the next free slot."""

    def __init__(self, sim: "Simulator", client: str, source: CoverSource, duration: float):
        self.sim = sim
        self.client = client
        self.slots = poisson_slots(sim.streams.cover, source.lambda_s, duration, start=sim.now)
        self.queue: deque = deque()
        self.emissions: list[tuple[float, str]] = []
        self._next = 0
        self._arm()

    def _arm(self):
        if self._next < len(self.slots):
            self.sim.call_at(float(self.slots[self._next]), self._fire)

    def _fire(self):
        self._next += 1
        if self.queue:
            send = self.queue.popleft()
            send()
            self.emissions.append((self.sim.now, "application"))
        else:
            dest = self.sim.topology.services[int(self.sim.streams.routing.integers(len(self.sim.topology.services)))]
            self.sim._send_now(self.client, dest, label="loop", loop=True)
            self.emissions.append((self.sim.now, "loop"))
        self._arm()


def poisson_slots(rng: np.random.Generator, rate: float, duration: float, start: float = 0.0) -> np.ndarray:
    """Event times of a rate-``rate`` Poisson process on ``[start, start + duration)``."""
    if duration <= 0 or rate <= 0:
        return np.empty(0)
    out = []
    t = start
    end = start + duration
    batch = max(16, int(rate * duration * 1.1) + 16)
    while True:
        times = t + np.cumsum(rng.exponential(1.0 / rate, batch))
        keep = times[times < end]
        out.append(keep)
        if len(keep) < batch:
            break
        t = float(times[-1])
    return np.concatenate(out)


def substitute(slots, requests) -> list[str]:
    """Label each slot ``loop`` or ``application`` under the substitution model.

    Each application request (a ready time) occupies the first unused slot at
    or after it; requests left over once the slots run out are not sent.
    """
    kinds = ["loop"] * len(slots)
    pending = sorted(requests)
    j = 0
    for i, s in enumerate(slots):
        if j < len(pending) and pending[j] <= s:
            kinds[i] = "application"
            j += 1
    return kinds


def run_cover_traffic(
    rng: np.random.Generator, source: CoverSource, duration: float, requests=()
) -> list[tuple[float, str]]:
    """Emission schedule ``[(time, kind), ...]`` for one client."""
    slots = poisson_slots(rng, source.lambda_s, duration)
    return list(zip(slots.tolist(), substitute(slots, requests)))


class Simulator:
    """Single-threaded mixnet simulation driven by a hop engine."""

    def __init__(
        self,
        topology: Topology,
        delay_model: DelayModel | None = None,
        seed: int = 0,
        *,
        wire_size: int = WIRE_SIZE,
        record_trace: bool = True,
        keep_echoes: bool = True,
        backend: str | None = None,
    ):
        self.topology = topology
        self.delay_model = delay_model or DelayModel()
        self.streams = RngStreams(seed)
        self.wire_size = wire_size
        self.engine = make_engine(backend, record_trace)
        self.keep_echoes = keep_echoes
        self.echo_log: list[Echo] = []
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in topology.nodes:
            self.node_id(name)
        self._gateway_of: dict[str, str] = {}
        self._cover: dict[str, CoverProcess] = {}
        self._tags: dict[int, Any] = {}
        self._next_tag = 0
        self._next_packet = 0
        self.echo_count = 0

    @property
    def backend(self) -> str:
        return "cython" if type(self.engine).__module__.endswith("_hopengine") else "python"

    @property
    def now(self) -> float:
        return self.engine.now

    def node_id(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = self._index[name] = len(self._names)
            self._names.append(name)
        return idx

    def attach(self, name: str, gateway: str | None = None) -> str:
        """Register an endpoint (client or service) behind a gateway."""
        if gateway is None:
            gws = self.topology.gateways
            gateway = gws[int(self.streams.routing.integers(len(gws)))]
        elif gateway not in self.topology.gateways:
            raise ConfigError(f"unknown gateway {gateway!r}")
        self.node_id(name)
        self._gateway_of[name] = gateway
        return gateway

    def gateway_of(self, name: str) -> str:
        if name not in self._gateway_of:
            self.attach(name)
        return self._gateway_of[name]

    def _tag(self, obj) -> int:
        tag = self._next_tag
        self._next_tag += 1
        self._tags[tag] = obj
        return tag

    def call_at(self, t: float, fn: Callable[[], Any]) -> None:
        self.engine.schedule_timer(float(t), self._tag(fn))

    def call_later(self, dt: float, fn: Callable[[], Any]) -> None:
        self.call_at(self.now + dt, fn)

    def start_cover(self, client: str, source: CoverSource, duration: float) -> CoverProcess:
        self.gateway_of(client)
        proc = self._cover[client] = CoverProcess(self, client, source, duration)
        return proc

    def send_echo(
        self,
        origin: str,
        dest: str,
        *,
        body: Any = None,
        payload_size: int = 0,
        label: str = "",
        on_deliver: Callable[[Echo], Any] | None = None,
        on_return: Callable[[Echo], Any] | None = None,
    ) -> Echo | None:
        """Send an echo now, or in the origin's next cover slot if it runs cover traffic.

        Returns the :class:`Echo` when sent immediately, ``None`` when queued.
        """
        cover = self._cover.get(origin)
        args = (origin, dest)
        kw = dict(body=body, payload_size=payload_size, label=label, on_deliver=on_deliver, on_return=on_return)
        if cover is None:
            return self._send_now(*args, **kw)
        cover.queue.append(lambda: self._send_now(*args, **kw))
        return None

    def _send_now(self, origin, dest, *, body=None, payload_size=0, label="", on_deliver=None, on_return=None, loop=False):
        if dest not in self._index:
            raise ConfigError(f"unknown destination {dest!r}")
        gw = self.gateway_of(origin)
        # forward path and SURB reply path are drawn independently
        fwd = build_route(self.topology, gw, dest, self.streams.routing)
        back = build_route(self.topology, gw, origin, self.streams.routing)
        route = (origin, *fwd, *back[1:4], gw, origin)
        packet = Packet(self._next_packet, route, self.wire_size, payload_size, body, loop)
        self._next_packet += 1
        if packet.wire_size != self.wire_size:
            raise ConfigError("every packet in a run must have the same wire size")
        delays = self.delay_model.sample(self.streams.delays, ECHO_HOPS)
        echo = Echo(self.echo_count, label, origin, dest, packet, delays, self.now, on_deliver=on_deliver, on_return=on_return)
        self.echo_count += 1
        self.engine.inject(self.now, [self._index[n] for n in route], delays, DELIVER_LINK, self._tag(echo))
        if self.keep_echoes:
            self.echo_log.append(echo)
        return echo

    def step(self) -> bool:
        ev = self.engine.pop()
        if ev is None:
            return False
        t, tag, kind = ev
        if kind == TIMER:
            self._tags.pop(tag)()
        elif kind == DELIVERED:
            echo = self._tags[tag]
            echo.t_deliver = t
            if echo.on_deliver is not None:
                echo.reply = echo.on_deliver(echo)
        else:
            echo = self._tags.pop(tag)
            echo.t_return = t
            if echo.on_return is not None:
                echo.on_return(echo)
        return True

    def run(self) -> None:
        while self.step():
            pass

    def observer_view(self) -> ObserverTrace:
        t, s, d = self.engine.trace()
        names = self._names
        trace = ObserverTrace(t, [names[i] for i in s], [names[i] for i in d], np.full(len(t), self.wire_size, dtype=np.int64))
        if len(trace) and not np.all(trace.sizes == self.wire_size):
            raise AssertionError("observer saw packets of differing sizes")
        return trace


def observer_view(sim: Simulator) -> ObserverTrace:
    return sim.observer_view()
