"""Mixnet transport simulation."""

from .engine import BACKENDS, DEFAULT_BACKEND, make_engine
from .sim import (
    ECHO_HOPS,
    ECHO_LINKS,
    PACKET_OVERHEAD,
    SPHINX_PAYLOAD,
    WIRE_SIZE,
    ConfigError,
    CoverSource,
    DelayModel,
    Echo,
    ObserverTrace,
    Packet,
    RngStreams,
    Simulator,
    Topology,
    build_route,
    observer_view,
    poisson_slots,
    run_cover_traffic,
    substitute,
)

__all__ = [
    "BACKENDS",
    "DEFAULT_BACKEND",
    "ECHO_HOPS",
    "ECHO_LINKS",
    "PACKET_OVERHEAD",
    "SPHINX_PAYLOAD",
    "WIRE_SIZE",
    "ConfigError",
    "CoverSource",
    "DelayModel",
    "Echo",
    "ObserverTrace",
    "Packet",
    "RngStreams",
    "Simulator",
    "Topology",
    "build_route",
    "make_engine",
    "observer_view",
    "poisson_slots",
    "run_cover_traffic",
    "substitute",
]
