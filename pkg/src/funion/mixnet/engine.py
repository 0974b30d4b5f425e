"""Hop-engine backend selection.

The compiled engine is used when it was built and ``FUNION_PURE_PYTHON``
is unset; otherwise the pure-Python engine takes over.  Both produce the
same event order and bit-identical timestamps.
"""

from __future__ import annotations

import os

from ._hopengine_py import DELIVERED, RETURNED, TIMER
from ._hopengine_py import HopEngine as PyHopEngine

try:
    from ._hopengine import HopEngine as CHopEngine
except ImportError:  # extension not built
    CHopEngine = None

BACKENDS = {"python": PyHopEngine}
if CHopEngine is not None:
    BACKENDS["cython"] = CHopEngine

if CHopEngine is not None and not os.environ.get("FUNION_PURE_PYTHON"):
    DEFAULT_BACKEND = "cython"
else:
    DEFAULT_BACKEND = "python"


def make_engine(backend: str | None = None, record: bool = True):
    name = backend or DEFAULT_BACKEND
    try:
        cls = BACKENDS[name]
    except KeyError:
        raise ValueError(f"hop engine backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
    return cls(record)


__all__ = ["BACKENDS", "DEFAULT_BACKEND", "DELIVERED", "RETURNED", "TIMER", "make_engine"]
