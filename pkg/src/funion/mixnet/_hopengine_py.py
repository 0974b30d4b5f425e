"""Pure-Python hop engine; the reference the compiled engine must match."""

from __future__ import annotations

from array import array
from heapq import heappop, heappush

import numpy as np

TIMER = 0
DELIVERED = 1
RETURNED = 2


class HopEngine:
    """Event queue that moves packets hop by hop and records each link traversal.

    A packet injected at ``t0`` with nodes ``n_0 .. n_L`` and delays
    ``d_0 .. d_{L-2}`` crosses link ``h`` (``n_h -> n_{h+1}``) at
    ``t0 + d_0 + ... + d_{h-1}``.  Crossing link ``deliver_at`` raises a
    DELIVERED milestone, crossing the last link a RETURNED milestone.
    Timers raise TIMER.  Events are ordered by ``(time, insertion seq)``.
    """

    backend = "python"

    def __init__(self, record: bool = True):
        self.record = record
        self.now = 0.0
        self.event_count = 0
        self._heap: list = []
        self._seq = 0
        self._nodes: list = []
        self._delays: list = []
        self._deliver: list = []
        self._tags: list = []
        self._t = array("d")
        self._src = array("i")
        self._dst = array("i")

    def __len__(self):
        return len(self._heap)

    def schedule_timer(self, t: float, tag: int) -> None:
        if t < self.now:
            raise ValueError(f"timer at {t} is in the past (now={self.now})")
        heappush(self._heap, (t, self._seq, -1, tag))
        self._seq += 1

    def inject(self, t0: float, nodes, delays, deliver_at: int, tag: int) -> int:
        if t0 < self.now:
            raise ValueError(f"injection at {t0} is in the past (now={self.now})")
        nodes = tuple(int(n) for n in nodes)
        delays = tuple(float(d) for d in delays)
        if len(delays) != len(nodes) - 2:
            raise ValueError("need one delay per intermediate node")
        if not 0 <= deliver_at < len(nodes) - 1:
            raise ValueError("deliver_at must name a link of the route")
        pid = len(self._nodes)
        self._nodes.append(nodes)
        self._delays.append(delays)
        self._deliver.append(deliver_at)
        self._tags.append(tag)
        heappush(self._heap, (t0, self._seq, pid, 0))
        self._seq += 1
        return pid

    def pop(self):
        """Advance to the next milestone; ``None`` once the queue is empty."""
        heap = self._heap
        while heap:
            t, _, pid, x = heappop(heap)
            self.now = t
            if pid < 0:
                return t, x, TIMER
            nodes = self._nodes[pid]
            self.event_count += 1
            if self.record:
                self._t.append(t)
                self._src.append(nodes[x])
                self._dst.append(nodes[x + 1])
            last = len(nodes) - 2
            if x < last:
                heappush(heap, (t + self._delays[pid][x], self._seq, pid, x + 1))
                self._seq += 1
            if x == self._deliver[pid]:
                return t, self._tags[pid], DELIVERED
            if x == last:
                return t, self._tags[pid], RETURNED
        return None

    def trace(self):
        return (
            np.frombuffer(self._t, dtype=np.float64).copy(),
            np.frombuffer(self._src, dtype=np.int32).copy(),
            np.frombuffer(self._dst, dtype=np.int32).copy(),
        )
