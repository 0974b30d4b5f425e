"""Closed-form latency, overhead and bandwidth arithmetic.

Nothing here touches the simulator; tests compare the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy import stats

from .protocol import round_up_to_bucket

ECHO_HOPS = 9
PIPELINE_ECHOES = 5


@dataclass(frozen=True)
class Scenario:
    """Serving workload; ``ttft`` in seconds, ``itl`` in seconds per output token."""

    name: str
    n_in: int
    n_out: int
    ttft: float
    itl: float

    def __post_init__(self):
        if self.n_in < 0 or self.n_out < 0 or self.ttft < 0 or self.itl < 0:
            raise ValueError(f"scenario {self.name!r} has a negative parameter")


# measured on 4xH100 80GB, fp16, tensor parallel 4
SCENARIOS = (
    Scenario("Balanced", 200, 200, 32.78e-3, 19.11e-3),
    Scenario("Medium", 1000, 1000, 103.20e-3, 19.31e-3),
    Scenario("Output-heavy", 500, 2000, 71.82e-3, 19.26e-3),
    Scenario("Input-heavy", 5000, 500, 368.11e-3, 19.94e-3),
)


@dataclass(frozen=True)
class OverheadRow:
    name: str
    t_llm: float
    t_llm_rounded: float
    t_mix: float
    total: float
    mix_pct: int


def echo_stats(hops: int = ECHO_HOPS, mu: float = 0.2) -> tuple[float, float]:
    """Mean and variance of a sum of ``hops`` exponential delays with mean ``mu``."""
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return hops * mu, hops * mu * mu


def llm_latency(s: Scenario) -> float:
    return s.ttft + s.n_out * s.itl


def percent(part: float, whole: float) -> int:
    """Whole-number percentage, halves rounded up."""
    q = Decimal(repr(100 * part / whole))
    return int(q.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def overhead_table(scenarios=SCENARIOS, mu: float = 0.2, delta: float = 0.2, echoes: int = PIPELINE_ECHOES) -> list[OverheadRow]:
    """Per scenario: bucketed model time, mixnet time and the mixnet share of the total.

    Times are rounded to two decimals, as printed.
    """
    t_mix = round(echoes * echo_stats(ECHO_HOPS, mu)[0], 10)
    rows = []
    for s in scenarios:
        t = llm_latency(s)
        rounded = round(round_up_to_bucket(t, delta), 10)
        total = round(rounded + t_mix, 10)
        rows.append(OverheadRow(s.name, t, rounded, t_mix, total, percent(t_mix, total) if total else 0))
    return rows


def bandwidth_budget(lambda_s: float, packet_bytes: float, seconds: float) -> float:
    """Bytes a client sends at cover rate ``lambda_s`` (decimal units: 1 kB = 1000 B)."""
    if lambda_s < 0 or packet_bytes < 0 or seconds < 0:
        raise ValueError("inputs must be non-negative")
    return lambda_s * packet_bytes * seconds


def max_inference_rate(lambda_s: float, packets_per_inference: int, seconds: float) -> int:
    if packets_per_inference < 1:
        raise ValueError("packets_per_inference must be >= 1")
    # exact for rates given as short decimals
    return math.floor(Decimal(repr(lambda_s)) * Decimal(repr(seconds)) / packets_per_inference)


def hidden_state_size(
    batch: int, seq_len: int, hidden_dim: int, bytes_per_elem: int, layers: int, link_bps: float
) -> tuple[int, int, float, float]:
    """Activation size per layer and for all layers, and their transfer times on a link.

    Sizes are plain bytes (``4096 * 4096 * 2`` is 32 MiB); the transfer time
    is bits over ``link_bps``.
    """
    if min(batch, seq_len, hidden_dim, bytes_per_elem, layers) < 0 or link_bps <= 0:
        raise ValueError("sizes must be non-negative and the link rate positive")
    per_layer = batch * seq_len * hidden_dim * bytes_per_elem
    total = per_layer * layers
    return per_layer, total, per_layer * 8 / link_bps, total * 8 / link_bps


def erlang_cdf(x, hops: int = ECHO_HOPS, mu: float = 0.2):
    return stats.gamma.cdf(x, a=hops, scale=mu)


def ks_distance(samples, hops: int = ECHO_HOPS, mu: float = 0.2) -> float:
    """Kolmogorov-Smirnov distance of ``samples`` to Erlang(hops, 1/mu)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("no samples")
    return float(stats.kstest(samples, "gamma", args=(hops, 0, mu)).statistic)


def table3_rows(scenarios=SCENARIOS) -> list[dict]:
    return [
        {"scenario": s.name, "n_in": s.n_in, "n_out": s.n_out, "ttft_ms": s.ttft * 1e3, "itl_ms": s.itl * 1e3, "t_llm_s": llm_latency(s)}
        for s in scenarios
    ]
