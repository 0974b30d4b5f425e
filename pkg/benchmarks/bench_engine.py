"""Compare the compiled and pure-Python hop engines.

    python3 benchmarks/bench_engine.py [--echoes N] [--repeat R]

Runs N echoes through a fresh simulator per backend and reports wall time,
echoes per second and whether both backends produced the same samples.
"""

import argparse
import time

import numpy as np

from funion.mixnet.engine import BACKENDS
from funion.mixnet.sim import DelayModel, Simulator, Topology


def run(backend, echoes, seed):
    sim = Simulator(Topology.build(), DelayModel(0.2), seed, keep_echoes=False, backend=backend)
    sim.attach("client")
    rtt = np.empty(echoes)

    def done(echo):
        rtt[echo.echo_id] = echo.round_trip

    t0 = time.perf_counter()
    for _ in range(echoes):
        sim.send_echo("client", "storage-0", on_return=done)
    sim.run()
    return time.perf_counter() - t0, rtt, sim.engine.trace()[0]


def run_engine(backend, echoes, seed):
    """The kernel alone: pre-drawn routes and delays, inject + pop."""
    rng = np.random.default_rng(seed)
    nodes = rng.integers(0, 20, size=(echoes, 11)).tolist()
    delays = rng.exponential(0.2, size=(echoes, 9)).tolist()
    eng = BACKENDS[backend](True)
    t0 = time.perf_counter()
    for i in range(echoes):
        eng.inject(0.0, nodes[i], delays[i], 4, i)
    while eng.pop() is not None:
        pass
    return time.perf_counter() - t0, eng.trace()[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--echoes", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    results = {}
    for name in sorted(BACKENDS):
        best = None
        for _ in range(args.repeat):
            dt, rtt, times = run(name, args.echoes, args.seed)
            best = dt if best is None else min(best, dt)
        results[name] = (best, rtt, times)
        print(f"{name:7s} {best:8.3f} s  {args.echoes / best:10.0f} echoes/s  mean={rtt.mean():.5f} var={rtt.var(ddof=1):.5f}")

    if len(results) == 2:
        (_, a, ta), (_, b, tb) = results["cython"], results["python"]
        same = np.array_equal(a, b) and np.array_equal(ta, tb)
        print(f"speedup {results['python'][0] / results['cython'][0]:.2f}x, identical output: {same}")
    else:
        print("compiled engine not built; only the Python backend ran")

    print("engine only:")
    kernel = {}
    for name in sorted(BACKENDS):
        dt, times = min((run_engine(name, args.echoes, args.seed) for _ in range(args.repeat)), key=lambda r: r[0])
        kernel[name] = (dt, times)
        print(f"{name:7s} {dt:8.3f} s  {args.echoes * 10 / dt:10.0f} link events/s")
    if len(kernel) == 2:
        same = np.array_equal(kernel["cython"][1], kernel["python"][1])
        print(f"speedup {kernel['python'][0] / kernel['cython'][0]:.2f}x, identical output: {same}")


if __name__ == "__main__":
    main()
