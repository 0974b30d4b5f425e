"""Small deployments for protocol-level tests."""

from funion.mixnet.sim import DelayModel, Simulator, Topology
from funion.pigeonhole import PlacementConfig, ReplicaStore
from funion.protocol import BucketGrid, Client, Deployment

IDS = tuple(f"replica-{i}" for i in range(5))


def deployment(seed=0, mu=0.2, bucketing=True, compute=("compute-0",), grid=None, record_trace=True):
    topo = Topology.build(services=("storage-0", "storage-1", *compute))
    sim = Simulator(topo, DelayModel(mu), seed, record_trace=record_trace, keep_echoes=True)
    reps = {r: ReplicaStore(r, IDS) for r in IDS}
    return Deployment(sim, reps, PlacementConfig(IDS, 3), ["storage-0", "storage-1"], list(compute), grid or BucketGrid(0.2, 256), bucketing=bucketing)


def run_jobs(dep, specs):
    """``specs``: (data, bucket_index, ComputeModel); returns the finished runs."""
    runs = []
    for i, (data, j, cm) in enumerate(specs):
        run = Client(dep, f"alice-{i}").submit(data, j, cm, job_id=i)
        dep.sim.call_at(0.0, run.start)
        runs.append(run)
    dep.sim.run()
    return runs
