"""Walkthrough: the distributed executor under worker failures.

A coordinator schedules rollouts over TCP to a fleet of workers; every
transition is appended to a checksummed trace first. Here we run a batch
while chaos kills workers mid-rollout, watch the supervisor replace them,
then crash the coordinator on purpose and recover it from the trace.

Run: python3 demos/03_distributed_rollouts.py
"""

import tempfile
from pathlib import Path
from collections import Counter

from agentmesh import (
    ChaosConfig,
    Coordinator,
    CoordinatorConfig,
    TaskItem,
    WorkerPool,
    ephemeral_cluster,
    make_rollout_items,
    scan_trace,
    stable_seed,
    verify_trace,
)
from agentmesh.errors import CoordinatorHaltedError, DuplicateTaskError
from agentmesh.trace import TraceKind

workdir = Path(tempfile.mkdtemp(prefix="demo-cluster-"))
config = CoordinatorConfig(heartbeat_interval=0.05, suspect_after=0.15,
                           dead_after=0.3, scan_interval=0.05)

tasks = [
    TaskItem(task_id=f"job{i}", query=f"Compute: {i + 2}*{i + 5}",
             ground_truth=str((i + 2) * (i + 5)), max_steps=4,
             seed=stable_seed("demo", i), meta={"success_prob": 0.6})
    for i in range(8)
]
items = [item for t in tasks for item in make_rollout_items(t, 4)]

# --- 1. chaos: workers keep dying, the batch still completes exactly once ----
print("== 32 rollouts, 3 workers, 30% kill probability per rollout ==")
chaos = ChaosConfig(kill_prob=0.3, seed=4, silent_prob=0.3)
trace_path = workdir / "chaos-trace.bin"
with ephemeral_cluster(workers=3, capacity=1, config=config, chaos=chaos,
                       trace_path=trace_path) as (coordinator, pool):
    for item in items:
        coordinator.submit(item)
    assert coordinator.wait_all(timeout=60)
    print(f"workers spawned over the run: {pool.spawned} "
          f"(3 slots, replacements after kills)")

events = scan_trace(trace_path).events
kinds = Counter(e.kind for e in events)
print(f"trace: {kinds[TraceKind.SUBMITTED]} submitted, "
      f"{kinds[TraceKind.ASSIGNED]} assignments, "
      f"{kinds[TraceKind.REASSIGNED]} reassignments after worker loss, "
      f"{kinds[TraceKind.COMPLETED]} completed")
assert not verify_trace(events), "exactly-once bookkeeping violated"
print("trace invariants hold: one terminal event per rollout\n")

# --- 2. crash the coordinator mid-run, recover from the trace ----------------
print("== coordinator killed at trace seq 20, then recovered ==")
trace_path = workdir / "crash-trace.bin"
coordinator = Coordinator(trace_path, config=config, kill_at_seq=20).start()
pool = WorkerPool(coordinator.host, coordinator.port, 2, capacity=2,
                  heartbeat_interval=0.05).start()
try:
    coordinator.wait_for_workers(2, timeout=10)
    for item in items:
        try:
            coordinator.submit(item)
        except CoordinatorHaltedError:
            break
    coordinator.wait_all(timeout=5)
finally:
    pool.stop()
    coordinator.stop()
print(f"crashed={coordinator.crashed} after seq "
      f"{scan_trace(trace_path).last_seq}")

recovered = Coordinator(trace_path, config=config).start()
print(f"recovered state: {len(recovered.done)} done, {len(recovered.ready)} ready "
      f"(in-flight rollouts were returned to the queue)")
pool = WorkerPool(recovered.host, recovered.port, 2, capacity=2,
                  heartbeat_interval=0.05).start()
try:
    recovered.wait_for_workers(2, timeout=10)
    for item in items:
        try:
            recovered.submit(item)
        except DuplicateTaskError:
            pass  # already known from the trace
    assert recovered.wait_all(timeout=60)
    rewards = sorted(t.reward for t in recovered.done.values())
    print(f"all {len(recovered.done)} rollouts completed after recovery; "
          f"reward mix: {Counter(rewards)}")
finally:
    pool.stop()
    recovered.stop()

events = scan_trace(trace_path).events
assert not verify_trace(events)
print("final trace still satisfies exactly-once invariants")
