"""Walkthrough: rollout groups, rewards, advantages, and policy sync.

For each task we run a group of k rollouts, score them with the exact-match
rule, standardize rewards into group advantages, and write the training
batch an external trainer would consume. The trainer drives policy-version
synchronization back into the executor; trajectories record the version
they ran under.

Run: python3 demos/04_training_loop.py
"""

import hashlib
import tempfile
from pathlib import Path

from agentmesh import (
    CoordinatorConfig,
    CoordinatorExecutor,
    TaskItem,
    emit_training_batch,
    ephemeral_cluster,
    grpo_advantages,
    run_rollout_group,
    stable_seed,
)
from agentmesh.training import read_training_batch

workdir = Path(tempfile.mkdtemp(prefix="demo-training-"))
config = CoordinatorConfig(heartbeat_interval=0.05, suspect_after=0.5, dead_after=2.0)

# --- 1. group standardization on its own -------------------------------------
print("== group-normalized advantages ==")
for rewards in ([1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1]):
    adv = grpo_advantages(rewards)
    print(f"rewards {rewards} -> advantages {[round(a, 4) for a in adv]}")

# --- 2. a full practice-then-learn cycle against the cluster ------------------
tasks = [
    TaskItem(task_id=f"task{i}", query=f"Compute: {i + 4}*{i + 6}",
             ground_truth=str((i + 4) * (i + 6)), max_steps=4,
             seed=stable_seed("train-demo", i), meta={"success_prob": 0.5})
    for i in range(3)
]

with ephemeral_cluster(workers=2, capacity=4, config=config) as (coordinator, _pool):
    executor = CoordinatorExecutor(coordinator, timeout=30)
    digest = "initial-weights"
    for step in range(3):
        groups = [run_rollout_group(t, 8, executor,
                                    policy_version=coordinator.policy_version.version)
                  for t in tasks]
        mean_reward = sum(sum(g.rewards) for g in groups) / (8 * len(groups))
        print(f"\ntraining step {step}: mean reward {mean_reward:.3f}")
        for g in groups:
            print(f"  {g.task_id}: rewards={g.rewards}")
        batch_path = workdir / f"batch-step{step}.jsonl"
        emit_training_batch(groups, batch_path)
        # a stand-in for the gradient update: evolve the parameter digest
        digest = hashlib.sha256((digest + batch_path.read_text()).encode()).hexdigest()[:16]
        version = coordinator.sync_policy(digest, caller="trainer")
        print(f"  synced policy: version {version.version}, digest {digest}")
        # fresh task ids for the next step (rollouts are immutable history)
        tasks = [
            TaskItem(task_id=f"{t.task_id}.v{version.version}", query=t.query,
                     ground_truth=t.ground_truth, max_steps=t.max_steps,
                     seed=stable_seed(t.task_id, version.version), meta=dict(t.meta))
            for t in tasks
        ]

header, records = read_training_batch(batch_path)
print(f"\nbatch file header: {header}")
print(f"batch records: {len(records)}, fields: {sorted(records[0])}")
versions = sorted({r["policy_version"] for r in records})
print(f"policy versions recorded in the last batch: {versions}")
