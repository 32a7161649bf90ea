"""Learning-loop orchestration minus the gradient math.

For each task, k rollouts form a group; every trajectory is scored with a
rule-based exact-match reward, and the group's rewards are standardized into
advantages (subtract the group mean, divide by the population standard
deviation; a zero-variance group gets exact zeros). Complete groups are
written as a training batch file for an external trainer, which drives
policy-version synchronization back into the executor.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import AgentStatus, Trajectory
from .errors import IncompleteGroupError
from .messages import TaskItem, canonical_json
from .policies import stable_seed

_WS_RUN = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Trim, collapse internal whitespace runs to one space; case-sensitive."""
    return _WS_RUN.sub(" ", text.strip())


def compute_reward(traj: Trajectory, ground_truth: Optional[str]) -> int:
    """1 iff the normalized final answer equals the normalized truth.

    Budget-exhausted and failed trajectories score 0 (there is no answer to
    match).
    """
    if traj.status is AgentStatus.RUNNING:
        raise ValueError("trajectory is not terminal")
    if traj.status is not AgentStatus.ANSWERED:
        return 0
    if traj.final_answer is None or ground_truth is None:
        return 0
    return int(normalize_answer(traj.final_answer) == normalize_answer(ground_truth))


def grpo_advantages(rewards) -> list[float]:
    """Group-standardized advantages: (r - mean) / population std.

    A group of one has no baseline, so k must be at least 2. Constant reward
    vectors yield exact zeros rather than a division fault.
    """
    arr = np.asarray(list(rewards), dtype=float)
    k = arr.shape[0]
    if k < 2:
        raise ValueError("advantage estimation needs a group of at least 2")
    if np.all(arr == arr[0]):
        return [0.0] * k
    std = float(arr.std())  # population convention: divide by k
    mean = float(arr.mean())
    if std == 0.0:
        return [0.0] * k
    return [float(x) for x in (arr - mean) / std]


# ---------------------------------------------------------------------------
# Rollout groups


def derive_rollout_seed(base_seed: int, task_id: str, rollout_index: int) -> int:
    return stable_seed(base_seed, task_id, rollout_index)


def make_rollout_items(task: TaskItem, k: int) -> list[TaskItem]:
    """Fan one task out into k rollout items with distinct derived seeds."""
    items = []
    for i in range(k):
        items.append(
            TaskItem(
                task_id=task.task_id,
                query=task.query,
                ground_truth=task.ground_truth,
                rollout_index=i,
                max_steps=task.max_steps,
                priority=task.priority,
                seed=derive_rollout_seed(task.seed, task.task_id, i),
                meta=dict(task.meta),
            )
        )
    return items


@dataclass
class RolloutGroup:
    """The k trajectories for one task plus their advantages."""

    task_id: str
    k: int
    trajectories: list[Trajectory]
    advantages: list[float] = field(default_factory=list)

    @property
    def rewards(self) -> list[int]:
        return [0 if t.reward is None else int(t.reward) for t in self.trajectories]

    def is_complete(self) -> bool:
        indices = {t.rollout_index for t in self.trajectories}
        return (
            len(self.trajectories) == self.k
            and indices == set(range(self.k))
            and len(self.advantages) == self.k
        )

    def records(self) -> list[dict]:
        recs = []
        for t in sorted(self.trajectories, key=lambda t: t.rollout_index):
            recs.append(
                {
                    "task_id": t.task_id,
                    "rollout_index": t.rollout_index,
                    "steps": [s.to_dict() for s in t.steps],
                    "reward": 0 if t.reward is None else int(t.reward),
                    "advantage": self.advantages[t.rollout_index],
                    "policy_version": t.policy_version,
                }
            )
        return recs

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "k": self.k,
            "trajectories": [t.to_dict(include_timing=True) for t in self.trajectories],
            "advantages": list(self.advantages),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RolloutGroup":
        return cls(
            task_id=d["task_id"],
            k=int(d["k"]),
            trajectories=[Trajectory.from_dict(t) for t in d["trajectories"]],
            advantages=[float(a) for a in d.get("advantages") or []],
        )


def score_group(task: TaskItem, trajectories: list[Trajectory], k: int) -> RolloutGroup:
    """Attach rewards and advantages to a collected set of trajectories.

    Raises :class:`IncompleteGroupError` naming the missing rollout indices
    when the collection is partial; a truncated group must never be scored
    silently.
    """
    present = {t.rollout_index for t in trajectories}
    missing = set(range(k)) - present
    if missing:
        raise IncompleteGroupError(task.task_id, missing, trajectories)
    ordered = sorted(trajectories, key=lambda t: t.rollout_index)
    for t in ordered:
        if t.reward is None:
            t.reward = compute_reward(t, task.ground_truth)
    advantages = grpo_advantages([t.reward for t in ordered])
    return RolloutGroup(task_id=task.task_id, k=k, trajectories=ordered,
                        advantages=advantages)


def run_rollout_group(task: TaskItem, k: int, executor, *,
                      policy_version: Optional[int] = None) -> RolloutGroup:
    """Fan out, execute, collect, and score one task's rollout group.

    ``executor`` is anything with ``run_tasks(items) -> list[Trajectory]``;
    partial results surface as :class:`IncompleteGroupError` with the
    missing indices, never as a silently short group.
    """
    if k < 2:
        raise ValueError("rollout groups need k >= 2 for advantage estimation")
    items = make_rollout_items(task, k)
    trajectories = executor.run_tasks(items)
    if policy_version is not None:
        for t in trajectories:
            t.policy_version = policy_version
    return score_group(task, trajectories, k)


# ---------------------------------------------------------------------------
# Training batch files

BATCH_FORMAT_VERSION = 1


def batch_header(k: int) -> dict:
    return {
        "format_version": BATCH_FORMAT_VERSION,
        "k": k,
        "std_convention": "population",
        "normalization": "trim+collapse",
    }


def emit_training_batch(groups: list[RolloutGroup], path: str | Path) -> Path:
    """Write a JSON-lines batch: one header line, then one record per
    trajectory ordered by (task_id, rollout_index). Incomplete groups are
    rejected outright."""
    if not groups:
        raise ValueError("no groups to emit")
    k = groups[0].k
    records: list[dict] = []
    for g in groups:
        if g.k != k:
            raise ValueError(f"group {g.task_id!r} has k={g.k}, expected {k}")
        if not g.is_complete():
            present = {t.rollout_index for t in g.trajectories}
            raise IncompleteGroupError(g.task_id, set(range(g.k)) - present,
                                       g.trajectories)
        records.extend(g.records())
    records.sort(key=lambda r: (r["task_id"], r["rollout_index"]))
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(batch_header(k)) + "\n")
        for rec in records:
            fh.write(canonical_json(rec) + "\n")
    return path


def read_training_batch(path: str | Path) -> tuple[dict, list[dict]]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty batch file")
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:]]


# ---------------------------------------------------------------------------
# Policy versions


@dataclass(frozen=True)
class PolicyVersion:
    version: int
    params_digest: str

    def to_dict(self) -> dict:
        return {"version": self.version, "params_digest": self.params_digest}


class PolicyState:
    """Monotone policy-version counter owned by the executor side.

    Only the registered trainer may drive synchronization; when no trainer
    name is pinned up front, the first caller becomes the registered one.
    The version increments by exactly one per sync even when the digest is
    unchanged: deciding when to sync is the trainer's call, not ours.
    """

    def __init__(self, trainer_name: Optional[str] = None,
                 initial: Optional[PolicyVersion] = None):
        self._trainer = trainer_name
        self._current = initial if initial is not None else PolicyVersion(0, "")
        self._lock = threading.Lock()

    @property
    def current(self) -> PolicyVersion:
        with self._lock:
            return self._current

    def sync(self, params_digest: str, caller: str = "trainer") -> PolicyVersion:
        with self._lock:
            if self._trainer is None:
                self._trainer = caller
            elif caller != self._trainer:
                raise PermissionError(f"{caller!r} is not the registered trainer")
            self._current = PolicyVersion(self._current.version + 1, params_digest)
            return self._current
