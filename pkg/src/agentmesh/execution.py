"""Turning a task item into a trajectory, locally or on a worker.

`execute_rollout` is the one code path both the sequential executor and the
distributed workers share, so a rollout re-run after a worker loss produces
the identical trajectory: the sandbox, tool seeds, and policy seed all
derive from the task item itself.
"""

from __future__ import annotations

import re
import tempfile
from pathlib import Path
from typing import Optional

from .agents import AgentSpec, Environment, PolicyRef, Trajectory, run_task
from .messages import TaskItem
from .policies import build_policy
from .tools import ToolRegistry, builtin_registry

_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


def sandbox_dir(root: Path, task: TaskItem) -> Path:
    name = _SAFE.sub("_", f"{task.task_id}-{task.rollout_index}")
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def agent_spec_for(task: TaskItem, registry: ToolRegistry,
                   policy_ref: PolicyRef, name: str = "agent") -> AgentSpec:
    return AgentSpec(
        name=name,
        toolset=tuple(registry.names()),
        max_steps=max(1, task.max_steps),
        policy_ref=policy_ref,
    )


def execute_rollout(
    task: TaskItem,
    *,
    registry: Optional[ToolRegistry] = None,
    sandbox_root: Optional[Path] = None,
    policy_ref: PolicyRef = PolicyRef("seeded"),
    policy_version: int = 0,
    latency_scale: float = 1.0,
    apply_latency: bool = True,
    on_step=None,
) -> Trajectory:
    """Run one rollout to a terminal trajectory.

    The task's ground truth never reaches the policy; reward scoring happens
    wherever the original task (with its truth) lives.
    """
    registry = registry if registry is not None else builtin_registry()
    if sandbox_root is None:
        sandbox_root = Path(tempfile.mkdtemp(prefix="agentmesh-"))
    env = Environment(
        registry,
        sandbox_dir(sandbox_root, task),
        seed=task.seed,
        latency_scale=latency_scale,
        apply_latency=apply_latency,
    )
    policy = build_policy(policy_ref, task, version=policy_version)
    spec = agent_spec_for(task, registry, policy_ref)
    return run_task(
        spec,
        task.without_ground_truth(),
        policy,
        env,
        policy_version=policy_version,
        on_step=on_step,
    )


class LocalSequentialExecutor:
    """Runs rollouts strictly one at a time in the calling process.

    This is the single-node control arm of the speedup benchmark; it must
    never overlap rollouts.
    """

    def __init__(
        self,
        *,
        registry: Optional[ToolRegistry] = None,
        sandbox_root: Optional[Path] = None,
        policy_ref: PolicyRef = PolicyRef("seeded"),
        policy_version: int = 0,
        latency_scale: float = 1.0,
        apply_latency: bool = True,
    ):
        self.registry = registry if registry is not None else builtin_registry()
        self.sandbox_root = Path(sandbox_root) if sandbox_root else Path(tempfile.mkdtemp(prefix="agentmesh-seq-"))
        self.policy_ref = policy_ref
        self.policy_version = policy_version
        self.latency_scale = latency_scale
        self.apply_latency = apply_latency

    def run_tasks(self, items: list[TaskItem]) -> list[Trajectory]:
        out = []
        for item in items:
            out.append(
                execute_rollout(
                    item,
                    registry=self.registry,
                    sandbox_root=self.sandbox_root,
                    policy_ref=self.policy_ref,
                    policy_version=self.policy_version,
                    latency_scale=self.latency_scale,
                    apply_latency=self.apply_latency,
                )
            )
        return out
