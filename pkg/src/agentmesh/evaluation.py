"""Evaluation harness: pass@k estimation, scaling curves, and the
distributed-versus-sequential speedup benchmark.

The pass@k estimator is the unbiased one: with c successes among n rollouts,
the chance that a random size-k subset contains at least one success is
1 - C(n-c, k) / C(n, k), computed in overflow-safe product form and averaged
over questions. The scaling experiment drives seeded stochastic policies
through the full cluster path and reports the curve for k = 1..n. The
benchmark runs identical sleep-dominated rollouts once through the
distributed executor and once strictly sequentially in-process, the latter
being the single-node control arm.
"""

from __future__ import annotations

import json
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Optional

import numpy as np

from .agents import PolicyRef
from .coordinator import Coordinator, CoordinatorConfig, CoordinatorExecutor
from .execution import LocalSequentialExecutor
from .messages import TaskItem
from .policies import stable_seed
from .tools import evaluate_expression
from .training import compute_reward, make_rollout_items
from .worker import ChaosConfig, WorkerPool

CURVE_SCHEMA_VERSION = 1
BENCH_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# pass@k


@dataclass(frozen=True)
class PassKRecord:
    question_id: str
    n: int
    c: int

    def __post_init__(self):
        if not (0 <= self.c <= self.n):
            raise ValueError(f"need 0 <= c <= n, got c={self.c}, n={self.n}")


def pass_at_k_single(n: int, c: int, k: int) -> float:
    """Probability that a uniformly random size-k subset of n rollouts
    contains at least one of the c successes."""
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    # 1 - C(n-c, k)/C(n, k) as a running product: no factorials, no overflow
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


def pass_at_k(records: list[PassKRecord], k: int) -> float:
    if not records:
        raise ValueError("no records")
    min_n = min(r.n for r in records)
    if k > min_n:
        raise ValueError(f"k={k} exceeds smallest n={min_n}")
    return float(np.mean([pass_at_k_single(r.n, r.c, k) for r in records]))


# ---------------------------------------------------------------------------
# Embedded cluster


@contextmanager
def ephemeral_cluster(
    *,
    workers: int = 8,
    capacity: int = 4,
    policy_ref: PolicyRef = PolicyRef("seeded"),
    config: Optional[CoordinatorConfig] = None,
    chaos: Optional[ChaosConfig] = None,
    trace_path=None,
    batch_log=None,
    latency_scale: float = 1.0,
    apply_latency: bool = True,
    report_steps: bool = False,
    wait_for_workers: bool = True,
    kill_at_seq: Optional[int] = None,
    id_prefix: str = "w",
):
    """A coordinator plus a supervised worker fleet on loopback TCP.

    Workers here run as threads in this process for speed; they speak the
    exact wire protocol of standalone worker processes (the CLI runs the
    same Worker class in its own process).
    """
    tmp = None
    if trace_path is None:
        tmp = tempfile.TemporaryDirectory(prefix="agentmesh-cluster-")
        trace_path = Path(tmp.name) / "trace.bin"
    cfg = config or CoordinatorConfig()
    coordinator = Coordinator(
        trace_path, config=cfg, batch_log=batch_log, kill_at_seq=kill_at_seq,
    ).start()
    pool = WorkerPool(
        coordinator.host, coordinator.port, workers,
        capacity=capacity,
        heartbeat_interval=cfg.heartbeat_interval,
        policy_ref=policy_ref,
        chaos=chaos,
        latency_scale=latency_scale,
        apply_latency=apply_latency,
        report_steps=report_steps,
        id_prefix=id_prefix,
    ).start()
    try:
        if wait_for_workers:
            coordinator.wait_for_workers(workers, timeout=30.0)
        yield coordinator, pool
    finally:
        pool.stop()
        coordinator.stop()
        if tmp is not None:
            tmp.cleanup()


# ---------------------------------------------------------------------------
# Scaling experiment


@dataclass
class ScalingResult:
    records: list[PassKRecord]
    curve: list[tuple[int, float]]
    success_probs: list[float]

    @property
    def pass_at_1(self) -> float:
        return self.curve[0][1]


def _rescale_to_mean(probs: list[float], target: float,
                     lo: float = 0.01, hi: float = 0.99) -> list[float]:
    """Shift the unclamped entries until the mean hits the target exactly."""
    probs = [min(hi, max(lo, p)) for p in probs]
    n = len(probs)
    for _ in range(100):
        mean = sum(probs) / n
        error = target - mean
        if abs(error) < 1e-12:
            break
        movable = [i for i, p in enumerate(probs)
                   if (p < hi - 1e-9 if error > 0 else p > lo + 1e-9)]
        if not movable:
            break
        delta = error * n / len(movable)
        for i in movable:
            probs[i] = min(hi, max(lo, probs[i] + delta))
    return probs


def simulated_questions(question_count: int, seed: int,
                        target_pass1: float = 0.48) -> tuple[list[TaskItem], list[float]]:
    """Arithmetic questions with heterogeneous per-question success
    probabilities rescaled so their mean hits the target exactly."""
    rng = Random(stable_seed("scaling-questions", seed))
    raw = [rng.uniform(0.02, 0.98) for _ in range(question_count)]
    scale = target_pass1 * question_count / sum(raw)
    probs = _rescale_to_mean([p * scale for p in raw], target_pass1)
    tasks = []
    for i, p in enumerate(probs):
        a, b, c = rng.randint(2, 40), rng.randint(2, 40), rng.randint(2, 12)
        expr = rng.choice([f"{a}+{b}*{c}", f"({a}+{b})*{c}", f"{a}*{b}-{c}", f"{a}+{b}-{c}"])
        tasks.append(
            TaskItem(
                task_id=f"q{i:04d}",
                query=f"Compute: {expr}",
                ground_truth=evaluate_expression(expr),
                max_steps=4,
                priority=0,
                seed=stable_seed("scaling-task", seed, i),
                meta={"success_prob": p},
            )
        )
    return tasks, probs


def run_scaling_experiment(
    question_count: int,
    n: int = 32,
    *,
    seed: int = 0,
    target_pass1: float = 0.48,
    executor=None,
    workers: int = 8,
    capacity: int = 4,
    out_csv=None,
) -> ScalingResult:
    """Execute n rollouts per simulated question and report pass@k for
    k = 1..n. Runs through the full cluster path unless an executor is
    injected."""
    tasks, probs = simulated_questions(question_count, seed, target_pass1)
    items = []
    for task in tasks:
        items.extend(make_rollout_items(task, n))

    def _execute(exc) -> list:
        return exc.run_tasks(items)

    if executor is not None:
        trajectories = _execute(executor)
    else:
        with ephemeral_cluster(
            workers=workers, capacity=capacity, policy_ref=PolicyRef("seeded"),
            config=CoordinatorConfig(heartbeat_interval=0.25, suspect_after=2.0,
                                     dead_after=6.0),
        ) as (coordinator, _pool):
            trajectories = _execute(CoordinatorExecutor(coordinator))

    truth = {t.task_id: t.ground_truth for t in tasks}
    successes: dict[str, int] = {t.task_id: 0 for t in tasks}
    counts: dict[str, int] = {t.task_id: 0 for t in tasks}
    for traj in trajectories:
        if traj.reward is None:
            traj.reward = compute_reward(traj, truth[traj.task_id])
        counts[traj.task_id] += 1
        successes[traj.task_id] += traj.reward
    records = [
        PassKRecord(task_id, counts[task_id], successes[task_id])
        for task_id in sorted(counts)
    ]
    curve = [(k, pass_at_k(records, k)) for k in range(1, n + 1)]
    if out_csv is not None:
        write_curve_csv(curve, out_csv)
    return ScalingResult(records=records, curve=curve, success_probs=probs)


def write_curve_csv(curve: list[tuple[int, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# curve_schema={CURVE_SCHEMA_VERSION}\n")
        fh.write("k,pass_at_k\n")
        for k, value in curve:
            fh.write(f"{k},{value:.10f}\n")


def read_curve_csv(path) -> list[tuple[int, float]]:
    curve = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("k,"):
            continue
        k, v = line.split(",")
        curve.append((int(k), float(v)))
    return curve


# ---------------------------------------------------------------------------
# Efficiency benchmark


@dataclass
class BenchReport:
    mode: str  # "distributed" | "sequential"
    workers: int
    rollout_count: int
    latency_seconds: float
    rollout_time: float
    train_time: float = 0.0

    @property
    def total_time(self) -> float:
        return self.rollout_time + self.train_time

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "workers": self.workers,
            "rollout_count": self.rollout_count,
            "latency_seconds": self.latency_seconds,
            "rollout_time": self.rollout_time,
            "train_time": self.train_time,
            "total_time": self.total_time,
        }


@dataclass
class BenchResult:
    distributed: BenchReport
    sequential: BenchReport

    @property
    def speedup(self) -> float:
        return self.sequential.rollout_time / self.distributed.rollout_time

    def to_dict(self) -> dict:
        return {
            "bench_schema": BENCH_SCHEMA_VERSION,
            "distributed": self.distributed.to_dict(),
            "sequential": self.sequential.to_dict(),
            "speedup": self.speedup,
        }


def _bench_items(rollouts: int, latency: float, seed: int) -> list[TaskItem]:
    base = TaskItem(
        task_id="bench",
        query="Idle environment interaction",
        ground_truth="ok",
        max_steps=3,
        priority=0,
        seed=seed,
        meta={"latency": latency},
    )
    return make_rollout_items(base, rollouts)


def run_efficiency_bench(
    rollouts: int,
    workers: int,
    latency: float,
    *,
    train_time: float = 0.0,
    seed: int = 0,
    out_json=None,
) -> BenchResult:
    """Time N identical sleep-dominated rollouts through the distributed
    executor (one rollout per worker at a time) and through the strictly
    sequential in-process executor; the simulated training phase is added
    to both totals."""
    if workers < 1:
        raise ValueError("need at least one worker")
    items = _bench_items(rollouts, latency, seed)
    keys = [i.key for i in items]

    with ephemeral_cluster(
        workers=workers, capacity=1, policy_ref=PolicyRef("sleeper"),
        config=CoordinatorConfig(heartbeat_interval=0.25, suspect_after=5.0,
                                 dead_after=15.0, record_steps=False),
    ) as (coordinator, _pool):
        started = time.monotonic()
        for item in items:
            coordinator.submit(item)
        if not coordinator.wait_for_keys(keys, timeout=max(60.0, rollouts * latency * 4)):
            raise RuntimeError("distributed bench did not finish in time")
        distributed_time = time.monotonic() - started

    sequential = LocalSequentialExecutor(policy_ref=PolicyRef("sleeper"))
    started = time.monotonic()
    sequential.run_tasks(items)
    sequential_time = time.monotonic() - started

    result = BenchResult(
        distributed=BenchReport("distributed", workers, rollouts, latency,
                                distributed_time, train_time),
        sequential=BenchReport("sequential", 1, rollouts, latency,
                               sequential_time, train_time),
    )
    if out_json is not None:
        write_bench_json(result, out_json)
    return result


def write_bench_json(result: BenchResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
