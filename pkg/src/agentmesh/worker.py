"""Worker: the execution unit that turns assigned tasks into trajectories.

A worker connects to the coordinator, registers with its capacity, proves
liveness with heartbeats, and runs up to ``capacity`` rollouts concurrently.
Each rollout is hermetic -- its own sandbox directory, its own seeds -- so a
rollout lost with its worker can be re-run anywhere with the same result.

Chaos mode makes the worker die on purpose with a seeded probability per
rollout, either by dropping the connection (detected immediately) or by
going silent (detected by heartbeat timeout). :class:`WorkerPool` plays the
role of the fleet supervisor, replacing dead workers to keep the target
count, which is how the fault-injection experiments keep making progress
while workers keep being killed.
"""

from __future__ import annotations

import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Optional

from .agents import PolicyRef
from .execution import execute_rollout
from .messages import Control, TaskItem
from .tools import builtin_registry
from . import wire
from .wire import FrameConnection


@dataclass
class ChaosConfig:
    """Seeded fault injection: per-rollout kill probability and the split
    between abrupt connection loss and silent (heartbeat-only) death."""

    kill_prob: float = 0.0
    seed: int = 0
    silent_prob: float = 0.3


class Worker:
    def __init__(
        self,
        host: str,
        port: int,
        worker_id: str,
        *,
        capacity: int = 1,
        seed: int = 0,
        policy_ref: PolicyRef = PolicyRef("seeded"),
        sandbox_root: Optional[Path] = None,
        heartbeat_interval: float = 1.0,
        chaos: Optional[ChaosConfig] = None,
        latency_scale: float = 1.0,
        apply_latency: bool = True,
        report_steps: bool = False,
        corpus: Optional[list] = None,
    ):
        self.host = host
        self.port = port
        self.worker_id = worker_id
        self.capacity = max(1, capacity)
        self.seed = seed
        self.policy_ref = policy_ref
        self.sandbox_root = Path(sandbox_root) if sandbox_root else Path(
            tempfile.mkdtemp(prefix=f"agentmesh-{worker_id}-"))
        self.heartbeat_interval = heartbeat_interval
        self.chaos = chaos
        self.latency_scale = latency_scale
        self.apply_latency = apply_latency
        self.report_steps = report_steps
        self.registry = builtin_registry(corpus)

        self.died = threading.Event()  # chaos death, distinct from clean exit
        self._stop = threading.Event()
        self._dead = False
        self._death_style = "close"
        self._conn: Optional[FrameConnection] = None
        self._pool = ThreadPoolExecutor(max_workers=self.capacity,
                                        thread_name_prefix=f"{worker_id}-rollout")
        self._chaos_rng = Random(f"{chaos.seed}:{worker_id}") if chaos else None
        self.policy_version_seen = 0

    # -- lifecycle -----------------------------------------------------------

    def run(self) -> bool:
        """Connect, register, and serve assignments until shutdown or death.

        Returns False when the coordinator was unreachable.
        """
        try:
            self._conn = FrameConnection.connect(self.host, self.port, timeout=5.0)
        except OSError:
            return False
        self._conn.send(
            wire.control_frame(
                self.worker_id, wire.WORKER_REGISTER,
                {"worker_id": self.worker_id, "capacity": self.capacity},
            )
        )
        hb = threading.Thread(target=self._heartbeat_loop, daemon=True,
                              name=f"{self.worker_id}-hb")
        hb.start()
        try:
            while not self._stop.is_set() and not self._dead:
                msg = self._conn.recv()
                if msg is None:
                    break
                if self._dead:
                    break
                kind = wire.frame_kind(msg)
                data = msg.payload.data if isinstance(msg.payload, Control) else {}
                if kind == wire.TASK_ASSIGN:
                    task = TaskItem.from_dict(data["task"])
                    version = int(data.get("policy_version", 0))
                    self._pool.submit(self._run_rollout, task, version)
                elif kind == wire.POLICY_SYNC:
                    self.policy_version_seen = int(data.get("version", 0))
                elif kind == wire.SHUTDOWN:
                    break
        finally:
            self._stop.set()
            if not self._silent_death():
                self._conn.close()
            self._pool.shutdown(wait=False)
        return True

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.run, daemon=True, name=self.worker_id)
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()
        if self._conn is not None:
            self._conn.close()

    def _silent_death(self) -> bool:
        return self._dead and self._death_style == "silent"

    # -- internals -----------------------------------------------------------

    def _heartbeat_loop(self) -> None:
        while not self._stop.is_set() and not self._dead:
            ok = self._conn.send(
                wire.control_frame(self.worker_id, wire.HEARTBEAT,
                                   {"worker_id": self.worker_id})
            )
            if not ok:
                return
            self._stop.wait(self.heartbeat_interval)

    def _run_rollout(self, task: TaskItem, version: int) -> None:
        if self._dead or self._stop.is_set():
            return
        on_step = None
        if self.report_steps:
            def on_step(step_index, action, observation):
                self._conn.send(
                    wire.control_frame(
                        self.worker_id, wire.STEP_REPORT,
                        {
                            "worker_id": self.worker_id,
                            "task_id": task.task_id,
                            "rollout_index": task.rollout_index,
                            "step_index": step_index,
                            "tool": action.tool,
                            "is_error": observation.is_error,
                        },
                    )
                )
        trajectory = execute_rollout(
            task,
            registry=self.registry,
            sandbox_root=self.sandbox_root,
            policy_ref=self.policy_ref,
            policy_version=version,
            latency_scale=self.latency_scale,
            apply_latency=self.apply_latency,
            on_step=on_step,
        )
        if self._chaos_rng is not None and self._chaos_rng.random() < self.chaos.kill_prob:
            self._die(silent=self._chaos_rng.random() < self.chaos.silent_prob)
            return
        if self._dead or self._stop.is_set():
            return
        self._conn.send(
            wire.control_frame(
                self.worker_id, wire.TRAJECTORY_COMPLETE,
                {
                    "worker_id": self.worker_id,
                    "trajectory": trajectory.to_dict(include_timing=True),
                },
            )
        )

    def _die(self, silent: bool) -> None:
        """Simulated crash: the completed work is lost with the worker."""
        self._death_style = "silent" if silent else "close"
        self._dead = True
        self.died.set()
        if not silent:
            self._conn.close()


class WorkerPool:
    """Keeps ``count`` workers alive against one coordinator address.

    When a worker dies (chaos or connection loss) and the pool is not
    stopping, a replacement with a fresh id is spawned -- the supervisor
    behavior that makes exactly-once completion testable under sustained
    worker churn.
    """

    def __init__(self, host: str, port: int, count: int, *,
                 capacity: int = 1,
                 heartbeat_interval: float = 1.0,
                 policy_ref: PolicyRef = PolicyRef("seeded"),
                 chaos: Optional[ChaosConfig] = None,
                 sandbox_root: Optional[Path] = None,
                 latency_scale: float = 1.0,
                 apply_latency: bool = True,
                 report_steps: bool = False,
                 id_prefix: str = "w"):
        self.host = host
        self.port = port
        self.count = count
        self.capacity = capacity
        self.heartbeat_interval = heartbeat_interval
        self.policy_ref = policy_ref
        self.chaos = chaos
        self.sandbox_root = Path(sandbox_root) if sandbox_root else Path(
            tempfile.mkdtemp(prefix="agentmesh-pool-"))
        self.latency_scale = latency_scale
        self.apply_latency = apply_latency
        self.report_steps = report_steps
        self.id_prefix = id_prefix
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self._live: dict[int, Worker] = {}
        self._lock = threading.Lock()
        self.spawned = 0

    def start(self) -> "WorkerPool":
        for slot in range(self.count):
            t = threading.Thread(target=self._slot_loop, args=(slot,),
                                 daemon=True, name=f"pool-slot-{slot}")
            t.start()
            self._threads.append(t)
        return self

    def _make_worker(self, slot: int, generation: int) -> Worker:
        worker_id = f"{self.id_prefix}{slot}g{generation}"
        chaos = None
        if self.chaos is not None:
            chaos = ChaosConfig(
                kill_prob=self.chaos.kill_prob,
                seed=self.chaos.seed + slot * 1000 + generation,
                silent_prob=self.chaos.silent_prob,
            )
        return Worker(
            self.host, self.port, worker_id,
            capacity=self.capacity,
            heartbeat_interval=self.heartbeat_interval,
            policy_ref=self.policy_ref,
            chaos=chaos,
            sandbox_root=self.sandbox_root / worker_id,
            latency_scale=self.latency_scale,
            apply_latency=self.apply_latency,
            report_steps=self.report_steps,
        )

    def _slot_loop(self, slot: int) -> None:
        generation = 0
        connect_failures = 0
        while not self._stopping.is_set():
            worker = self._make_worker(slot, generation)
            generation += 1
            with self._lock:
                self._live[slot] = worker
                self.spawned += 1
            runner = threading.Thread(target=self._run_and_flag,
                                      args=(worker,), daemon=True,
                                      name=worker.worker_id)
            runner.start()
            # wait until the worker dies, exits, or the pool stops
            while runner.is_alive() and not worker.died.is_set() and not self._stopping.is_set():
                runner.join(timeout=0.02)
            if self._stopping.is_set():
                worker.stop()
                return
            if getattr(worker, "_connect_failed", False):
                connect_failures += 1
                if connect_failures >= 50:
                    return  # coordinator is gone for good
                self._stopping.wait(0.05)
            else:
                connect_failures = 0

    @staticmethod
    def _run_and_flag(worker: Worker) -> None:
        ok = worker.run()
        if not ok:
            worker._connect_failed = True

    def stop(self) -> None:
        self._stopping.set()
        with self._lock:
            workers = list(self._live.values())
        for w in workers:
            w.stop()
        for t in self._threads:
            t.join(timeout=2.0)
