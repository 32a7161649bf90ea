"""Coordinator: priority scheduling, failure detection, and recovery.

The coordinator owns the ready queue, worker registry, and the append-only
trace. Every transition is written to the trace *before* in-memory state
changes, so a coordinator restarted over the same trace file reconstructs
exactly the completed/ready partition of one that never crashed; rollouts
that were in flight at the crash are simply re-run (they are idempotent:
policies and tools seed from the task item).

Failure handling: workers prove liveness by heartbeat. A silent worker is
marked suspect, then dead; a dead or disconnected worker's in-flight
rollouts are re-enqueued at their original priority with an incremented
attempt count. Late completions from a worker presumed dead are accepted if
the rollout is still open and dropped once a terminal event exists, which
keeps exactly one terminal trace event per (task_id, rollout_index) under
any interleaving.
"""

from __future__ import annotations

import heapq
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .agents import AgentStatus, Trajectory
from .errors import (
    AgentMeshError,
    CoordinatorHaltedError,
    DuplicateTaskError,
)
from .messages import EndpointRegistry, TaskItem, new_message, Control, CATEGORY_CONTROL
from .trace import TraceEvent, TraceKind, TraceStore
from .training import (
    PolicyState,
    PolicyVersion,
    RolloutGroup,
    compute_reward,
    make_rollout_items,
    score_group,
)
from . import wire
from .wire import FrameConnection


class WorkerStatus(str, Enum):
    IDLE = "idle"
    BUSY = "busy"
    SUSPECT = "suspect"
    DEAD = "dead"


@dataclass
class WorkerNode:
    worker_id: str
    capacity: int = 1
    status: WorkerStatus = WorkerStatus.IDLE
    last_heartbeat: float = 0.0
    assigned: set = field(default_factory=set)
    conn: Optional[FrameConnection] = None

    def free_slots(self) -> int:
        return self.capacity - len(self.assigned)


@dataclass
class CoordinatorConfig:
    heartbeat_interval: float = 1.0
    suspect_after: float = 3.0
    dead_after: float = 10.0
    scan_interval: Optional[float] = None  # defaults to heartbeat_interval
    record_steps: bool = True
    check_accounting: bool = False

    def __post_init__(self):
        if not (self.suspect_after < self.dead_after):
            raise ValueError("suspect_after must be < dead_after")


@dataclass
class RecoveredState:
    """What a trace replay yields: enough to resume scheduling."""

    tasks: dict
    submit_seq: dict
    done: dict
    ready: list
    attempts: dict
    assigned_unfinished: list
    policy_version: int = 0
    policy_digest: str = ""
    last_seq: int = 0
    corruption: Optional[str] = None


def rebuild_state(events: list[TraceEvent], corruption: Optional[str] = None) -> RecoveredState:
    """Replay a prefix-valid event log into coordinator state.

    Rollouts with an assignment but no terminal event are returned to the
    ready set: their workers did not survive the crash, and re-running them
    is safe by seed determinism.
    """
    tasks: dict = {}
    submit_seq: dict = {}
    done: dict = {}
    attempts: dict = {}
    in_flight: set = set()
    policy_version = 0
    policy_digest = ""
    last_seq = 0
    for ev in events:
        last_seq = ev.seq
        key = (ev.task_id, ev.rollout_index)
        if ev.kind is TraceKind.SUBMITTED:
            tasks[key] = TaskItem.from_dict(ev.payload["task"])
            submit_seq[key] = ev.seq
        elif ev.kind is TraceKind.ASSIGNED:
            in_flight.add(key)
            attempts[key] = int(ev.payload.get("attempt", 1))
        elif ev.kind is TraceKind.REASSIGNED:
            in_flight.discard(key)
            # the reassign bump is re-applied when scheduling assigns again
            attempts[key] = int(ev.payload.get("attempt", attempts.get(key, 1) + 1)) - 1
        elif ev.kind in (TraceKind.COMPLETED, TraceKind.FAILED):
            done[key] = Trajectory.from_dict(ev.payload["trajectory"])
            in_flight.discard(key)
        elif ev.kind is TraceKind.POLICY_SYNC:
            policy_version = int(ev.payload.get("version", policy_version))
            policy_digest = ev.payload.get("params_digest", policy_digest)
    ready = [k for k in tasks if k not in done]
    ready.sort(key=lambda k: (-tasks[k].priority, submit_seq[k]))
    return RecoveredState(
        tasks=tasks,
        submit_seq=submit_seq,
        done=done,
        ready=ready,
        attempts=attempts,
        assigned_unfinished=sorted(in_flight),
        policy_version=policy_version,
        policy_digest=policy_digest,
        last_seq=last_seq,
        corruption=corruption,
    )


@dataclass
class _GroupState:
    task: TaskItem
    k: int
    waiters: list = field(default_factory=list)
    result: Optional[RolloutGroup] = None


class Coordinator:
    """Single-process scheduler for a fleet of socket-connected workers.

    Also serves trainer connections (group submission, policy sync) on the
    same listening port; the first frame of a connection decides its role.
    """

    def __init__(
        self,
        trace_path,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        config: Optional[CoordinatorConfig] = None,
        listen: bool = True,
        batch_log=None,
        kill_at_seq: Optional[int] = None,
        trainer_name: Optional[str] = None,
    ):
        self.config = config or CoordinatorConfig()
        self.trace = TraceStore(trace_path)
        self.batch_log = batch_log
        self._kill_at_seq = kill_at_seq
        self.crashed = False
        self.halted = False

        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)

        self.tasks: dict = {}
        self.submit_seq: dict = {}
        self._ready_heap: list = []
        self.ready: set = set()
        self.in_flight: dict = {}
        self.done: dict = {}
        self.attempts: dict = {}
        self.workers: dict[str, WorkerNode] = {}
        self.groups: dict[str, _GroupState] = {}
        self._batch_header_written = False

        self.bus = EndpointRegistry()
        self.bus.register("coordinator")

        recovered = rebuild_state(self.trace.recovered_events,
                                  self.trace.recovered_corruption)
        self.recovered = recovered
        self.tasks.update(recovered.tasks)
        self.submit_seq.update(recovered.submit_seq)
        self.done.update(recovered.done)
        self.attempts.update(recovered.attempts)
        for key in recovered.ready:
            self.ready.add(key)
            heapq.heappush(
                self._ready_heap,
                (-self.tasks[key].priority, self.submit_seq[key], key),
            )
        self._policy = PolicyState(
            trainer_name=trainer_name,
            initial=PolicyVersion(recovered.policy_version, recovered.policy_digest),
        )

        self._server: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self.host = host
        self.port = port
        if listen:
            self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._server.bind((host, port))
            self._server.listen(128)
            self.port = self._server.getsockname()[1]

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "Coordinator":
        if self._server is not None:
            t = threading.Thread(target=self._accept_loop, daemon=True,
                                 name="coord-accept")
            t.start()
            self._threads.append(t)
        scan = threading.Thread(target=self._scan_loop, daemon=True,
                                name="coord-scan")
        scan.start()
        self._threads.append(scan)
        return self

    def stop(self, *, shutdown_workers: bool = True) -> None:
        self._stopping.set()
        if shutdown_workers:
            with self._lock:
                conns = [w.conn for w in self.workers.values()
                         if w.conn is not None and w.status is not WorkerStatus.DEAD]
            for conn in conns:
                conn.send(wire.control_frame("coordinator", wire.SHUTDOWN))
                conn.close()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        self.trace.close()
        with self._cv:
            self._cv.notify_all()

    def _simulate_crash(self) -> None:
        # Fault-injection: drop everything as an abrupt kill would.
        self.crashed = True
        self._stopping.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        for w in self.workers.values():
            if w.conn is not None:
                w.conn.close()
        self.trace.close()
        self._cv.notify_all()

    # -- trace ---------------------------------------------------------------

    def _record(self, kind: TraceKind, *, task_id: str = "", rollout_index: int = -1,
                worker_id: Optional[str] = None, payload: Optional[dict] = None) -> int:
        if self.crashed or self.halted:
            raise CoordinatorHaltedError("coordinator is not accepting transitions")
        try:
            seq = self.trace.append(
                kind, task_id=task_id, rollout_index=rollout_index,
                worker_id=worker_id, payload=payload,
            )
        except (OSError, ValueError) as exc:
            # fail-stop: never proceed with a gap in the log
            self.halted = True
            self._cv.notify_all()
            raise CoordinatorHaltedError(f"trace storage failed: {exc}") from exc
        if self._kill_at_seq is not None and seq >= self._kill_at_seq:
            self._simulate_crash()
            raise CoordinatorHaltedError(f"simulated crash at trace seq {seq}")
        return seq

    # -- task intake ---------------------------------------------------------

    def submit(self, task: TaskItem) -> None:
        """Accept one rollout into the ready queue (write-ahead, then state)."""
        with self._lock:
            if self.halted or self.crashed:
                raise CoordinatorHaltedError("coordinator halted")
            key = task.key
            if key in self.tasks:
                raise DuplicateTaskError(
                    f"duplicate submission for task_id={task.task_id!r} "
                    f"rollout_index={task.rollout_index}"
                )
            seq = self._record(TraceKind.SUBMITTED, task_id=task.task_id,
                               rollout_index=task.rollout_index,
                               payload={"task": task.to_dict()})
            self.tasks[key] = task
            self.submit_seq[key] = seq
            self.ready.add(key)
            heapq.heappush(self._ready_heap, (-task.priority, seq, key))
            self._maybe_check_accounting()
            self.schedule()

    # -- scheduling ----------------------------------------------------------

    def _pop_ready(self):
        while self._ready_heap:
            _, _, key = heapq.heappop(self._ready_heap)
            if key in self.ready:
                self.ready.discard(key)
                return key
        return None

    def _push_ready(self, key) -> None:
        self.ready.add(key)
        heapq.heappush(
            self._ready_heap,
            (-self.tasks[key].priority, self.submit_seq[key], key),
        )

    def _assignable_worker(self) -> Optional[WorkerNode]:
        best = None
        for w in self.workers.values():
            if w.status in (WorkerStatus.IDLE, WorkerStatus.BUSY) and w.free_slots() > 0:
                if best is None or (len(w.assigned), w.worker_id) < (len(best.assigned), best.worker_id):
                    best = w
        return best

    def schedule(self) -> list:
        """Greedily hand the highest-priority ready tasks to free workers."""
        assignments = []
        with self._lock:
            if self.crashed or self.halted:
                return assignments
            while self.ready:
                worker = self._assignable_worker()
                if worker is None:
                    break
                key = self._pop_ready()
                if key is None:
                    break
                task = self.tasks[key]
                attempt = self.attempts.get(key, 0) + 1
                self.attempts[key] = attempt
                version = self._policy.current.version
                self._record(
                    TraceKind.ASSIGNED,
                    task_id=task.task_id,
                    rollout_index=task.rollout_index,
                    worker_id=worker.worker_id,
                    payload={"attempt": attempt, "policy_version": version},
                )
                self.in_flight[key] = worker.worker_id
                worker.assigned.add(key)
                worker.status = WorkerStatus.BUSY
                assignments.append((task, worker))
                if worker.conn is not None:
                    frame = wire.control_frame(
                        "coordinator",
                        wire.TASK_ASSIGN,
                        {
                            "task": task.without_ground_truth().to_dict(),
                            "attempt": attempt,
                            "policy_version": version,
                        },
                        receiver=worker.worker_id,
                    )
                    if not worker.conn.send(frame):
                        self._worker_lost(worker.worker_id, reason="send failed")
            self._maybe_check_accounting()
        return assignments

    # -- worker lifecycle ----------------------------------------------------

    def register_worker(self, worker_id: str, capacity: int = 1,
                        conn: Optional[FrameConnection] = None,
                        now: Optional[float] = None) -> WorkerNode:
        with self._lock:
            old = self.workers.get(worker_id)
            if old is not None and old.conn is not None and old.conn is not conn:
                old.conn.close()
            node = WorkerNode(
                worker_id=worker_id,
                capacity=max(1, int(capacity)),
                status=WorkerStatus.IDLE,
                last_heartbeat=time.time() if now is None else now,
                conn=conn,
            )
            self.workers[worker_id] = node
            self._cv.notify_all()
            self.schedule()
            return node

    def handle_heartbeat(self, worker_id: str, now: Optional[float] = None) -> None:
        with self._lock:
            w = self.workers.get(worker_id)
            if w is None or w.status is WorkerStatus.DEAD:
                return
            w.last_heartbeat = time.time() if now is None else now
            if w.status is WorkerStatus.SUSPECT:
                w.status = WorkerStatus.BUSY if w.assigned else WorkerStatus.IDLE

    def heartbeat_scan(self, now: Optional[float] = None,
                       suspect_after: Optional[float] = None,
                       dead_after: Optional[float] = None) -> list:
        """Demote silent workers and re-enqueue what the dead ones held."""
        suspect_after = self.config.suspect_after if suspect_after is None else suspect_after
        dead_after = self.config.dead_after if dead_after is None else dead_after
        now = time.time() if now is None else now
        transitions = []
        with self._lock:
            if self.crashed or self.halted:
                return transitions
            for w in list(self.workers.values()):
                if w.status is WorkerStatus.DEAD:
                    continue
                silent = now - w.last_heartbeat
                if silent > dead_after:
                    transitions.append((w.worker_id, w.status.value, WorkerStatus.DEAD.value))
                    self._record(
                        TraceKind.HEARTBEAT_MISSED,
                        worker_id=w.worker_id,
                        payload={"transition": "dead", "silent_seconds": silent},
                    )
                    self._mark_dead(w)
                elif silent > suspect_after and w.status in (WorkerStatus.IDLE, WorkerStatus.BUSY):
                    transitions.append((w.worker_id, w.status.value, WorkerStatus.SUSPECT.value))
                    w.status = WorkerStatus.SUSPECT
                    self._record(
                        TraceKind.HEARTBEAT_MISSED,
                        worker_id=w.worker_id,
                        payload={"transition": "suspect", "silent_seconds": silent},
                    )
            if transitions:
                self.schedule()
            self._maybe_check_accounting()
        return transitions

    def _mark_dead(self, w: WorkerNode) -> None:
        w.status = WorkerStatus.DEAD
        for key in sorted(w.assigned):
            task = self.tasks[key]
            attempt = self.attempts.get(key, 1) + 1
            self._record(
                TraceKind.REASSIGNED,
                task_id=task.task_id,
                rollout_index=task.rollout_index,
                worker_id=w.worker_id,
                payload={"attempt": attempt},
            )
            # attempt counts assignment starts; schedule() increments, so
            # store the reassign bump minus the one schedule will add back.
            self.attempts[key] = attempt - 1
            self.in_flight.pop(key, None)
            self._push_ready(key)
        w.assigned.clear()
        if w.conn is not None:
            w.conn.close()

    def _worker_lost(self, worker_id: str, reason: str = "connection lost") -> None:
        w = self.workers.get(worker_id)
        if w is None or w.status is WorkerStatus.DEAD:
            return
        self._record(
            TraceKind.HEARTBEAT_MISSED,
            worker_id=worker_id,
            payload={"transition": "dead", "cause": reason},
        )
        self._mark_dead(w)

    def worker_lost(self, worker_id: str, reason: str = "connection lost") -> None:
        with self._lock:
            if self.crashed or self.halted or self._stopping.is_set():
                return
            self._worker_lost(worker_id, reason)
            self.schedule()

    # -- completions ---------------------------------------------------------

    def handle_completion(self, worker_id: Optional[str], trajectory: Trajectory) -> bool:
        """Record a terminal trajectory; duplicates are dropped.

        Returns True when this report became the terminal event.
        """
        with self._lock:
            if self.crashed or self.halted:
                return False
            key = trajectory.key
            if key not in self.tasks or key in self.done:
                return False
            task = self.tasks[key]
            if trajectory.reward is None:
                trajectory.reward = compute_reward(trajectory, task.ground_truth)
            kind = TraceKind.FAILED if trajectory.status is AgentStatus.FAILED else TraceKind.COMPLETED
            self._record(
                kind,
                task_id=task.task_id,
                rollout_index=task.rollout_index,
                worker_id=worker_id,
                payload={"trajectory": trajectory.to_dict(include_timing=True)},
            )
            self.done[key] = trajectory
            self.in_flight.pop(key, None)
            self.ready.discard(key)
            for w in self.workers.values():
                if key in w.assigned:
                    w.assigned.discard(key)
                    if not w.assigned and w.status is WorkerStatus.BUSY:
                        w.status = WorkerStatus.IDLE
            self._finalize_groups(task.task_id)
            self._maybe_check_accounting()
            self._cv.notify_all()
            self.schedule()
            return True

    def record_step_report(self, worker_id: str, data: dict) -> None:
        if not self.config.record_steps:
            return
        with self._lock:
            if self.crashed or self.halted:
                return
            kind = TraceKind.TOOL_EXECUTED if data.get("tool") else TraceKind.STEP_COMPLETED
            self._record(
                kind,
                task_id=data.get("task_id", ""),
                rollout_index=int(data.get("rollout_index", -1)),
                worker_id=worker_id,
                payload={k: v for k, v in data.items() if k not in ("task_id", "rollout_index")},
            )

    # -- policy sync ---------------------------------------------------------

    @property
    def policy_version(self) -> PolicyVersion:
        return self._policy.current

    def sync_policy(self, params_digest: str, caller: str = "trainer") -> PolicyVersion:
        """Advance the policy version and tell everyone who runs rollouts."""
        with self._lock:
            if self.crashed or self.halted:
                raise CoordinatorHaltedError("coordinator halted")
            version = self._policy.sync(params_digest, caller=caller)
            self._record(
                TraceKind.POLICY_SYNC,
                payload={"version": version.version, "params_digest": version.params_digest},
            )
            msg = new_message(
                "coordinator",
                Control(kind=wire.POLICY_SYNC, data=version.to_dict()),
                category=CATEGORY_CONTROL,
                topic="policy",
            )
            self.bus.publish(msg)
            for w in self.workers.values():
                if w.conn is not None and w.status is not WorkerStatus.DEAD:
                    w.conn.send(
                        wire.control_frame("coordinator", wire.POLICY_SYNC,
                                           version.to_dict(), receiver=w.worker_id)
                    )
            return version

    # -- trainer groups ------------------------------------------------------

    def submit_group(self, task: TaskItem, k: int,
                     waiter: Optional[FrameConnection] = None) -> None:
        """Idempotent group submission: known rollouts are not re-enqueued,
        so a reconnecting trainer can simply re-request."""
        with self._lock:
            state = self.groups.get(task.task_id)
            if state is None:
                state = _GroupState(task=task, k=k)
                self.groups[task.task_id] = state
            if waiter is not None and waiter not in state.waiters:
                state.waiters.append(waiter)
            for item in make_rollout_items(task, k):
                if item.key not in self.tasks:
                    self.submit(item)
            self._finalize_groups(task.task_id)

    def _finalize_groups(self, task_id: str) -> None:
        state = self.groups.get(task_id)
        if state is None:
            return
        collected = [self.done[(task_id, i)] for i in range(state.k)
                     if (task_id, i) in self.done]
        if len(collected) < state.k:
            return
        first_time = state.result is None
        if first_time:
            state.result = score_group(state.task, collected, state.k)
            if self.batch_log is not None:
                self._append_batch_log(state.result)
        waiters, state.waiters = state.waiters, []
        for conn in waiters:
            conn.send(
                wire.control_frame(
                    "coordinator", wire.GROUP_RESULT, state.result.to_dict(),
                )
            )

    def _append_batch_log(self, group: RolloutGroup) -> None:
        from .messages import canonical_json
        from .training import batch_header

        mode = "a" if self._batch_header_written else "w"
        with open(self.batch_log, mode, encoding="utf-8") as fh:
            if not self._batch_header_written:
                fh.write(canonical_json(batch_header(group.k)) + "\n")
                self._batch_header_written = True
            for rec in group.records():
                fh.write(canonical_json(rec) + "\n")

    # -- queries -------------------------------------------------------------

    def collect(self, task_id: str, k: Optional[int] = None) -> tuple[list[Trajectory], bool]:
        """Completed trajectories for a task plus a completeness flag."""
        with self._lock:
            found = sorted(
                (t for key, t in self.done.items() if key[0] == task_id),
                key=lambda t: t.rollout_index,
            )
            if k is not None:
                complete = {t.rollout_index for t in found} == set(range(k))
            else:
                submitted = {key[1] for key in self.tasks if key[0] == task_id}
                complete = bool(submitted) and {t.rollout_index for t in found} == submitted
            return found, complete

    def outstanding(self) -> int:
        with self._lock:
            return len(self.tasks) - len(self.done)

    def wait_for_keys(self, keys, timeout: Optional[float] = None) -> bool:
        keys = set(keys)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                if keys <= set(self.done):
                    return True
                if self.crashed or self.halted:
                    return False
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    self._cv.wait(remaining)
                else:
                    self._cv.wait(1.0)

    def wait_all(self, timeout: Optional[float] = None) -> bool:
        with self._lock:
            keys = list(self.tasks)
        return self.wait_for_keys(keys, timeout)

    def wait_for_workers(self, count: int, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                live = sum(1 for w in self.workers.values()
                           if w.status is not WorkerStatus.DEAD)
                if live >= count:
                    return True
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cv.wait(remaining)

    def check_accounting(self) -> None:
        """ready, in-flight, and done must partition the submitted set."""
        with self._lock:
            submitted = set(self.tasks)
            ready = set(self.ready)
            flight = set(self.in_flight)
            finished = set(self.done)
            union = ready | flight | finished
            overlap = (ready & flight) | (ready & finished) | (flight & finished)
            if union != submitted or overlap:
                raise AgentMeshError(
                    f"accounting violated: submitted={len(submitted)} "
                    f"ready={len(ready)} in_flight={len(flight)} done={len(finished)} "
                    f"overlap={sorted(overlap)} "
                    f"missing={sorted(submitted - union)}"
                )

    def _maybe_check_accounting(self) -> None:
        if self.config.check_accounting:
            self.check_accounting()

    # -- network loops -------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            conn = FrameConnection(sock)
            t = threading.Thread(target=self._serve_connection, args=(conn,),
                                 daemon=True, name="coord-conn")
            t.start()

    def _serve_connection(self, conn: FrameConnection) -> None:
        worker_id: Optional[str] = None
        try:
            while not self._stopping.is_set():
                msg = conn.recv()
                if msg is None:
                    break
                kind = wire.frame_kind(msg)
                data = msg.payload.data if isinstance(msg.payload, Control) else {}
                if kind == wire.WORKER_REGISTER:
                    worker_id = str(data["worker_id"])
                    self.register_worker(worker_id, int(data.get("capacity", 1)), conn)
                elif kind == wire.HEARTBEAT:
                    self.handle_heartbeat(str(data.get("worker_id", worker_id)))
                elif kind == wire.STEP_REPORT:
                    self.record_step_report(str(data.get("worker_id", worker_id)), data)
                elif kind == wire.TRAJECTORY_COMPLETE:
                    traj = Trajectory.from_dict(data["trajectory"])
                    self.handle_completion(data.get("worker_id", worker_id), traj)
                elif kind == wire.SUBMIT_GROUP:
                    try:
                        self.submit_group(
                            TaskItem.from_dict(data["task"]),
                            int(data["k"]),
                            waiter=conn,
                        )
                    except (DuplicateTaskError, ValueError) as exc:
                        conn.send(wire.control_frame(
                            "coordinator", wire.ERROR_REPLY, {"error": str(exc)}))
                elif kind == wire.POLICY_SYNC:
                    try:
                        version = self.sync_policy(
                            str(data.get("params_digest", "")), caller=msg.sender)
                        conn.send(wire.control_frame(
                            "coordinator", wire.POLICY_SYNC, version.to_dict(),
                            receiver=msg.sender))
                    except PermissionError as exc:
                        conn.send(wire.control_frame(
                            "coordinator", wire.ERROR_REPLY, {"error": str(exc)}))
                elif kind == wire.SHUTDOWN:
                    break
        except CoordinatorHaltedError:
            pass
        except Exception:
            pass
        finally:
            conn.close()
            if worker_id is not None and not self.crashed and not self._stopping.is_set():
                try:
                    self.worker_lost(worker_id)
                except CoordinatorHaltedError:
                    pass

    def _scan_loop(self) -> None:
        interval = self.config.scan_interval or self.config.heartbeat_interval
        while not self._stopping.is_set():
            time.sleep(interval)
            if self._stopping.is_set():
                return
            try:
                self.heartbeat_scan()
            except CoordinatorHaltedError:
                return


class CoordinatorExecutor:
    """In-process executor facade: submit task items, wait, hand back
    trajectories. Partial results (timeout, crash) are returned as-is so the
    caller can surface the missing indices."""

    def __init__(self, coordinator: Coordinator, timeout: Optional[float] = None):
        self.coordinator = coordinator
        self.timeout = timeout

    def run_tasks(self, items: list[TaskItem]) -> list[Trajectory]:
        keys = [item.key for item in items]
        for item in items:
            self.coordinator.submit(item)
        self.coordinator.wait_for_keys(keys, timeout=self.timeout)
        with self.coordinator._lock:
            return [self.coordinator.done[k] for k in keys if k in self.coordinator.done]
