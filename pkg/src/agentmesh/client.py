"""Trainer-facing client: submit rollout groups and drive policy syncs.

Speaks the same framed protocol as the workers, but from the consuming side:
``submit-group`` out, ``group-result`` back, ``policy-sync`` round trips.
Group submission is idempotent on the executor, so a dropped connection is
handled by reconnecting and re-requesting whatever is still missing.
"""

from __future__ import annotations

import time
from typing import Optional

from .errors import AgentMeshError
from .messages import Control, TaskItem
from .training import PolicyVersion, RolloutGroup, emit_training_batch
from . import wire
from .wire import FrameConnection


class TrainerClient:
    def __init__(self, host: str, port: int, *, name: str = "trainer",
                 reconnect_attempts: int = 20, reconnect_delay: float = 0.1):
        self.host = host
        self.port = port
        self.name = name
        self.reconnect_attempts = reconnect_attempts
        self.reconnect_delay = reconnect_delay
        self._conn: Optional[FrameConnection] = None
        self._pending_groups: dict[str, RolloutGroup] = {}
        self._connect()

    def _connect(self) -> None:
        last_error = None
        for _ in range(self.reconnect_attempts):
            try:
                self._conn = FrameConnection.connect(self.host, self.port)
                return
            except OSError as exc:
                last_error = exc
                time.sleep(self.reconnect_delay)
        raise AgentMeshError(f"cannot reach executor at {self.host}:{self.port}: {last_error}")

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()

    # -- frames ---------------------------------------------------------------

    def _send(self, kind: str, data: dict) -> None:
        if self._conn is None or not self._conn.send(
            wire.control_frame(self.name, kind, data)
        ):
            self._connect()
            if not self._conn.send(wire.control_frame(self.name, kind, data)):
                raise AgentMeshError("executor connection lost while sending")

    def submit_group(self, task: TaskItem, k: int) -> None:
        self._send(wire.SUBMIT_GROUP, {"task": task.to_dict(), "k": k})

    def request_rollouts(self, tasks: list[TaskItem], k: int, *,
                         timeout: Optional[float] = None) -> dict[str, RolloutGroup]:
        """Collect one complete rollout group per task.

        On disconnect, reconnects and re-requests only the groups whose
        results have not arrived yet.
        """
        wanted = {t.task_id: t for t in tasks}
        for t in tasks:
            self.submit_group(t, k)
        deadline = None if timeout is None else time.monotonic() + timeout
        collected: dict[str, RolloutGroup] = {}
        for task_id in list(self._pending_groups):
            if task_id in wanted:
                collected[task_id] = self._pending_groups.pop(task_id)
        while set(collected) != set(wanted):
            if deadline is not None and time.monotonic() > deadline:
                missing = sorted(set(wanted) - set(collected))
                raise AgentMeshError(f"timed out waiting for groups: {missing}")
            msg = self._conn.recv()
            if msg is None:
                # connection dropped mid-collection: resume
                self._connect()
                for task_id in sorted(set(wanted) - set(collected)):
                    self.submit_group(wanted[task_id], k)
                continue
            kind = wire.frame_kind(msg)
            data = msg.payload.data if isinstance(msg.payload, Control) else {}
            if kind == wire.GROUP_RESULT:
                group = RolloutGroup.from_dict(data)
                if group.task_id in wanted and group.task_id not in collected:
                    collected[group.task_id] = group
                else:
                    self._pending_groups[group.task_id] = group
            elif kind == wire.ERROR_REPLY:
                raise AgentMeshError(f"executor rejected request: {data.get('error')}")
        return collected

    def sync_policy(self, params_digest: str, *,
                    timeout: Optional[float] = None) -> PolicyVersion:
        """Round-trip a policy sync; group results arriving in between are
        buffered for the next collection."""
        self._send(wire.POLICY_SYNC, {"params_digest": params_digest})
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if deadline is not None and time.monotonic() > deadline:
                raise AgentMeshError("timed out waiting for policy-sync ack")
            msg = self._conn.recv()
            if msg is None:
                raise AgentMeshError("executor connection lost during policy sync")
            kind = wire.frame_kind(msg)
            data = msg.payload.data if isinstance(msg.payload, Control) else {}
            if kind == wire.POLICY_SYNC:
                return PolicyVersion(int(data["version"]), data.get("params_digest", ""))
            if kind == wire.GROUP_RESULT:
                group = RolloutGroup.from_dict(data)
                self._pending_groups[group.task_id] = group
            elif kind == wire.ERROR_REPLY:
                raise AgentMeshError(f"executor rejected sync: {data.get('error')}")

    # -- convenience ----------------------------------------------------------

    def write_batch(self, groups: dict[str, RolloutGroup], path) -> None:
        ordered = [groups[task_id] for task_id in sorted(groups)]
        emit_training_batch(ordered, path)
