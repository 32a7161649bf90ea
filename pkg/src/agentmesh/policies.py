"""Pluggable decision sources for the agent loop.

Three kinds cover everything the system needs to be testable without model
weights: a table-driven scripted policy for unit tests, a seeded stochastic
policy whose per-task success probability is configurable (the workhorse of
the scaling experiments), and a remote policy that asks an external decision
service over the wire protocol.

Every policy is deterministic given (context, version, seed), which is what
makes lost rollouts safe to re-run from scratch.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from random import Random
from typing import Callable, Optional

import hashlib

from .agents import PolicyRef
from .messages import (
    ActionKind,
    ActionModel,
    Observation,
    TaskItem,
    new_message,
)
from .wire import FrameConnection, control_frame


def stable_seed(*parts) -> int:
    """Order-sensitive 63-bit seed from arbitrary parts (sha256, not the
    process-randomized builtin hash)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


class ScriptedPolicy:
    """Replays a fixed list of actions; items may be callables on the
    context. With ``cycle=True`` the script repeats forever (useful for
    budget-exhaustion tests)."""

    def __init__(self, actions, *, cycle: bool = False, version: int = 0):
        self._actions = list(actions)
        self._cursor = 0
        self._cycle = cycle
        self.version = version

    def decide(self, ctx) -> ActionModel:
        if self._cursor >= len(self._actions):
            if not self._cycle:
                raise IndexError("scripted policy exhausted")
            self._cursor = 0
        item = self._actions[self._cursor]
        self._cursor += 1
        return item(ctx) if callable(item) else item


_EXPR_RE = re.compile(r"(?:compute|calculate|evaluate)[:\s]+(.+)", re.IGNORECASE)


def extract_expression(query: str) -> Optional[str]:
    m = _EXPR_RE.search(query)
    if m:
        return m.group(1).strip()
    return None


class SeededStochasticPolicy:
    """Solves arithmetic queries through the calculator tool, then answers
    correctly with a configured probability.

    The success draw is made once per rollout from a generator seeded by
    (seed, version), so the same (task, rollout, version) always succeeds or
    fails identically. Per-task probability comes from ``meta.success_prob``
    when present, falling back to the constructor default.
    """

    def __init__(self, seed: int, *, version: int = 0,
                 default_success_prob: float = 0.5,
                 distractor_prob: float = 0.0):
        self.version = version
        self._rng = Random(f"{seed}:{version}:stochastic")
        self._default_p = default_success_prob
        self._distractor_prob = distractor_prob
        self._did_distractor = False

    def _success_prob(self, task: TaskItem) -> float:
        p = task.meta.get("success_prob", self._default_p)
        return float(p)

    def decide(self, ctx) -> ActionModel:
        agent = "agent"
        task = ctx.task
        expr = extract_expression(task.query)
        last = ctx.last_observation()
        if last is None:
            if (
                self._distractor_prob > 0
                and not self._did_distractor
                and "kv_search" in ctx.tool_names
                and self._rng.random() < self._distractor_prob
            ):
                self._did_distractor = True
                return ActionModel(
                    agent=agent, kind=ActionKind.TOOL_CALL.value,
                    tool="kv_search", params={"q": task.query},
                )
            if expr is not None and "calculator" in ctx.tool_names:
                return ActionModel(
                    agent=agent, kind=ActionKind.TOOL_CALL.value,
                    tool="calculator", params={"expr": expr},
                )
            return ActionModel(agent=agent, kind=ActionKind.FINAL_ANSWER.value,
                               answer="unknown")
        if (
            last.source != "calculator"
            and expr is not None
            and "calculator" in ctx.tool_names
        ):
            return ActionModel(
                agent=agent, kind=ActionKind.TOOL_CALL.value,
                tool="calculator", params={"expr": expr},
            )
        observed = "" if last.content is None else str(last.content)
        if last.is_error:
            return ActionModel(agent=agent, kind=ActionKind.FINAL_ANSWER.value,
                               answer="unknown")
        if self._rng.random() < self._success_prob(task):
            answer = observed
        else:
            answer = self._corrupt(observed)
        return ActionModel(agent=agent, kind=ActionKind.FINAL_ANSWER.value, answer=answer)

    def _corrupt(self, value: str) -> str:
        delta = self._rng.randint(1, 9)
        try:
            return str(int(value) + delta)
        except ValueError:
            return f"{value}~{delta}"


class SleeperPolicy:
    """Calls the pure-latency tool once, then answers.

    ``meta.latency`` on the task sets the sleep duration; this policy exists
    so benchmarks can model environments where a rollout takes a long,
    known amount of wall-clock time.
    """

    def __init__(self, *, version: int = 0):
        self.version = version

    def decide(self, ctx) -> ActionModel:
        if ctx.last_observation() is None and "sleepy_noop" in ctx.tool_names:
            seconds = float(ctx.task.meta.get("latency", 0.0))
            return ActionModel(
                agent="agent", kind=ActionKind.TOOL_CALL.value,
                tool="sleepy_noop", params={"seconds": seconds},
            )
        return ActionModel(agent="agent", kind=ActionKind.FINAL_ANSWER.value, answer="ok")


# ---------------------------------------------------------------------------
# Remote decisions over the wire protocol


@dataclass(frozen=True)
class _RemoteContext:
    """The slice of a prompt context a decision service sends back over."""

    text: str
    task: TaskItem
    tool_names: tuple[str, ...]
    step_index: int
    _last: Optional[Observation]

    def last_observation(self) -> Optional[Observation]:
        return self._last


class RemoteEndpointPolicy:
    """Forwards each decision to an external service speaking the frame
    protocol: one ``decide`` control frame out, one action message back."""

    def __init__(self, host: str, port: int, *, version: int = 0, name: str = "remote-policy"):
        self.version = version
        self._name = name
        self._conn = FrameConnection.connect(host, port)

    def decide(self, ctx) -> ActionModel:
        last = ctx.last_observation()
        frame = control_frame(
            self._name,
            "decide",
            {
                "task": ctx.task.to_dict(),
                "text": ctx.text,
                "tool_names": list(ctx.tool_names),
                "step_index": ctx.step_index,
                "last_observation": last.to_dict() if last is not None else None,
                "version": self.version,
            },
        )
        if not self._conn.send(frame):
            raise ConnectionError("decision service unreachable")
        reply = self._conn.recv()
        if reply is None:
            raise ConnectionError("decision service closed the connection")
        if not isinstance(reply.payload, ActionModel):
            raise ValueError(f"decision service returned {reply.category!r}")
        return reply.payload

    def close(self) -> None:
        self._conn.close()


class PolicyServer:
    """Hosts any local policy behind the wire protocol.

    One policy instance per (task_id, rollout_index, version) session, built
    by the supplied factory, so remote rollouts keep the same determinism
    guarantees as local ones.
    """

    def __init__(self, policy_factory: Callable[[TaskItem, int], object],
                 host: str = "127.0.0.1", port: int = 0):
        import socket as _socket

        self._factory = policy_factory
        self._server = _socket.socket(_socket.AF_INET, _socket.SOCK_STREAM)
        self._server.setsockopt(_socket.SOL_SOCKET, _socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self._server.listen(32)
        self.host, self.port = self._server.getsockname()
        self._stopping = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._sessions: dict[tuple, object] = {}
        self._lock = threading.Lock()

    def start(self) -> "PolicyServer":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            conn = FrameConnection(sock)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: FrameConnection) -> None:
        while True:
            msg = conn.recv()
            if msg is None:
                conn.close()
                return
            data = msg.payload.data
            task = TaskItem.from_dict(data["task"])
            version = int(data.get("version", 0))
            key = (task.task_id, task.rollout_index, version)
            with self._lock:
                policy = self._sessions.get(key)
                if policy is None:
                    policy = self._factory(task, version)
                    self._sessions[key] = policy
            last = data.get("last_observation")
            ctx = _RemoteContext(
                text=data.get("text", ""),
                task=task,
                tool_names=tuple(data.get("tool_names") or ()),
                step_index=int(data.get("step_index", 0)),
                _last=Observation.from_dict(last) if last else None,
            )
            action = policy.decide(ctx)
            conn.send(new_message("policy-server", action, receiver=msg.sender,
                                  session_id=msg.session_id))

    def stop(self) -> None:
        self._stopping.set()
        try:
            self._server.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# Construction from a policy reference


def build_policy(ref: PolicyRef, task: TaskItem, *, version: Optional[int] = None):
    """Instantiate the policy a worker should run for one rollout.

    Names: ``seeded`` (optionally ``seeded:0.7`` for a default success
    probability), ``arith`` (always-correct arithmetic solver), ``sleeper``
    (pure-latency benchmark policy), and ``remote:HOST:PORT``.
    """
    effective_version = ref.version if version is None else version
    name = ref.name
    if name.startswith("remote:"):
        _, host, port = name.split(":", 2)
        return RemoteEndpointPolicy(host, int(port), version=effective_version)
    if name == "arith":
        return SeededStochasticPolicy(task.seed, version=effective_version,
                                      default_success_prob=1.0)
    if name == "sleeper":
        return SleeperPolicy(version=effective_version)
    if name.startswith("seeded"):
        default_p = 0.5
        if ":" in name:
            default_p = float(name.split(":", 1)[1])
        return SeededStochasticPolicy(task.seed, version=effective_version,
                                      default_success_prob=default_p)
    raise ValueError(f"unknown policy reference {name!r}")
