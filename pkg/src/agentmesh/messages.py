"""Message envelope and in-process routing bus.

Every interaction in this system travels as a :class:`Message`: user-to-agent
task submission, agent-to-tool calls, tool feedback, inter-agent delegation,
and coordinator/worker control traffic. A message is routed either
point-to-point (``receiver``) or fanned out on a pub-sub ``topic``, never
both. Routing to a missing or failed endpoint never raises and never loses
the message: the bus synthesizes an error notice back to the sender, and if
the sender itself is gone the notice lands in the dead-letter list.

The canonical JSON encoding produced by :func:`to_wire_dict` /
:func:`encode_message` is the same encoding used on the stream transport
between coordinator and workers, so a message captured from a trace can be
replayed onto a socket unchanged.
"""

from __future__ import annotations

import heapq
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .errors import MessageValidationError, UnknownEndpointError

# Error notices preempt everything else in an inbox.
PRIORITY_MAX = 2**31 - 1

CATEGORY_TASK = "task"
CATEGORY_ACTION = "action"
CATEGORY_OBSERVATION = "observation"
CATEGORY_ERROR = "error"
CATEGORY_CONTROL = "control"


class ErrorCause(str, Enum):
    UNAVAILABLE = "unavailable"
    TIMEOUT = "timeout"
    HANDLER_FAILURE = "handler_failure"
    VALIDATION_FAILURE = "validation_failure"


class ActionKind(str, Enum):
    TOOL_CALL = "tool_call"
    FINAL_ANSWER = "final_answer"
    DELEGATE = "delegate"


# ---------------------------------------------------------------------------
# Payload kinds


@dataclass(frozen=True)
class TaskItem:
    """One rollout's worth of work: a query plus scheduling metadata.

    ``ground_truth`` is reward-side information; it is stripped before a task
    reaches a policy. ``seed`` fixes every random draw made on behalf of this
    (task_id, rollout_index) pair, which is what makes re-running a lost
    rollout safe. ``meta`` carries simulation knobs (e.g. a target success
    probability for stochastic policies) and is opaque to the scheduler.
    """

    task_id: str
    query: str
    ground_truth: Optional[str] = None
    rollout_index: int = 0
    max_steps: int = 8
    priority: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, int]:
        return (self.task_id, self.rollout_index)

    def without_ground_truth(self) -> "TaskItem":
        return TaskItem(
            task_id=self.task_id,
            query=self.query,
            ground_truth=None,
            rollout_index=self.rollout_index,
            max_steps=self.max_steps,
            priority=self.priority,
            seed=self.seed,
            meta=dict(self.meta),
        )

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "query": self.query,
            "ground_truth": self.ground_truth,
            "rollout_index": self.rollout_index,
            "max_steps": self.max_steps,
            "priority": self.priority,
            "seed": self.seed,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskItem":
        return cls(
            task_id=d["task_id"],
            query=d["query"],
            ground_truth=d.get("ground_truth"),
            rollout_index=int(d.get("rollout_index", 0)),
            max_steps=int(d.get("max_steps", 8)),
            priority=int(d.get("priority", 0)),
            seed=int(d.get("seed", 0)),
            meta=dict(d.get("meta") or {}),
        )


@dataclass(frozen=True)
class ActionModel:
    """A decision taken by an agent: call a tool, answer, or delegate."""

    agent: str
    kind: str
    tool: Optional[str] = None
    params: dict = field(default_factory=dict)
    answer: Optional[str] = None
    target_agent: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "kind": self.kind,
            "tool": self.tool,
            "params": dict(self.params),
            "answer": self.answer,
            "target_agent": self.target_agent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionModel":
        return cls(
            agent=d["agent"],
            kind=d["kind"],
            tool=d.get("tool"),
            params=dict(d.get("params") or {}),
            answer=d.get("answer"),
            target_agent=d.get("target_agent"),
        )


@dataclass(frozen=True)
class Observation:
    """Environment feedback answering one action."""

    source: str
    content: Any = None
    is_error: bool = False
    step_index: int = 0

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "content": self.content,
            "is_error": self.is_error,
            "step_index": self.step_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            source=d["source"],
            content=d.get("content"),
            is_error=bool(d.get("is_error", False)),
            step_index=int(d.get("step_index", 0)),
        )


@dataclass(frozen=True)
class ErrorNotice:
    """Synthesized when delivery to an endpoint failed."""

    failed_receiver: str
    cause: str
    original_message_id: str

    def to_dict(self) -> dict:
        return {
            "failed_receiver": self.failed_receiver,
            "cause": self.cause,
            "original_message_id": self.original_message_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorNotice":
        return cls(
            failed_receiver=d["failed_receiver"],
            cause=d["cause"],
            original_message_id=d["original_message_id"],
        )


@dataclass(frozen=True)
class Control:
    """Protocol-level frame body (register, heartbeat, assign, ...)."""

    kind: str
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "data": dict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "Control":
        return cls(kind=d["kind"], data=dict(d.get("data") or {}))


# category string <-> payload class; the wire tag equals the category.
PAYLOAD_TYPES = {
    CATEGORY_TASK: TaskItem,
    CATEGORY_ACTION: ActionModel,
    CATEGORY_OBSERVATION: Observation,
    CATEGORY_ERROR: ErrorNotice,
    CATEGORY_CONTROL: Control,
}
_PAYLOAD_TAGS = {cls: tag for tag, cls in PAYLOAD_TYPES.items()}


# ---------------------------------------------------------------------------
# Message


@dataclass(frozen=True)
class Message:
    """The universal communication envelope.

    Immutable after construction; safe to hand between threads and to reuse
    as a pub-sub fan-out copy. ``headers`` is by convention not mutated after
    the message is built.
    """

    id: str
    session_id: str
    sender: str
    receiver: Optional[str]
    caller: Optional[str]
    payload: Any
    category: str
    topic: Optional[str]
    priority: int
    headers: dict
    timestamp: float


class _SenderClocks:
    """Issues per-sender non-decreasing timestamps."""

    def __init__(self):
        self._last: dict[str, float] = {}
        self._lock = threading.Lock()

    def stamp(self, sender: str) -> float:
        with self._lock:
            now = time.time()
            last = self._last.get(sender, 0.0)
            ts = now if now >= last else last
            self._last[sender] = ts
            return ts


_clocks = _SenderClocks()


def new_message(
    sender: str,
    payload: Any,
    *,
    category: Optional[str] = None,
    receiver: Optional[str] = None,
    topic: Optional[str] = None,
    session_id: str = "",
    caller: Optional[str] = None,
    priority: int = 0,
    headers: Optional[dict] = None,
    id: Optional[str] = None,
    timestamp: Optional[float] = None,
) -> Message:
    """Build a message, inferring category from the payload type.

    Timestamps default to a per-sender monotonic stamp so that two messages
    from the same endpoint never go backwards in time.
    """
    if category is None:
        category = _PAYLOAD_TAGS.get(type(payload))
        if category is None:
            raise MessageValidationError(
                [f"payload type {type(payload).__name__} has no category"]
            )
    return Message(
        id=id if id is not None else str(uuid.uuid4()),
        session_id=session_id,
        sender=sender,
        receiver=receiver,
        caller=caller,
        payload=payload,
        category=category,
        topic=topic,
        priority=priority,
        headers=dict(headers or {}),
        timestamp=timestamp if timestamp is not None else _clocks.stamp(sender),
    )


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationVerdict:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(msg: Message) -> ValidationVerdict:
    """Check envelope constraints. Never mutates the message."""
    v: list[str] = []
    if not msg.sender:
        v.append("sender missing")
    if not msg.id:
        v.append("id missing")
    if msg.receiver is None and msg.topic is None:
        v.append("no route target")
    if msg.receiver is not None and msg.topic is not None:
        v.append("both receiver and topic set")
    if msg.category not in PAYLOAD_TYPES:
        v.append(f"unknown category {msg.category!r}")
    else:
        expected = PAYLOAD_TYPES[msg.category]
        if not isinstance(msg.payload, expected):
            v.append("category/payload mismatch")
    if not isinstance(msg.priority, int) or isinstance(msg.priority, bool):
        v.append("priority not an integer")
    if not isinstance(msg.timestamp, (int, float)) or msg.timestamp < 0:
        v.append("timestamp invalid")
    return ValidationVerdict(v)


# ---------------------------------------------------------------------------
# Delivery


class DeliveryStatus(str, Enum):
    DELIVERED = "delivered"
    QUEUED = "queued"  # accepted by a buffering transport, not yet consumed
    ERROR_NOTIFIED = "error_notified"


@dataclass(frozen=True)
class DeliveryResult:
    status: DeliveryStatus
    recipient_count: int


class Inbox:
    """Priority inbox: pops in (-priority, timestamp, id) order.

    Safe for many producers and one consumer.
    """

    def __init__(self):
        self._heap: list[tuple[int, float, str, Message]] = []
        self._lock = threading.Lock()
        self._available = threading.Condition(self._lock)

    def push(self, msg: Message) -> None:
        with self._available:
            heapq.heappush(self._heap, (-msg.priority, msg.timestamp, msg.id, msg))
            self._available.notify()

    def pop(self, timeout: Optional[float] = None) -> Optional[Message]:
        with self._available:
            if timeout is None:
                if not self._heap:
                    return None
            else:
                deadline = time.monotonic() + timeout
                while not self._heap:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._available.wait(remaining)
            return heapq.heappop(self._heap)[3]

    def drain(self) -> list[Message]:
        out = []
        while True:
            msg = self.pop()
            if msg is None:
                return out
            out.append(msg)

    def __len__(self) -> int:
        with self._lock:
            return len(self._heap)


@dataclass
class _Endpoint:
    name: str
    inbox: Inbox
    alive: bool = True


class EndpointRegistry:
    """Names, inboxes, liveness, and topic subscriptions for one process.

    Point-to-point delivery enqueues at the receiver's inbox; failures turn
    into an error notice for the sender. Topic delivery fans out to whoever
    is subscribed at publish time; an empty topic is a successful delivery to
    zero recipients, not an error.
    """

    def __init__(self):
        self._endpoints: dict[str, _Endpoint] = {}
        # topic -> insertion-ordered set of endpoint names
        self._topics: dict[str, dict[str, None]] = {}
        self._lock = threading.RLock()
        self.dead_letters: list[tuple[str, Message]] = []
        self.routed_ids: set[str] = set()

    def register(self, name: str) -> None:
        with self._lock:
            self._endpoints[name] = _Endpoint(name=name, inbox=Inbox())

    def unregister(self, name: str) -> None:
        with self._lock:
            self._endpoints.pop(name, None)
            for subs in self._topics.values():
                subs.pop(name, None)

    def mark_failed(self, name: str) -> None:
        with self._lock:
            ep = self._endpoints.get(name)
            if ep is not None:
                ep.alive = False

    def is_registered(self, name: str) -> bool:
        with self._lock:
            return name in self._endpoints

    def inbox(self, name: str) -> Inbox:
        with self._lock:
            try:
                return self._endpoints[name].inbox
            except KeyError:
                raise UnknownEndpointError(name) from None

    def subscribe(self, endpoint: str, topic: str) -> None:
        """Idempotent: double-subscribe delivers single copies."""
        with self._lock:
            if endpoint not in self._endpoints:
                raise UnknownEndpointError(endpoint)
            self._topics.setdefault(topic, {})[endpoint] = None

    def unsubscribe(self, endpoint: str, topic: str) -> None:
        with self._lock:
            subs = self._topics.get(topic)
            if subs is not None:
                subs.pop(endpoint, None)

    def subscribers(self, topic: str) -> list[str]:
        with self._lock:
            return list(self._topics.get(topic, {}))

    # -- delivery ----------------------------------------------------------

    def route(self, msg: Message) -> DeliveryResult:
        """Point-to-point delivery with automatic error notification.

        A live registered receiver gets the message in priority order. A
        missing or failed receiver produces exactly one error notice sent
        back to the sender; if the sender is also gone, the notice goes to
        the dead-letter list rather than vanishing.
        """
        verdict = validate(msg)
        if not verdict.ok:
            raise MessageValidationError(verdict.violations)
        if msg.receiver is None:
            raise MessageValidationError(["route requires a receiver"])
        with self._lock:
            target = self._endpoints.get(msg.receiver)
            if target is not None and target.alive:
                target.inbox.push(msg)
                self.routed_ids.add(msg.id)
                return DeliveryResult(DeliveryStatus.DELIVERED, 1)
            self.routed_ids.add(msg.id)
            notice = make_error_notice(msg, ErrorCause.UNAVAILABLE)
            sender = self._endpoints.get(msg.sender)
            if sender is not None and sender.alive:
                sender.inbox.push(notice)
                self.routed_ids.add(notice.id)
            else:
                self.dead_letters.append(("sender unreachable", notice))
            return DeliveryResult(DeliveryStatus.ERROR_NOTIFIED, 0)

    def publish(self, msg: Message) -> DeliveryResult:
        """Fan a message out to every current subscriber of its topic."""
        verdict = validate(msg)
        if not verdict.ok:
            raise MessageValidationError(verdict.violations)
        if msg.topic is None:
            raise MessageValidationError(["publish requires a topic"])
        with self._lock:
            count = 0
            for name in self._topics.get(msg.topic, {}):
                ep = self._endpoints.get(name)
                if ep is not None and ep.alive:
                    ep.inbox.push(msg)
                    count += 1
            self.routed_ids.add(msg.id)
            return DeliveryResult(DeliveryStatus.DELIVERED, count)


def make_error_notice(original: Message, cause: ErrorCause | str) -> Message:
    """Build the error notification for a failed delivery.

    The notice goes back to the original sender at maximum priority, keeps
    the session and caller, and records the failed message id plus the
    notice chain depth in headers (a notice about a notice deepens the
    chain).
    """
    cause_value = cause.value if isinstance(cause, ErrorCause) else str(cause)
    failed = original.receiver if original.receiver is not None else (original.topic or "")
    depth = int(original.headers.get("error_depth", 0)) + 1
    return new_message(
        sender="system",
        payload=ErrorNotice(
            failed_receiver=failed,
            cause=cause_value,
            original_message_id=original.id,
        ),
        category=CATEGORY_ERROR,
        receiver=original.sender,
        session_id=original.session_id,
        caller=original.caller,
        priority=PRIORITY_MAX,
        headers={"original_message_id": original.id, "error_depth": depth},
    )


# ---------------------------------------------------------------------------
# Canonical JSON encoding

WIRE_FIELDS = (
    "id",
    "session_id",
    "sender",
    "receiver",
    "caller",
    "payload",
    "category",
    "topic",
    "priority",
    "headers",
    "timestamp",
)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text: sorted keys, no whitespace, raw unicode."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def to_wire_dict(msg: Message) -> dict:
    """Encode with exactly the eleven envelope keys; payload is tagged."""
    return {
        "id": msg.id,
        "session_id": msg.session_id,
        "sender": msg.sender,
        "receiver": msg.receiver,
        "caller": msg.caller,
        "payload": {"kind": msg.category, "data": msg.payload.to_dict()},
        "category": msg.category,
        "topic": msg.topic,
        "priority": msg.priority,
        "headers": dict(msg.headers),
        "timestamp": msg.timestamp,
    }


def from_wire_dict(d: dict) -> Message:
    kind = d["payload"]["kind"]
    try:
        payload_cls = PAYLOAD_TYPES[kind]
    except KeyError:
        raise MessageValidationError([f"unknown payload kind {kind!r}"]) from None
    return Message(
        id=d["id"],
        session_id=d.get("session_id", ""),
        sender=d["sender"],
        receiver=d.get("receiver"),
        caller=d.get("caller"),
        payload=payload_cls.from_dict(d["payload"]["data"]),
        category=d["category"],
        topic=d.get("topic"),
        priority=int(d["priority"]),
        headers=dict(d.get("headers") or {}),
        timestamp=float(d["timestamp"]),
    )


def encode_message(msg: Message) -> bytes:
    return canonical_json(to_wire_dict(msg)).encode("utf-8")


def decode_message(raw: bytes) -> Message:
    try:
        d = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MessageValidationError([f"undecodable message: {exc}"]) from None
    return from_wire_dict(d)
