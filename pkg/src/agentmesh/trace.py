"""Append-only event log: the single source of truth for coordinator state.

Every state transition (submission, assignment, step, completion,
reassignment, heartbeat loss, policy sync) is appended as a checksummed
record before the in-memory state moves on. A coordinator that crashes is
rebuilt by replaying the log; a corrupted tail is detected by the checksums
and replay stops at the last valid prefix.

Record layout: 4-byte big-endian body length, 4-byte CRC32 of the body,
then the canonical-JSON body.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional

from .messages import canonical_json
import json

_HEADER = struct.Struct(">II")


class TraceKind(str, Enum):
    SUBMITTED = "submitted"
    ASSIGNED = "assigned"
    STEP_COMPLETED = "step_completed"
    TOOL_EXECUTED = "tool_executed"
    COMPLETED = "completed"
    FAILED = "failed"
    REASSIGNED = "reassigned"
    HEARTBEAT_MISSED = "heartbeat_missed"
    POLICY_SYNC = "policy_sync"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: TraceKind
    task_id: str = ""
    rollout_index: int = -1
    worker_id: Optional[str] = None
    payload: dict = field(default_factory=dict)
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "task_id": self.task_id,
            "rollout_index": self.rollout_index,
            "worker_id": self.worker_id,
            "payload": self.payload,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(
            seq=int(d["seq"]),
            kind=TraceKind(d["kind"]),
            task_id=d.get("task_id", ""),
            rollout_index=int(d.get("rollout_index", -1)),
            worker_id=d.get("worker_id"),
            payload=d.get("payload") or {},
            timestamp=float(d.get("timestamp", 0.0)),
        )


@dataclass
class ScanResult:
    events: list[TraceEvent]
    valid_bytes: int
    corrupt: bool
    corruption: Optional[str] = None

    @property
    def last_seq(self) -> int:
        return self.events[-1].seq if self.events else 0


def _encode_record(body: bytes) -> bytes:
    return _HEADER.pack(len(body), zlib.crc32(body) & 0xFFFFFFFF) + body


def scan_trace(path: str | Path) -> ScanResult:
    """Read the valid prefix of a trace file.

    Stops at the first record whose length, checksum, JSON body, or sequence
    number is wrong, and reports where the valid prefix ends.
    """
    events: list[TraceEvent] = []
    path = Path(path)
    if not path.exists():
        return ScanResult(events, 0, False)
    data = path.read_bytes()
    offset = 0
    prev_seq = 0
    while offset < len(data):
        if offset + _HEADER.size > len(data):
            return ScanResult(events, offset, True, "truncated header")
        length, crc = _HEADER.unpack_from(data, offset)
        body_start = offset + _HEADER.size
        body_end = body_start + length
        if length > len(data) - body_start:
            return ScanResult(events, offset, True, "truncated body")
        body = data[body_start:body_end]
        if (zlib.crc32(body) & 0xFFFFFFFF) != crc:
            return ScanResult(events, offset, True, "checksum mismatch")
        try:
            event = TraceEvent.from_dict(json.loads(body.decode("utf-8")))
        except Exception as exc:
            return ScanResult(events, offset, True, f"undecodable body: {exc}")
        if event.seq <= prev_seq:
            return ScanResult(events, offset, True,
                              f"sequence regressed: {event.seq} after {prev_seq}")
        events.append(event)
        prev_seq = event.seq
        offset = body_end
    return ScanResult(events, offset, False)


class TraceStore:
    """Serialized appender over the checksummed log file.

    Appends are atomic with respect to concurrent recorders (single writer
    lock + one write syscall per record). ``after_append`` is an
    instrumentation hook invoked with each new sequence number; fault
    injection and metrics both hang off it.
    """

    def __init__(self, path: str | Path, *, fsync: bool = False,
                 after_append: Optional[Callable[[int], None]] = None):
        self.path = Path(path)
        self.fsync = fsync
        self.after_append = after_append
        self._lock = threading.Lock()
        scan = scan_trace(self.path)
        self._seq = scan.last_seq
        if scan.corrupt:
            # keep only the valid prefix so new appends extend good data
            with open(self.path, "r+b") as fh:
                fh.truncate(scan.valid_bytes)
        self._fh = open(self.path, "ab")
        self.recovered_events = scan.events
        self.recovered_corruption = scan.corruption

    def append(self, kind: TraceKind, *, task_id: str = "", rollout_index: int = -1,
               worker_id: Optional[str] = None, payload: Optional[dict] = None,
               timestamp: Optional[float] = None) -> int:
        """Durably append one event and return its sequence number.

        Raises OSError on storage failure; callers are expected to fail
        stop rather than continue with a gap.
        """
        with self._lock:
            seq = self._seq + 1
            event = TraceEvent(
                seq=seq,
                kind=kind,
                task_id=task_id,
                rollout_index=rollout_index,
                worker_id=worker_id,
                payload=payload or {},
                timestamp=time.time() if timestamp is None else timestamp,
            )
            body = canonical_json(event.to_dict()).encode("utf-8")
            self._fh.write(_encode_record(body))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._seq = seq
        if self.after_append is not None:
            self.after_append(seq)
        return seq

    @property
    def last_seq(self) -> int:
        with self._lock:
            return self._seq

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.close()
            except OSError:
                pass

    def events(self) -> Iterator[TraceEvent]:
        return iter(scan_trace(self.path).events)


def verify_trace(events: list[TraceEvent]) -> list[str]:
    """Structural checks over a scanned log: monotone seq, one terminal per
    rollout, and terminals only after an assignment."""
    problems: list[str] = []
    prev = 0
    assigned: set[tuple[str, int]] = set()
    terminal: set[tuple[str, int]] = set()
    for ev in events:
        if ev.seq <= prev:
            problems.append(f"seq {ev.seq} not increasing after {prev}")
        prev = ev.seq
        key = (ev.task_id, ev.rollout_index)
        if ev.kind is TraceKind.ASSIGNED:
            assigned.add(key)
        elif ev.kind in (TraceKind.COMPLETED, TraceKind.FAILED):
            if key not in assigned:
                problems.append(f"terminal event for {key} with no prior assignment (seq {ev.seq})")
            if key in terminal:
                problems.append(f"duplicate terminal event for {key} (seq {ev.seq})")
            terminal.add(key)
    return problems
