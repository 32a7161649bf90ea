"""Length-prefixed message framing over stream sockets.

Each frame is a 4-byte big-endian length followed by one canonical-JSON
message (the same encoding used everywhere else). Frame kind is carried in
``headers["frame"]`` and, for control frames, mirrored by the control
payload's ``kind``.
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Optional

from .errors import WireProtocolError
from .messages import (
    CATEGORY_CONTROL,
    Control,
    Message,
    decode_message,
    encode_message,
    new_message,
)

_LEN = struct.Struct(">I")
MAX_FRAME_BYTES = 64 * 1024 * 1024

# Frame kinds
WORKER_REGISTER = "worker-register"
HEARTBEAT = "heartbeat"
TASK_ASSIGN = "task-assign"
STEP_REPORT = "step-report"
TRAJECTORY_COMPLETE = "trajectory-complete"
POLICY_SYNC = "policy-sync"
SHUTDOWN = "shutdown"
SUBMIT_GROUP = "submit-group"
GROUP_RESULT = "group-result"
ERROR_REPLY = "error-reply"


def control_frame(sender: str, kind: str, data: Optional[dict] = None, *,
                  receiver: str = "peer", session_id: str = "",
                  headers: Optional[dict] = None, priority: int = 0) -> Message:
    hdrs = dict(headers or {})
    hdrs["frame"] = kind
    return new_message(
        sender,
        Control(kind=kind, data=data or {}),
        category=CATEGORY_CONTROL,
        receiver=receiver,
        session_id=session_id,
        headers=hdrs,
        priority=priority,
    )


def frame_kind(msg: Message) -> str:
    kind = msg.headers.get("frame")
    if kind:
        return str(kind)
    if isinstance(msg.payload, Control):
        return msg.payload.kind
    return msg.category


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except OSError:
            return None
        if not chunk:
            return None
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Optional[Message]:
    """Read one frame; None on a clean or abrupt connection end."""
    header = _recv_exact(sock, _LEN.size)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise WireProtocolError(f"frame of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return decode_message(body)


def write_frame(sock: socket.socket, msg: Message) -> None:
    body = encode_message(msg)
    sock.sendall(_LEN.pack(len(body)) + body)


class FrameConnection:
    """A socket wrapped with frame IO and a send lock.

    Sends from multiple threads never interleave; reads are expected from a
    single reader thread.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = 10.0) -> "FrameConnection":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send(self, msg: Message) -> bool:
        """False if the peer is gone; never raises for transport loss."""
        with self._send_lock:
            if self._closed:
                return False
            try:
                write_frame(self.sock, msg)
                return True
            except OSError:
                self._closed = True
                return False

    def recv(self) -> Optional[Message]:
        if self._closed:
            return None
        return read_frame(self.sock)

    def close(self) -> None:
        with self._send_lock:
            if not self._closed:
                self._closed = True
                try:
                    self.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                try:
                    self.sock.close()
                except OSError:
                    pass

    @property
    def closed(self) -> bool:
        return self._closed
