"""Framed transport: roundtrips, partial reads, oversize guard."""

import socket
import struct
import threading

import pytest

from agentmesh.errors import WireProtocolError
from agentmesh.messages import TaskItem, new_message, to_wire_dict
from agentmesh.wire import (
    MAX_FRAME_BYTES,
    FrameConnection,
    control_frame,
    frame_kind,
    read_frame,
    write_frame,
)
from agentmesh import wire


def socket_pair():
    a, b = socket.socketpair()
    return a, b


def test_frame_roundtrip():
    a, b = socket_pair()
    msg = control_frame("w0", wire.HEARTBEAT, {"worker_id": "w0"})
    write_frame(a, msg)
    got = read_frame(b)
    assert to_wire_dict(got) == to_wire_dict(msg)
    a.close(); b.close()


def test_task_payload_roundtrip():
    a, b = socket_pair()
    task = TaskItem(task_id="t", query="q", rollout_index=3, seed=99,
                    meta={"success_prob": 0.5})
    msg = new_message("coordinator", task, receiver="w1",
                      headers={"frame": wire.TASK_ASSIGN})
    write_frame(a, msg)
    got = read_frame(b)
    assert got.payload == task.without_ground_truth() or got.payload == task
    assert frame_kind(got) == wire.TASK_ASSIGN
    a.close(); b.close()


def test_multiple_frames_in_sequence():
    a, b = socket_pair()
    for i in range(5):
        write_frame(a, control_frame("s", wire.STEP_REPORT, {"i": i}))
    for i in range(5):
        assert read_frame(b).payload.data["i"] == i
    a.close(); b.close()


def test_partial_reads_reassemble():
    # feed the stream one byte at a time through a real socket
    a, b = socket_pair()
    msg = control_frame("s", wire.HEARTBEAT, {"worker_id": "x" * 100})
    from agentmesh.messages import encode_message
    body = encode_message(msg)
    frame = struct.pack(">I", len(body)) + body

    def dribble():
        for byte in frame:
            a.sendall(bytes([byte]))
        a.close()

    t = threading.Thread(target=dribble)
    t.start()
    got = read_frame(b)
    t.join()
    assert got.payload.data["worker_id"] == "x" * 100
    b.close()


def test_eof_returns_none():
    a, b = socket_pair()
    a.close()
    assert read_frame(b) is None
    b.close()


def test_oversize_frame_rejected():
    a, b = socket_pair()
    a.sendall(struct.pack(">I", MAX_FRAME_BYTES + 1))
    with pytest.raises(WireProtocolError):
        read_frame(b)
    a.close(); b.close()


def test_frame_kind_for_all_control_kinds():
    for kind in (wire.WORKER_REGISTER, wire.HEARTBEAT, wire.TASK_ASSIGN,
                 wire.STEP_REPORT, wire.TRAJECTORY_COMPLETE, wire.POLICY_SYNC,
                 wire.SHUTDOWN, wire.SUBMIT_GROUP, wire.GROUP_RESULT):
        assert frame_kind(control_frame("s", kind)) == kind


def test_frame_connection_send_after_close_is_false():
    a, b = socket_pair()
    conn = FrameConnection(a)
    conn.close()
    assert conn.send(control_frame("s", wire.HEARTBEAT)) is False
    b.close()


def test_frame_connection_concurrent_sends_do_not_interleave():
    a, b = socket_pair()
    conn = FrameConnection(a)
    received = []

    def reader():
        while True:
            msg = read_frame(b)
            if msg is None:
                return
            received.append(msg.payload.data["n"])

    rt = threading.Thread(target=reader)
    rt.start()
    threads = [
        threading.Thread(target=lambda i=i: [
            conn.send(control_frame("s", wire.STEP_REPORT, {"n": i * 100 + j}))
            for j in range(25)
        ])
        for i in range(4)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    conn.close()
    rt.join()
    assert len(received) == 100
    assert len(set(received)) == 100
