"""Append-only trace: checksums, corruption boundaries, concurrent appends."""

import struct
import threading

import pytest

from agentmesh.trace import (
    TraceKind,
    TraceStore,
    scan_trace,
    verify_trace,
)


def test_append_read_roundtrip(tmp_path):
    path = tmp_path / "trace.bin"
    store = TraceStore(path)
    s1 = store.append(TraceKind.SUBMITTED, task_id="t", rollout_index=0,
                      payload={"task": {"q": 1}})
    s2 = store.append(TraceKind.ASSIGNED, task_id="t", rollout_index=0,
                      worker_id="w0", payload={"attempt": 1})
    assert (s1, s2) == (1, 2)
    events = list(store.events())
    assert [e.kind for e in events] == [TraceKind.SUBMITTED, TraceKind.ASSIGNED]
    assert events[1].worker_id == "w0"
    store.close()


def test_seq_strictly_increasing(tmp_path):
    store = TraceStore(tmp_path / "t.bin")
    seqs = [store.append(TraceKind.SUBMITTED, task_id=f"t{i}") for i in range(20)]
    assert seqs == list(range(1, 21))
    store.close()


def test_reopen_continues_sequence(tmp_path):
    path = tmp_path / "t.bin"
    store = TraceStore(path)
    store.append(TraceKind.SUBMITTED, task_id="a")
    store.append(TraceKind.SUBMITTED, task_id="b")
    store.close()
    reopened = TraceStore(path)
    assert reopened.last_seq == 2
    assert reopened.append(TraceKind.SUBMITTED, task_id="c") == 3
    assert [e.task_id for e in reopened.events()] == ["a", "b", "c"]
    reopened.close()


def test_corrupt_body_stops_at_valid_prefix(tmp_path):
    path = tmp_path / "t.bin"
    store = TraceStore(path)
    for i in range(5):
        store.append(TraceKind.SUBMITTED, task_id=f"t{i}")
    store.close()
    raw = bytearray(path.read_bytes())
    # flip a byte inside the fourth record's body
    scan = scan_trace(path)
    assert len(scan.events) == 5
    offsets = []
    off = 0
    data = path.read_bytes()
    while off < len(data):
        length, _ = struct.unpack_from(">II", data, off)
        offsets.append(off)
        off += 8 + length
    target = offsets[3] + 8 + 2
    raw[target] ^= 0xFF
    path.write_bytes(bytes(raw))
    scan = scan_trace(path)
    assert scan.corrupt
    assert "checksum" in scan.corruption
    assert len(scan.events) == 3
    assert scan.valid_bytes == offsets[3]


def test_truncated_tail_detected(tmp_path):
    path = tmp_path / "t.bin"
    store = TraceStore(path)
    for i in range(3):
        store.append(TraceKind.SUBMITTED, task_id=f"t{i}")
    store.close()
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    scan = scan_trace(path)
    assert scan.corrupt
    assert len(scan.events) == 2


def test_reopen_truncates_corrupt_tail_and_appends_cleanly(tmp_path):
    path = tmp_path / "t.bin"
    store = TraceStore(path)
    store.append(TraceKind.SUBMITTED, task_id="good")
    store.close()
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x00\x10GARBAGE")
    reopened = TraceStore(path)
    assert reopened.recovered_corruption is not None
    assert reopened.append(TraceKind.SUBMITTED, task_id="after") == 2
    reopened.close()
    scan = scan_trace(path)
    assert not scan.corrupt
    assert [e.task_id for e in scan.events] == ["good", "after"]


def test_append_after_close_raises(tmp_path):
    store = TraceStore(tmp_path / "t.bin")
    store.append(TraceKind.SUBMITTED, task_id="a")
    store.close()
    with pytest.raises((OSError, ValueError)):
        store.append(TraceKind.SUBMITTED, task_id="b")


def test_concurrent_appends_have_no_gaps(tmp_path):
    store = TraceStore(tmp_path / "t.bin")
    errors = []

    def hammer(i):
        try:
            for j in range(50):
                store.append(TraceKind.STEP_COMPLETED, task_id=f"t{i}",
                             rollout_index=j)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=hammer, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    store.close()
    assert not errors
    events = scan_trace(tmp_path / "t.bin").events
    assert [e.seq for e in events] == list(range(1, 401))


def test_after_append_hook_fires(tmp_path):
    seen = []
    store = TraceStore(tmp_path / "t.bin", after_append=seen.append)
    store.append(TraceKind.SUBMITTED, task_id="a")
    store.append(TraceKind.SUBMITTED, task_id="b")
    store.close()
    assert seen == [1, 2]


def test_empty_file_scans_empty(tmp_path):
    scan = scan_trace(tmp_path / "missing.bin")
    assert scan.events == []
    assert not scan.corrupt


def test_verify_trace_catches_structural_problems(tmp_path):
    store = TraceStore(tmp_path / "t.bin")
    store.append(TraceKind.SUBMITTED, task_id="t", rollout_index=0)
    store.append(TraceKind.COMPLETED, task_id="t", rollout_index=0,
                 payload={"trajectory": {}})  # terminal without assignment
    store.close()
    problems = verify_trace(list(scan_trace(tmp_path / "t.bin").events))
    assert any("no prior assignment" in p for p in problems)


def test_verify_trace_catches_duplicate_terminal(tmp_path):
    store = TraceStore(tmp_path / "t.bin")
    store.append(TraceKind.SUBMITTED, task_id="t", rollout_index=0)
    store.append(TraceKind.ASSIGNED, task_id="t", rollout_index=0, worker_id="w")
    store.append(TraceKind.COMPLETED, task_id="t", rollout_index=0)
    store.append(TraceKind.COMPLETED, task_id="t", rollout_index=0)
    store.close()
    problems = verify_trace(list(scan_trace(tmp_path / "t.bin").events))
    assert any("duplicate terminal" in p for p in problems)
