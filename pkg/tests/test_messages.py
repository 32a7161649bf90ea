"""Message envelope, validation, priority routing, pub-sub, error notices."""

import itertools
import json
from random import Random

import pytest
from hypothesis import given, settings, strategies as st

from agentmesh.errors import MessageValidationError, UnknownEndpointError
from agentmesh.messages import (
    PRIORITY_MAX,
    ActionModel,
    Control,
    DeliveryStatus,
    EndpointRegistry,
    ErrorCause,
    ErrorNotice,
    Message,
    Observation,
    TaskItem,
    canonical_json,
    decode_message,
    encode_message,
    from_wire_dict,
    make_error_notice,
    new_message,
    to_wire_dict,
    validate,
)

PAYLOAD_SAMPLES = {
    "task": TaskItem(task_id="t1", query="q"),
    "action": ActionModel(agent="a", kind="final_answer", answer="x"),
    "observation": Observation(source="tool", content="y"),
    "error": ErrorNotice(failed_receiver="r", cause="unavailable", original_message_id="m"),
    "control": Control(kind="heartbeat"),
}


def msg(sender="alice", receiver="bob", *, topic=None, payload=None, category=None,
        priority=0, timestamp=None, id=None, headers=None):
    payload = payload if payload is not None else Control(kind="noop")
    return new_message(sender, payload, category=category, receiver=receiver,
                       topic=topic, priority=priority, timestamp=timestamp,
                       id=id, headers=headers)


# ---------------------------------------------------------------------------
# validation


def test_well_formed_message_validates():
    assert validate(msg()).ok


def test_no_route_target_rejected():
    verdict = validate(msg(receiver=None, topic=None))
    assert not verdict.ok
    assert any("no route target" in v for v in verdict.violations)


def test_both_receiver_and_topic_rejected():
    verdict = validate(msg(receiver="bob", topic="metrics"))
    assert not verdict.ok


def test_category_payload_grid():
    # exactly the diagonal pairs of (category, payload kind) validate
    for category, payload in itertools.product(PAYLOAD_SAMPLES, PAYLOAD_SAMPLES.values()):
        verdict = validate(msg(payload=payload, category=category))
        should_match = isinstance(payload, type(PAYLOAD_SAMPLES[category]))
        # TaskItem/ActionModel/... classes are distinct, no subclassing here
        assert verdict.ok == should_match, (category, type(payload).__name__)


def test_category_payload_mismatch_named():
    verdict = validate(msg(payload=TaskItem(task_id="t", query="q"), category="error"))
    assert any("category/payload mismatch" in v for v in verdict.violations)


def test_validate_never_mutates():
    m = msg(priority=3)
    before = to_wire_dict(m)
    validate(m)
    assert to_wire_dict(m) == before


def test_ids_unique_over_batch():
    ids = {new_message("s", Control(kind="x"), receiver="r").id for _ in range(2000)}
    assert len(ids) == 2000


def test_timestamps_non_decreasing_per_sender():
    stamps = [new_message("same-sender", Control(kind="x"), receiver="r").timestamp
              for _ in range(100)]
    assert all(a <= b for a, b in zip(stamps, stamps[1:]))


# ---------------------------------------------------------------------------
# routing


def make_registry(*names):
    reg = EndpointRegistry()
    for n in names:
        reg.register(n)
    return reg


def test_route_to_registered_endpoint_delivers():
    reg = make_registry("alice", "calculator")
    result = reg.route(msg(receiver="calculator"))
    assert result.status is DeliveryStatus.DELIVERED
    assert result.recipient_count == 1
    assert len(reg.inbox("calculator")) == 1


def test_route_to_unregistered_endpoint_notifies_sender():
    reg = make_registry("alice")
    result = reg.route(msg(receiver="ghost"))
    assert result.status is DeliveryStatus.ERROR_NOTIFIED
    assert result.recipient_count == 0
    notice = reg.inbox("alice").pop()
    assert notice.category == "error"
    assert notice.payload.failed_receiver == "ghost"
    assert notice.payload.cause == ErrorCause.UNAVAILABLE.value


def test_route_to_failed_endpoint_notifies_sender():
    reg = make_registry("alice", "bob")
    reg.mark_failed("bob")
    result = reg.route(msg(receiver="bob"))
    assert result.status is DeliveryStatus.ERROR_NOTIFIED
    assert reg.inbox("alice").pop().payload.failed_receiver == "bob"


def test_error_notification_totality_exactly_one():
    reg = make_registry("alice")
    reg.route(msg(receiver="ghost"))
    inbox = reg.inbox("alice")
    assert len(inbox) == 1
    assert inbox.pop().category == "error"
    assert len(inbox) == 0


def test_unroutable_notice_goes_to_dead_letters():
    reg = EndpointRegistry()  # sender not registered either
    reg.register("other")
    result = reg.route(msg(sender="nobody", receiver="ghost"))
    assert result.status is DeliveryStatus.ERROR_NOTIFIED
    assert len(reg.dead_letters) == 1
    reason, notice = reg.dead_letters[0]
    assert notice.payload.failed_receiver == "ghost"


def test_route_rejects_invalid_message():
    reg = make_registry("alice")
    with pytest.raises(MessageValidationError):
        reg.route(msg(receiver=None, topic=None))


def test_dequeue_order_matches_brute_force_for_ties():
    # priorities {1, 5, 5}: priority 5 earlier timestamp, priority 5 later, then 1;
    # brute-force over all arrival orders
    messages = [
        msg(receiver="sink", priority=1, timestamp=10.0, id="a"),
        msg(receiver="sink", priority=5, timestamp=5.0, id="b"),
        msg(receiver="sink", priority=5, timestamp=6.0, id="c"),
    ]
    expected = sorted(messages, key=lambda m: (-m.priority, m.timestamp, m.id))
    assert [m.id for m in expected] == ["b", "c", "a"]
    for arrival in itertools.permutations(messages):
        reg = make_registry("alice", "sink")
        for m in arrival:
            reg.route(m)
        drained = reg.inbox("sink").drain()
        assert [m.id for m in drained] == ["b", "c", "a"]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(-5, 5), st.floats(0, 100, allow_nan=False)),
        min_size=1, max_size=8,
    )
)
def test_priority_queue_order_property(prio_ts):
    messages = [
        msg(receiver="sink", priority=p, timestamp=ts, id=f"m{i:02d}")
        for i, (p, ts) in enumerate(prio_ts)
    ]
    expected = [m.id for m in sorted(messages, key=lambda m: (-m.priority, m.timestamp, m.id))]
    reg = make_registry("alice", "sink")
    for m in messages:
        reg.route(m)
    assert [m.id for m in reg.inbox("sink").drain()] == expected


# ---------------------------------------------------------------------------
# pub-sub


def test_publish_to_three_subscribers():
    reg = make_registry("alice", "s1", "s2", "s3")
    for s in ("s1", "s2", "s3"):
        reg.subscribe(s, "metrics")
    result = reg.publish(msg(receiver=None, topic="metrics"))
    assert result.status is DeliveryStatus.DELIVERED
    assert result.recipient_count == 3
    for s in ("s1", "s2", "s3"):
        assert len(reg.inbox(s)) == 1


def test_publish_without_subscribers_is_delivered_zero():
    reg = make_registry("alice")
    result = reg.publish(msg(receiver=None, topic="empty"))
    assert result.status is DeliveryStatus.DELIVERED
    assert result.recipient_count == 0


def test_publish_sees_registry_state_at_publish_time():
    reg = make_registry("alice", "s1", "s2")
    reg.subscribe("s1", "t")
    assert reg.publish(msg(receiver=None, topic="t")).recipient_count == 1
    reg.subscribe("s2", "t")
    assert reg.publish(msg(receiver=None, topic="t")).recipient_count == 2
    reg.unsubscribe("s1", "t")
    assert reg.publish(msg(receiver=None, topic="t")).recipient_count == 1
    assert len(reg.inbox("s1")) == 2  # from the first two publishes only
    assert len(reg.inbox("s2")) == 2


def test_double_subscribe_single_copy():
    reg = make_registry("alice", "s1")
    reg.subscribe("s1", "t")
    reg.subscribe("s1", "t")
    reg.publish(msg(receiver=None, topic="t"))
    assert len(reg.inbox("s1")) == 1


def test_subscribe_unknown_endpoint_rejected():
    reg = make_registry("alice")
    with pytest.raises(UnknownEndpointError):
        reg.subscribe("ghost", "t")


# ---------------------------------------------------------------------------
# error notices


def test_make_error_notice_field_mapping():
    original = msg(sender="agent1", receiver="toolX")
    notice = make_error_notice(original, ErrorCause.UNAVAILABLE)
    assert notice.receiver == "agent1"
    assert notice.category == "error"
    assert notice.session_id == original.session_id
    assert notice.payload.failed_receiver == "toolX"
    assert notice.payload.original_message_id == original.id
    assert notice.priority == PRIORITY_MAX


def test_error_notice_preserves_caller():
    original = new_message("a", Control(kind="x"), receiver="b", caller="parent")
    assert make_error_notice(original, ErrorCause.TIMEOUT).caller == "parent"


def test_error_notice_cause_timeout():
    notice = make_error_notice(msg(), ErrorCause.TIMEOUT)
    assert notice.payload.cause == "timeout"


def test_notice_chain_depth_increments():
    m = msg(sender="origin", receiver="x")
    depths = []
    for _ in range(3):
        m = make_error_notice(m, ErrorCause.UNAVAILABLE)
        depths.append(m.headers["error_depth"])
    assert depths == [1, 2, 3]


def test_notice_references_previously_routed_message():
    reg = make_registry("alice")
    original = msg(receiver="ghost")
    reg.route(original)
    notice = reg.inbox("alice").pop()
    assert notice.payload.original_message_id in reg.routed_ids


# ---------------------------------------------------------------------------
# no message loss


def test_no_message_loss_accounting_random_sequences():
    rng = Random(7)
    for trial in range(30):
        endpoints = [f"e{i}" for i in range(rng.randint(1, 4))]
        reg = make_registry(*endpoints)
        topics = ["t0", "t1"]
        for e in endpoints:
            for t in topics:
                if rng.random() < 0.5:
                    reg.subscribe(e, t)
        routed = 0
        expected_in_queues = 0
        for _ in range(50):
            sender = rng.choice(endpoints + ["stranger"])
            if rng.random() < 0.6:
                receiver = rng.choice(endpoints + ["ghost1", "ghost2"])
                result = reg.route(msg(sender=sender, receiver=receiver))
                if result.status is DeliveryStatus.DELIVERED:
                    expected_in_queues += 1
                else:
                    # notice either queued at sender or dead-lettered
                    if reg.is_registered(sender):
                        expected_in_queues += 1
            else:
                topic = rng.choice(topics)
                result = reg.publish(msg(sender=sender, receiver=None, topic=topic))
                expected_in_queues += result.recipient_count
            routed += 1
        total_queued = sum(len(reg.inbox(e)) for e in endpoints)
        assert total_queued + len(reg.dead_letters) >= expected_in_queues
        assert total_queued == expected_in_queues


def test_concurrent_producers_one_consumer():
    import threading

    reg = make_registry("sink", *[f"p{i}" for i in range(6)])
    per_producer = 200

    def produce(i):
        for j in range(per_producer):
            reg.route(msg(sender=f"p{i}", receiver="sink", priority=j % 7,
                          id=f"{i:02d}-{j:04d}"))

    threads = [__import__("threading").Thread(target=produce, args=(i,)) for i in range(6)]
    for t in threads:
        t.start()
    consumed = []
    inbox = reg.inbox("sink")
    while len(consumed) < 6 * per_producer:
        m = inbox.pop(timeout=5.0)
        assert m is not None, "consumer starved"
        consumed.append(m.id)
    assert len(set(consumed)) == 6 * per_producer


# ---------------------------------------------------------------------------
# canonical encoding


def test_wire_dict_has_exactly_the_eleven_keys():
    d = to_wire_dict(msg())
    assert sorted(d) == sorted([
        "id", "session_id", "sender", "receiver", "caller", "payload",
        "category", "topic", "priority", "headers", "timestamp",
    ])
    assert set(d["payload"]) == {"kind", "data"}


def test_encode_decode_roundtrip_every_payload_kind():
    for category, payload in PAYLOAD_SAMPLES.items():
        original = msg(payload=payload, category=category, priority=4,
                       headers={"task_id": "t9"})
        decoded = decode_message(encode_message(original))
        assert to_wire_dict(decoded) == to_wire_dict(original)


def test_canonical_json_is_deterministic_and_compact():
    d = {"b": 1, "a": {"z": [1, 2], "y": None}}
    assert canonical_json(d) == '{"a":{"y":null,"z":[1,2]},"b":1}'


def test_decode_rejects_garbage():
    with pytest.raises(MessageValidationError):
        decode_message(b"\xff\xfenot json")


def test_from_wire_rejects_unknown_payload_kind():
    d = to_wire_dict(msg())
    d["payload"]["kind"] = "martian"
    with pytest.raises(MessageValidationError):
        from_wire_dict(d)
