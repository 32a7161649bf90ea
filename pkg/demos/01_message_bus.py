"""Walkthrough: the message envelope and the routing bus.

Everything in this system travels as a Message: point-to-point with a
receiver, or pub-sub with a topic. Delivery failures never raise and never
lose data -- the bus synthesizes an error notice back to the sender, and if
the sender is gone too, the notice lands in the dead-letter list.

Run: python3 demos/01_message_bus.py
"""

from agentmesh import Control, EndpointRegistry, Observation, new_message
from agentmesh.messages import encode_message

bus = EndpointRegistry()
for name in ("planner", "calculator", "dashboard"):
    bus.register(name)

# --- 1. point-to-point delivery, priority ordered -------------------------
print("== point-to-point ==")
low = new_message("planner", Control(kind="background-job"), receiver="calculator",
                  priority=0)
urgent = new_message("planner", Control(kind="hotfix"), receiver="calculator",
                     priority=9)
bus.route(low)
bus.route(urgent)
first = bus.inbox("calculator").pop()
print(f"dequeued first: {first.payload.kind!r} (priority {first.priority})")
assert first.payload.kind == "hotfix"
bus.inbox("calculator").drain()

# --- 2. the canonical wire form --------------------------------------------
print("\n== canonical encoding (same bytes used on the cluster sockets) ==")
observation = new_message("calculator", Observation(source="calculator", content="42"),
                          receiver="planner", session_id="demo-session")
print(encode_message(observation).decode()[:120] + "...")

# --- 3. pub-sub -------------------------------------------------------------
print("\n== pub-sub ==")
bus.subscribe("dashboard", "metrics")
bus.subscribe("dashboard", "metrics")  # idempotent: still a single copy
result = bus.publish(new_message("planner", Control(kind="tick"), topic="metrics"))
print(f"published to {result.recipient_count} subscriber(s); "
      f"dashboard inbox holds {len(bus.inbox('dashboard'))}")

empty = bus.publish(new_message("planner", Control(kind="tick"), topic="nobody-listens"))
print(f"zero subscribers is still a delivery: status={empty.status.value}, "
      f"count={empty.recipient_count}")

# --- 4. automatic error notification ----------------------------------------
print("\n== error notification ==")
attempt = new_message("planner", Control(kind="ping"), receiver="browser")
result = bus.route(attempt)   # 'browser' was never registered
notice = bus.inbox("planner").pop()
print(f"route status: {result.status.value}")
print(f"planner got an error notice: failed_receiver={notice.payload.failed_receiver!r} "
      f"cause={notice.payload.cause!r} priority={notice.priority}")

# --- 5. dead letters: the sender is gone too --------------------------------
orphan = new_message("stranger", Control(kind="ping"), receiver="browser")
bus.route(orphan)
reason, letter = bus.dead_letters[-1]
print(f"\nundeliverable notice dead-lettered ({reason}); "
      f"original id preserved: {letter.payload.original_message_id == orphan.id}")
