"""Single-agent execution loop and multi-agent composition.

One step of an agent is: assemble the prompt context from its instructions,
toolset, memory and the task query; ask the policy for an action; carry the
action as a message to the tool endpoint (or to itself for a final answer);
process the feedback into memory. The loop repeats until the agent answers
or its step budget runs out. Everything an agent does crosses the message
bus, so call chains (including agents wrapped as tools) stay observable via
the ``caller`` field.

Invalid actions do not kill a rollout: a tool call outside the agent's
toolset turns into an error notice observed by the agent, and the loop
continues.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import AgentMeshError
from .messages import (
    ActionKind,
    ActionModel,
    EndpointRegistry,
    ErrorCause,
    Message,
    Observation,
    TaskItem,
    canonical_json,
    make_error_notice,
    new_message,
)
from .tools import ToolContext, ToolRegistry, execute_tool


class AgentStatus(str, Enum):
    RUNNING = "running"
    ANSWERED = "answered"
    STEP_BUDGET_EXHAUSTED = "step_budget_exhausted"
    FAILED = "failed"


@dataclass(frozen=True)
class PolicyRef:
    """Identifier plus version of the decision source driving an agent."""

    name: str = "seeded"
    version: int = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "version": self.version}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyRef":
        return cls(name=d.get("name", "seeded"), version=int(d.get("version", 0)))


@dataclass(frozen=True)
class AgentSpec:
    name: str
    system_prompt: str = "Solve the task using the available tools."
    toolset: tuple[str, ...] = ()
    max_steps: int = 8
    policy_ref: PolicyRef = field(default_factory=PolicyRef)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        object.__setattr__(self, "toolset", tuple(self.toolset))

    def check_toolset(self, registry: ToolRegistry) -> None:
        missing = [t for t in self.toolset if not registry.has(t)]
        if missing:
            raise AgentMeshError(f"agent {self.name!r}: unknown tools {missing}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "system_prompt": self.system_prompt,
            "toolset": list(self.toolset),
            "max_steps": self.max_steps,
            "policy_ref": self.policy_ref.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        return cls(
            name=d["name"],
            system_prompt=d.get("system_prompt", "Solve the task using the available tools."),
            toolset=tuple(d.get("toolset") or ()),
            max_steps=int(d.get("max_steps", 8)),
            policy_ref=PolicyRef.from_dict(d.get("policy_ref") or {}),
        )


@dataclass
class MemoryRecord:
    context_hash: str
    action: ActionModel
    observation: Observation


@dataclass
class AgentState:
    session_id: str
    step_count: int = 0
    memory: list[MemoryRecord] = field(default_factory=list)
    status: AgentStatus = AgentStatus.RUNNING


# ---------------------------------------------------------------------------
# Prompt assembly

PROMPT_TEMPLATE = "[system]\n{system}\n[tools]\n{tools}\n[task]\n{query}\n"
HISTORY_HEADER = "[history]\n"
TEMPLATE_HASH = hashlib.sha256(
    (PROMPT_TEMPLATE + HISTORY_HEADER).encode("utf-8")
).hexdigest()[:16]


@dataclass(frozen=True)
class PromptContext:
    """Deterministic rendering of everything the policy may look at."""

    text: str
    template_hash: str
    task: TaskItem
    tool_names: tuple[str, ...]
    memory: tuple[MemoryRecord, ...]
    step_index: int

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def last_observation(self) -> Optional[Observation]:
        return self.memory[-1].observation if self.memory else None


def assemble_context(
    spec: AgentSpec,
    state: AgentState,
    task: TaskItem,
    tool_registry: Optional[ToolRegistry] = None,
) -> PromptContext:
    """Render the prompt. Identical inputs produce identical bytes.

    The history block is omitted entirely while memory is empty.
    """
    tool_lines = []
    for name in spec.toolset:
        if tool_registry is not None and tool_registry.has(name):
            tool_lines.append(f"- {name}: {tool_registry.spec(name).description}")
        else:
            tool_lines.append(f"- {name}")
    text = PROMPT_TEMPLATE.format(
        system=spec.system_prompt,
        tools="\n".join(tool_lines) if tool_lines else "(none)",
        query=task.query,
    )
    if state.memory:
        lines = [HISTORY_HEADER.rstrip("\n")]
        for i, record in enumerate(state.memory):
            lines.append(f"step {i} action: {canonical_json(record.action.to_dict())}")
            lines.append(f"step {i} result: {canonical_json(record.observation.to_dict())}")
        text += "\n".join(lines) + "\n"
    return PromptContext(
        text=text,
        template_hash=TEMPLATE_HASH,
        task=task,
        tool_names=spec.toolset,
        memory=tuple(state.memory),
        step_index=state.step_count,
    )


# ---------------------------------------------------------------------------
# Environment: tool execution with a per-rollout sandbox


class Environment:
    """Binds a tool registry to one rollout's sandbox, seed, and call depth."""

    def __init__(
        self,
        registry: ToolRegistry,
        sandbox,
        seed: int = 0,
        latency_scale: float = 1.0,
        apply_latency: bool = True,
        depth: int = 0,
    ):
        self.registry = registry
        self.sandbox = sandbox
        self.seed = seed
        self.latency_scale = latency_scale
        self.apply_latency = apply_latency
        self.depth = depth

    def child(self) -> "Environment":
        return Environment(
            self.registry,
            self.sandbox,
            seed=self.seed,
            latency_scale=self.latency_scale,
            apply_latency=self.apply_latency,
            depth=self.depth + 1,
        )

    def execute(self, action: ActionModel, step_index: int) -> Observation:
        ctx = ToolContext(
            sandbox=self.sandbox,
            seed=self.seed,
            depth=self.depth,
            caller=action.agent,
            latency_scale=self.latency_scale,
            apply_latency=self.apply_latency,
        )
        result = execute_tool(action, self.registry, ctx)
        return Observation(
            source=action.tool or "",
            content=result.content,
            is_error=result.is_error,
            step_index=step_index,
        )


# ---------------------------------------------------------------------------
# Trajectory: the durable record of one rollout


@dataclass
class TrajectoryStep:
    context_hash: str
    action: ActionModel
    observation: Observation

    def to_dict(self) -> dict:
        return {
            "context_hash": self.context_hash,
            "action": self.action.to_dict(),
            "observation": self.observation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(
            context_hash=d["context_hash"],
            action=ActionModel.from_dict(d["action"]),
            observation=Observation.from_dict(d["observation"]),
        )


@dataclass
class Trajectory:
    task_id: str
    rollout_index: int
    steps: list[TrajectoryStep]
    final_answer: Optional[str]
    status: AgentStatus
    reward: Optional[int] = None
    policy_version: int = 0
    elapsed: float = 0.0

    @property
    def key(self) -> tuple[str, int]:
        return (self.task_id, self.rollout_index)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "task_id": self.task_id,
            "rollout_index": self.rollout_index,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "status": self.status.value,
            "reward": self.reward,
            "policy_version": self.policy_version,
        }
        if include_timing:
            d["elapsed"] = self.elapsed
        return d

    def canonical_json(self) -> str:
        """Deterministic form: excludes wall-clock timing on purpose, so two
        runs with the same seeds serialize byte-identically."""
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            task_id=d["task_id"],
            rollout_index=int(d["rollout_index"]),
            steps=[TrajectoryStep.from_dict(s) for s in d["steps"]],
            final_answer=d.get("final_answer"),
            status=AgentStatus(d["status"]),
            reward=d.get("reward"),
            policy_version=int(d.get("policy_version", 0)),
            elapsed=float(d.get("elapsed", 0.0)),
        )


# ---------------------------------------------------------------------------
# Topologies


@dataclass(frozen=True)
class TopologyPlan:
    """Legal delegation targets per agent, rooted at an entry agent."""

    entry: str
    allowed: dict

    def allows(self, source: str, target: str) -> bool:
        return target in self.allowed.get(source, ())


def build_topology(specs: list[AgentSpec], edges: list[tuple[str, str]], entry: str) -> TopologyPlan:
    """Validate edges against declared agents and connectivity from entry.

    Cycles are legal; loops are bounded at runtime by each agent's step
    budget, not by the graph shape.
    """
    names = {s.name for s in specs}
    if entry not in names:
        raise AgentMeshError(f"entry agent {entry!r} not declared")
    allowed: dict[str, set[str]] = {name: set() for name in names}
    for source, target in edges:
        if source not in names or target not in names:
            raise AgentMeshError(f"edge ({source!r}, {target!r}) references undeclared agent")
        allowed[source].add(target)
    seen = {entry}
    frontier = [entry]
    while frontier:
        node = frontier.pop()
        for nxt in allowed[node]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    unreachable = names - seen
    if unreachable:
        raise AgentMeshError(f"agents unreachable from entry: {sorted(unreachable)}")
    return TopologyPlan(entry=entry, allowed={k: frozenset(v) for k, v in allowed.items()})


@dataclass
class AgentTeam:
    """Runtime bundle for delegation: specs, a plan, and policy factories."""

    plan: TopologyPlan
    specs: dict
    policy_factories: dict


# ---------------------------------------------------------------------------
# The loop


def step(
    spec: AgentSpec,
    state: AgentState,
    task: TaskItem,
    policy,
    bus: EndpointRegistry,
    env: Environment,
    *,
    session_id: str = "",
    caller: Optional[str] = None,
    team: Optional[AgentTeam] = None,
) -> tuple[AgentState, Message]:
    """Advance the agent by one action.

    The policy is consulted exactly once. Valid tool calls travel the bus to
    the tool endpoint and the feedback returns as an observation message.
    Invalid actions (unknown tool, tool outside the toolset, illegal
    delegation) become an error notice that the agent observes, and the
    agent keeps running.
    """
    ctx = assemble_context(spec, state, task, env.registry)
    action = policy.decide(ctx)
    agent = spec.name
    step_index = state.step_count
    headers = {
        "task_id": task.task_id,
        "rollout_index": task.rollout_index,
        "step": step_index,
        "template_hash": ctx.template_hash,
    }

    def _emit(payload, receiver, category=None, priority=0) -> Message:
        return new_message(
            agent,
            payload,
            category=category,
            receiver=receiver,
            session_id=session_id,
            caller=caller,
            priority=priority,
            headers=headers,
        )

    if action.kind == ActionKind.FINAL_ANSWER.value and action.answer is not None:
        msg = _emit(action, agent)
        bus.route(msg)
        bus.inbox(agent).pop()
        observation = Observation(source=agent, content=action.answer, step_index=step_index)
        state.memory.append(MemoryRecord(ctx.hash, action, observation))
        state.status = AgentStatus.ANSWERED
        state.step_count += 1
        return state, msg

    if (
        action.kind == ActionKind.TOOL_CALL.value
        and action.tool
        and action.tool in spec.toolset
        and env.registry.has(action.tool)
    ):
        msg = _emit(action, action.tool)
        bus.route(msg)
        delivered = bus.inbox(action.tool).pop()
        observation = env.execute(delivered.payload, step_index)
        reply = new_message(
            action.tool,
            observation,
            receiver=agent,
            session_id=session_id,
            caller=caller,
            headers=headers,
        )
        bus.route(reply)
        received = bus.inbox(agent).pop()
        state.memory.append(MemoryRecord(ctx.hash, action, received.payload))
        state.step_count += 1
        return state, msg

    if action.kind == ActionKind.DELEGATE.value and action.target_agent:
        target = action.target_agent
        if (
            team is not None
            and team.plan.allows(agent, target)
            and target in team.specs
        ):
            msg = _emit(action, target)
            sub_query = str(action.params.get("query", task.query))
            subtask = TaskItem(
                task_id=f"{task.task_id}.{target}",
                query=sub_query,
                rollout_index=task.rollout_index,
                max_steps=team.specs[target].max_steps,
                seed=task.seed,
                meta=dict(task.meta),
            )
            nested = run_task(
                team.specs[target],
                subtask,
                team.policy_factories[target](subtask),
                env.child(),
                bus=bus,
                session_id=session_id,
                caller=agent,
                team=team,
            )
            observation = Observation(
                source=target,
                content=nested.final_answer,
                is_error=nested.status is not AgentStatus.ANSWERED,
                step_index=step_index,
            )
            state.memory.append(MemoryRecord(ctx.hash, action, observation))
            state.step_count += 1
            return state, msg

    # Error-notification path: the attempted action is undeliverable.
    target_name = action.tool or action.target_agent or "unknown"
    attempted = _emit(action, target_name)
    if bus.is_registered(target_name):
        notice = make_error_notice(attempted, ErrorCause.VALIDATION_FAILURE)
        bus.route(notice)
    else:
        bus.route(attempted)  # synthesizes the notice for us
    received = bus.inbox(agent).pop()
    payload = received.payload
    observation = Observation(
        source="system",
        content=f"delivery failed: {payload.failed_receiver} ({payload.cause})",
        is_error=True,
        step_index=step_index,
    )
    state.memory.append(MemoryRecord(ctx.hash, action, observation))
    state.step_count += 1
    return state, attempted


def run_task(
    spec: AgentSpec,
    task: TaskItem,
    policy,
    env: Environment,
    *,
    bus: Optional[EndpointRegistry] = None,
    session_id: Optional[str] = None,
    caller: Optional[str] = None,
    team: Optional[AgentTeam] = None,
    policy_version: Optional[int] = None,
    on_step: Optional[Callable[[int, ActionModel, Observation], None]] = None,
) -> Trajectory:
    """Run the loop to a terminal trajectory. Never raises for policy or
    environment failures; those end the trajectory with status ``failed``
    and whatever steps were recorded."""
    spec.check_toolset(env.registry)
    bus = bus if bus is not None else EndpointRegistry()
    if not bus.is_registered(spec.name):
        bus.register(spec.name)
    for tool_name in spec.toolset:
        if not bus.is_registered(tool_name):
            bus.register(tool_name)
    session = session_id or f"{task.task_id}/{task.rollout_index}"
    state = AgentState(session_id=session)
    budget = min(spec.max_steps, task.max_steps) if task.max_steps else spec.max_steps
    started = time.monotonic()
    while state.status is AgentStatus.RUNNING and state.step_count < budget:
        try:
            state, _ = step(
                spec, state, task, policy, bus, env,
                session_id=session, caller=caller, team=team,
            )
            if on_step is not None and state.memory:
                record = state.memory[-1]
                on_step(state.step_count - 1, record.action, record.observation)
        except Exception:
            state.status = AgentStatus.FAILED
            break
    if state.status is AgentStatus.RUNNING:
        state.status = AgentStatus.STEP_BUDGET_EXHAUSTED
    final_answer = None
    if state.status is AgentStatus.ANSWERED and state.memory:
        final_answer = state.memory[-1].action.answer
    version = policy_version if policy_version is not None else getattr(policy, "version", 0)
    return Trajectory(
        task_id=task.task_id,
        rollout_index=task.rollout_index,
        steps=[TrajectoryStep(m.context_hash, m.action, m.observation) for m in state.memory],
        final_answer=final_answer,
        status=state.status,
        reward=None,
        policy_version=version,
        elapsed=time.monotonic() - started,
    )


def replay_actions(spec: AgentSpec, task: TaskItem, trajectory: Trajectory, env: Environment) -> Trajectory:
    """Re-run a recorded trajectory's actions through the environment.

    With deterministic tools the replay reproduces the original
    observations and answer; used to verify trace fidelity.
    """

    class _Recorded:
        version = trajectory.policy_version

        def __init__(self, actions):
            self._actions = list(actions)

        def decide(self, ctx) -> ActionModel:
            return self._actions.pop(0)

    return run_task(
        spec,
        task,
        _Recorded([s.action for s in trajectory.steps]),
        env,
        policy_version=trajectory.policy_version,
    )


# ---------------------------------------------------------------------------
# Agents behind the tool interface


def agent_as_tool(
    spec: AgentSpec,
    policy_factory: Callable[[TaskItem], object],
    env: Environment,
    *,
    recursion_limit: int = 3,
    bus: Optional[EndpointRegistry] = None,
):
    """Expose an agent as a (ToolSpec, tool_fn) pair.

    A call runs a nested task on the ``query`` param and returns the final
    answer. Nesting deeper than ``recursion_limit`` produces an error result
    instead of an unbounded chain; nested traffic keeps the calling agent in
    ``caller``.
    """
    from .tools import ToolSpec

    tool_spec = ToolSpec(
        name=spec.name,
        description=f"Delegate a sub-query to agent {spec.name}.",
        param_schema={"query": "str"},
    )

    def agent_tool(params: dict, ctx: ToolContext):
        if ctx.depth >= recursion_limit:
            raise RecursionError(
                f"agent-as-tool depth {ctx.depth} reached limit {recursion_limit}"
            )
        subtask = TaskItem(
            task_id=f"{spec.name}.sub",
            query=str(params["query"]),
            max_steps=spec.max_steps,
            seed=ctx.seed,
        )
        nested_env = Environment(
            env.registry, ctx.sandbox, seed=ctx.seed,
            latency_scale=env.latency_scale, apply_latency=env.apply_latency,
            depth=ctx.depth + 1,
        )
        result = run_task(
            spec, subtask, policy_factory(subtask), nested_env,
            bus=bus, caller=ctx.caller,
        )
        if result.status is not AgentStatus.ANSWERED:
            raise RuntimeError(f"nested agent ended with status {result.status.value}")
        return result.final_answer

    return tool_spec, agent_tool


# ---------------------------------------------------------------------------
# Declarative team configuration


def load_team_config(config, tool_registry: Optional[ToolRegistry] = None) -> tuple[dict, TopologyPlan]:
    """Parse a team document into specs and a topology plan.

    Accepts a dict or a JSON file path with keys: agents[] (each with name,
    system_prompt, toolset, max_steps, policy_ref), edges[], entry, and
    optional top-level defaults (tools, max_steps, policy_ref) applied to
    agents that omit them. When a tool registry is given, every toolset is
    validated against it up front.
    """
    if not isinstance(config, dict):
        import json

        with open(config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    default_tools = tuple(config.get("tools") or ())
    default_max_steps = int(config.get("max_steps", 8))
    default_policy = PolicyRef.from_dict(config.get("policy_ref") or {})
    specs = {}
    for entry_dict in config["agents"]:
        d = dict(entry_dict)
        d.setdefault("toolset", list(default_tools))
        d.setdefault("max_steps", default_max_steps)
        d.setdefault("policy_ref", default_policy.to_dict())
        spec = AgentSpec.from_dict(d)
        if tool_registry is not None:
            spec.check_toolset(tool_registry)
        specs[spec.name] = spec
    edges = [tuple(e) for e in config.get("edges", [])]
    entry = config.get("entry") or next(iter(specs))
    plan = build_topology(list(specs.values()), edges, entry)
    return specs, plan
