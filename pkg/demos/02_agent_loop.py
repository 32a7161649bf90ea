"""Walkthrough: the tool-calling agent loop.

An agent step is: render the prompt context, ask the policy for an action,
carry it over the bus to the tool, fold the feedback into memory. The loop
ends with a final answer or when the step budget runs out. A second agent
can be mounted behind the tool interface and called like any other tool.

Run: python3 demos/02_agent_loop.py
"""

import tempfile
from pathlib import Path

from agentmesh import (
    AgentSpec,
    Environment,
    TaskItem,
    agent_as_tool,
    assemble_context,
    builtin_registry,
    run_task,
)
from agentmesh.agents import AgentState
from agentmesh.policies import ScriptedPolicy, SeededStochasticPolicy
from agentmesh.messages import ActionModel

sandbox = Path(tempfile.mkdtemp(prefix="demo-agent-"))
registry = builtin_registry()
env = Environment(registry, sandbox, seed=7)

solver = AgentSpec(
    name="solver",
    system_prompt="Use the calculator; answer with the bare number.",
    toolset=("calculator", "kv_search"),
    max_steps=6,
)
task = TaskItem(task_id="demo", query="Compute: (2+3)*4", ground_truth="20",
                max_steps=6, seed=7)

# --- 1. what the policy sees -------------------------------------------------
print("== prompt context (deterministic bytes) ==")
print(assemble_context(solver, AgentState("demo"), task, registry).text)

# --- 2. a scripted run -------------------------------------------------------
policy = ScriptedPolicy([
    ActionModel(agent="solver", kind="tool_call", tool="calculator",
                params={"expr": "(2+3)*4"}),
    lambda ctx: ActionModel(agent="solver", kind="final_answer",
                            answer=str(ctx.last_observation().content)),
])
trajectory = run_task(solver, task, policy, env)
print("== scripted run ==")
for s in trajectory.steps:
    print(f"  step: {s.action.kind:<13} -> {s.observation.content!r}")
print(f"status={trajectory.status.value} answer={trajectory.final_answer!r}")

# --- 3. an invalid action does not kill the rollout --------------------------
clumsy = ScriptedPolicy([
    ActionModel(agent="solver", kind="tool_call", tool="web_browser", params={}),
    ActionModel(agent="solver", kind="final_answer", answer="recovered"),
])
trajectory = run_task(solver, task, clumsy, env)
print("\n== invalid tool call ==")
print(f"first observation: error={trajectory.steps[0].observation.is_error} "
      f"({trajectory.steps[0].observation.content})")
print(f"loop continued to: {trajectory.final_answer!r}")

# --- 4. seeded stochastic policy: the simulated learner ----------------------
print("\n== seeded stochastic policy, success probability 0.5 ==")
for i in range(6):
    t = TaskItem(task_id=f"s{i}", query="Compute: 6*7", ground_truth="42",
                 max_steps=4, seed=1000 + i, meta={"success_prob": 0.5})
    traj = run_task(solver, t, SeededStochasticPolicy(t.seed),
                    Environment(registry, sandbox, seed=t.seed))
    verdict = "correct " if traj.final_answer == "42" else "wrong   "
    print(f"  rollout seed {t.seed}: {verdict}({traj.final_answer}) "
          "(deterministic per seed)")

# --- 5. an agent as a tool ----------------------------------------------------
print("\n== agent as tool ==")
inner = AgentSpec(name="arithmetic_expert", toolset=("calculator",), max_steps=4)
tool_spec, tool_fn = agent_as_tool(
    inner, lambda sub: SeededStochasticPolicy(sub.seed, default_success_prob=1.0), env)
registry.register(tool_spec, tool_fn)

outer = AgentSpec(name="orchestrator", toolset=("arithmetic_expert",), max_steps=4)
outer_policy = ScriptedPolicy([
    ActionModel(agent="orchestrator", kind="tool_call", tool="arithmetic_expert",
                params={"query": "Compute: 13*11"}),
    lambda ctx: ActionModel(agent="orchestrator", kind="final_answer",
                            answer=str(ctx.last_observation().content)),
])
trajectory = run_task(outer, TaskItem(task_id="outer", query="delegate it",
                                      max_steps=4, seed=3), outer_policy, env)
print(f"orchestrator asked arithmetic_expert and answered: {trajectory.final_answer!r}")
