"""Policies: determinism, stochastic success control, remote decisions."""

import pytest

from agentmesh.agents import AgentSpec, Environment, run_task
from agentmesh.messages import ActionModel, TaskItem
from agentmesh.policies import (
    PolicyServer,
    RemoteEndpointPolicy,
    ScriptedPolicy,
    SeededStochasticPolicy,
    SleeperPolicy,
    build_policy,
    extract_expression,
    stable_seed,
)
from agentmesh.agents import PolicyRef
from agentmesh.tools import builtin_registry


def make_env(tmp_path, seed=0):
    return Environment(builtin_registry(), tmp_path, seed=seed)


def make_task(query="Compute: 6*7", seed=5, p=None):
    meta = {} if p is None else {"success_prob": p}
    return TaskItem(task_id="t", query=query, ground_truth="42", max_steps=4,
                    seed=seed, meta=meta)


SPEC = AgentSpec(name="agent", toolset=("calculator", "kv_search", "sleepy_noop"),
                 max_steps=6)


def test_stable_seed_is_stable_and_order_sensitive():
    assert stable_seed("a", 1) == stable_seed("a", 1)
    assert stable_seed("a", 1) != stable_seed(1, "a")
    assert 0 <= stable_seed("x") < 2**63


def test_extract_expression():
    assert extract_expression("Compute: (2+3)*4") == "(2+3)*4"
    assert extract_expression("please evaluate 1+1") == "1+1"
    assert extract_expression("what is the capital of France") is None


def test_seeded_policy_success_prob_one_solves(tmp_path):
    task = make_task(p=1.0)
    traj = run_task(SPEC, task, SeededStochasticPolicy(task.seed, default_success_prob=1.0),
                    make_env(tmp_path, task.seed))
    assert traj.final_answer == "42"
    assert traj.steps[0].action.tool == "calculator"


def test_seeded_policy_success_prob_zero_never_correct(tmp_path):
    for seed in range(10):
        task = make_task(seed=seed, p=0.0)
        traj = run_task(SPEC, task, SeededStochasticPolicy(task.seed),
                        make_env(tmp_path / str(seed), task.seed))
        assert traj.final_answer != "42"


def test_seeded_policy_meta_overrides_default(tmp_path):
    task = make_task(p=1.0)
    policy = SeededStochasticPolicy(task.seed, default_success_prob=0.0)
    traj = run_task(SPEC, task, policy, make_env(tmp_path, task.seed))
    assert traj.final_answer == "42"  # meta success_prob wins


def test_seeded_policy_empirical_rate(tmp_path):
    hits = 0
    trials = 200
    for i in range(trials):
        task = TaskItem(task_id=f"t{i}", query="Compute: 6*7", ground_truth="42",
                        max_steps=4, seed=stable_seed("rate", i),
                        meta={"success_prob": 0.3})
        traj = run_task(SPEC, task, SeededStochasticPolicy(task.seed),
                        make_env(tmp_path / str(i), task.seed))
        hits += traj.final_answer == "42"
    assert 0.2 < hits / trials < 0.4


def test_seeded_policy_deterministic_per_seed_and_version(tmp_path):
    task = make_task(p=0.5)
    answers = set()
    for run in range(3):
        traj = run_task(SPEC, task, SeededStochasticPolicy(task.seed, version=0),
                        make_env(tmp_path / f"r{run}", task.seed))
        answers.add(traj.final_answer)
    assert len(answers) == 1


def test_seeded_policy_no_expression_answers_unknown(tmp_path):
    task = TaskItem(task_id="t", query="name a color", max_steps=4, seed=1)
    traj = run_task(SPEC, task, SeededStochasticPolicy(task.seed),
                    make_env(tmp_path, 1))
    assert traj.final_answer == "unknown"


def test_sleeper_policy_calls_sleepy_then_answers(tmp_path):
    task = TaskItem(task_id="t", query="wait", ground_truth="ok", max_steps=3,
                    seed=0, meta={"latency": 0.0})
    traj = run_task(SPEC, task, SleeperPolicy(), make_env(tmp_path))
    assert traj.steps[0].action.tool == "sleepy_noop"
    assert traj.final_answer == "ok"


def test_build_policy_names():
    task = make_task()
    assert isinstance(build_policy(PolicyRef("seeded"), task), SeededStochasticPolicy)
    assert isinstance(build_policy(PolicyRef("seeded:0.7"), task), SeededStochasticPolicy)
    assert isinstance(build_policy(PolicyRef("arith"), task), SeededStochasticPolicy)
    assert isinstance(build_policy(PolicyRef("sleeper"), task), SleeperPolicy)
    with pytest.raises(ValueError):
        build_policy(PolicyRef("martian"), task)


def test_build_policy_version_override():
    task = make_task()
    policy = build_policy(PolicyRef("seeded", version=0), task, version=7)
    assert policy.version == 7


def test_scripted_policy_cycle_and_exhaustion():
    a = ActionModel(agent="x", kind="final_answer", answer="1")
    policy = ScriptedPolicy([a])
    assert policy.decide(None) is a
    with pytest.raises(IndexError):
        policy.decide(None)
    cycling = ScriptedPolicy([a], cycle=True)
    for _ in range(5):
        assert cycling.decide(None) is a


# ---------------------------------------------------------------------------
# remote decisions


def test_remote_policy_through_server(tmp_path):
    server = PolicyServer(
        lambda task, version: SeededStochasticPolicy(task.seed, version=version,
                                                     default_success_prob=1.0),
    ).start()
    try:
        task = make_task(p=1.0)
        policy = RemoteEndpointPolicy(server.host, server.port)
        traj = run_task(SPEC, task, policy, make_env(tmp_path, task.seed))
        policy.close()
        assert traj.final_answer == "42"
    finally:
        server.stop()


def test_remote_policy_matches_local(tmp_path):
    server = PolicyServer(
        lambda task, version: SeededStochasticPolicy(task.seed, version=version),
    ).start()
    try:
        task = make_task(p=0.5, seed=123)
        local = run_task(SPEC, task, SeededStochasticPolicy(task.seed),
                         make_env(tmp_path / "local", task.seed))
        remote_policy = RemoteEndpointPolicy(server.host, server.port)
        remote = run_task(SPEC, task, remote_policy,
                          make_env(tmp_path / "remote", task.seed))
        remote_policy.close()
        assert remote.final_answer == local.final_answer
        assert remote.canonical_json() == local.canonical_json()
    finally:
        server.stop()


def test_build_policy_remote(tmp_path):
    server = PolicyServer(
        lambda task, version: SeededStochasticPolicy(task.seed, version=version,
                                                     default_success_prob=1.0),
    ).start()
    try:
        task = make_task(p=1.0)
        policy = build_policy(PolicyRef(f"remote:{server.host}:{server.port}"), task)
        traj = run_task(SPEC, task, policy, make_env(tmp_path, task.seed))
        policy.close()
        assert traj.final_answer == "42"
    finally:
        server.stop()
