"""Operator command line.

Subcommands: ``coordinator`` and ``worker`` run the two halves of the
cluster as standalone processes; ``submit`` drives rollout groups through a
running coordinator; ``scaling`` and ``bench`` run the evaluation
experiments on an embedded cluster; ``trace-replay`` inspects a trace file;
``batch`` turns saved rollout groups into a training batch file. All
randomness hangs off explicit ``--seed`` flags.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .agents import PolicyRef
from .client import TrainerClient
from .coordinator import Coordinator, CoordinatorConfig, rebuild_state
from .messages import TaskItem
from .policies import stable_seed
from .trace import scan_trace, verify_trace
from .training import RolloutGroup, emit_training_batch
from .worker import ChaosConfig, Worker


def load_tasks_file(path, default_seed: int = 0) -> list[TaskItem]:
    """JSON-lines tasks: {task_id, query, ground_truth, max_steps, priority}
    plus optional seed and meta; missing seeds derive from --seed."""
    tasks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        d = json.loads(line)
        if "seed" not in d:
            d["seed"] = stable_seed(default_seed, d["task_id"])
        tasks.append(TaskItem.from_dict(d))
    return tasks


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_coordinator(args) -> int:
    config = CoordinatorConfig(
        heartbeat_interval=args.heartbeat_interval,
        suspect_after=args.suspect_after,
        dead_after=args.dead_after,
    )
    coordinator = Coordinator(
        args.trace, host=args.host, port=args.listen, config=config,
        batch_log=args.batch_log,
    ).start()
    print(f"listening on {coordinator.port}", flush=True)
    try:
        while not coordinator.crashed and not coordinator.halted:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        coordinator.stop()
    return 0


def cmd_worker(args) -> int:
    host, port = _parse_address(args.connect)
    chaos = None
    if args.chaos_kill_prob > 0:
        chaos = ChaosConfig(kill_prob=args.chaos_kill_prob,
                            seed=args.chaos_seed,
                            silent_prob=args.chaos_silent_prob)
    corpus = None
    if args.corpus:
        from .tools import load_corpus

        corpus = load_corpus(args.corpus)
    worker = Worker(
        host, port, args.id,
        capacity=args.capacity,
        seed=args.seed,
        policy_ref=PolicyRef(args.policy),
        sandbox_root=args.sandbox,
        heartbeat_interval=args.heartbeat_interval,
        chaos=chaos,
        report_steps=args.report_steps,
        corpus=corpus,
    )
    ok = worker.run()
    if not ok:
        print(f"could not connect to {args.connect}", file=sys.stderr)
        return 1
    return 0


def cmd_submit(args) -> int:
    host, port = _parse_address(args.connect)
    tasks = load_tasks_file(args.tasks, default_seed=args.seed)
    client = TrainerClient(host, port)
    try:
        groups = client.request_rollouts(tasks, args.k, timeout=args.timeout)
        for task_id in sorted(groups):
            group = groups[task_id]
            print(f"{task_id}: rewards={group.rewards}")
        if args.out:
            client.write_batch(groups, args.out)
            print(f"batch written to {args.out}")
    finally:
        client.close()
    return 0


def cmd_scaling(args) -> int:
    from .evaluation import run_scaling_experiment

    result = run_scaling_experiment(
        args.questions, args.n,
        seed=args.seed, workers=args.workers, capacity=args.capacity,
        out_csv=args.out,
    )
    for k, value in result.curve:
        print(f"pass@{k} = {value:.4f}")
    if args.out:
        print(f"curve written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .evaluation import run_efficiency_bench

    result = run_efficiency_bench(
        args.rollouts, args.workers, args.latency,
        train_time=args.train_time, seed=args.seed, out_json=args.out,
    )
    d, s = result.distributed, result.sequential
    print(f"distributed: rollout {d.rollout_time:.2f}s + train {d.train_time:.2f}s "
          f"= {d.total_time:.2f}s ({d.workers} workers)")
    print(f"sequential:  rollout {s.rollout_time:.2f}s + train {s.train_time:.2f}s "
          f"= {s.total_time:.2f}s")
    print(f"speedup: {result.speedup:.1f}x")
    if args.out:
        print(f"report written to {args.out}")
    return 0


def cmd_trace_replay(args) -> int:
    scan = scan_trace(args.trace)
    by_kind: dict[str, int] = {}
    for ev in scan.events:
        by_kind[ev.kind.value] = by_kind.get(ev.kind.value, 0) + 1
    print(f"{len(scan.events)} events, last seq {scan.last_seq}")
    for kind in sorted(by_kind):
        print(f"  {kind}: {by_kind[kind]}")
    if scan.corrupt:
        print(f"corruption after byte {scan.valid_bytes}: {scan.corruption}")
    problems = verify_trace(scan.events)
    for p in problems:
        print(f"invariant violation: {p}")
    state = rebuild_state(scan.events)
    print(f"recovered: {len(state.done)} done, {len(state.ready)} ready "
          f"(of which {len(state.assigned_unfinished)} were in flight), "
          f"policy version {state.policy_version}")
    return 1 if (scan.corrupt or problems) else 0


def cmd_batch(args) -> int:
    groups = []
    for path in sorted(Path(args.groups).glob("*.json")):
        groups.append(RolloutGroup.from_dict(json.loads(path.read_text(encoding="utf-8"))))
    if not groups:
        print(f"no group files in {args.groups}", file=sys.stderr)
        return 1
    emit_training_batch(groups, args.out)
    print(f"{len(groups)} groups -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentmesh",
        description="Distributed agent rollout orchestration.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coordinator", help="run the scheduling coordinator")
    p.add_argument("--listen", type=int, default=0, help="TCP port (0 = ephemeral)")
    p.add_argument("--trace", required=True, help="append-only trace file path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--heartbeat-interval", type=float, default=1.0)
    p.add_argument("--suspect-after", type=float, default=3.0)
    p.add_argument("--dead-after", type=float, default=10.0)
    p.add_argument("--batch-log", default=None, help="append completed groups here")
    p.set_defaults(fn=cmd_coordinator)

    p = sub.add_parser("worker", help="run one worker process")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--id", required=True)
    p.add_argument("--capacity", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", default="seeded")
    p.add_argument("--sandbox", default=None)
    p.add_argument("--corpus", default=None, help="kv_search corpus JSON-lines file")
    p.add_argument("--heartbeat-interval", type=float, default=1.0)
    p.add_argument("--chaos-kill-prob", type=float, default=0.0)
    p.add_argument("--chaos-seed", type=int, default=0)
    p.add_argument("--chaos-silent-prob", type=float, default=0.3)
    p.add_argument("--report-steps", action="store_true")
    p.set_defaults(fn=cmd_worker)

    p = sub.add_parser("submit", help="submit rollout groups to a coordinator")
    p.add_argument("--connect", required=True, metavar="HOST:PORT")
    p.add_argument("--tasks", required=True, help="JSON-lines tasks file")
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--out", default=None, help="write the training batch here")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("scaling", help="pass@k versus rollout count")
    p.add_argument("--questions", type=int, required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--capacity", type=int, default=4)
    p.add_argument("--out", default=None, help="curve CSV path")
    p.set_defaults(fn=cmd_scaling)

    p = sub.add_parser("bench", help="distributed vs sequential rollout timing")
    p.add_argument("--rollouts", type=int, required=True)
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--latency", type=float, required=True)
    p.add_argument("--train-time", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report JSON path")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("trace-replay", help="inspect and verify a trace file")
    p.add_argument("--trace", required=True)
    p.set_defaults(fn=cmd_trace_replay)

    p = sub.add_parser("batch", help="build a training batch from saved groups")
    p.add_argument("--groups", required=True, help="directory of group JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_batch)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
