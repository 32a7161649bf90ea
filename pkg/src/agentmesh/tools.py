"""Deterministic sandboxed tools that give trajectories multi-step structure.

Real integrations (browsers, audio pipelines, remote code sandboxes) are
replaced by simulants whose outputs are fully determined by (tool, params,
seed), so a rollout can be re-run bit-for-bit after a worker loss and a
recorded trajectory can be replayed through the environment. Latency is
modeled, not incidental: a tool either takes a fixed number of seconds or
samples a seeded log-normal, which is what lets the speedup benchmark stand
in for long-running environments.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from random import Random
from typing import Any, Callable, Optional

from .messages import ActionModel

_SCHEMA_TYPES = {
    "str": str,
    "int": int,
    "float": (int, float),
    "bool": bool,
    "list": list,
    "dict": dict,
    "any": object,
}


@dataclass(frozen=True)
class LatencyModel:
    """Fixed seconds, or a seeded log-normal when sigma > 0."""

    seconds: float = 0.0
    sigma: float = 0.0

    def sample(self, rng: Random) -> float:
        if self.seconds <= 0:
            return 0.0
        if self.sigma <= 0:
            return self.seconds
        # median pinned at `seconds`
        return rng.lognormvariate(math.log(self.seconds), self.sigma)


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    param_schema: dict[str, str] = field(default_factory=dict)
    deterministic: bool = True
    latency: LatencyModel = field(default_factory=LatencyModel)


@dataclass(frozen=True)
class ToolResult:
    content: Any
    is_error: bool = False
    elapsed: float = 0.0


@dataclass
class ToolContext:
    """Per-execution environment handed to a tool function.

    One sandbox directory per (task, rollout) keeps file operations of
    concurrent rollouts isolated from each other. ``depth`` tracks nesting
    for agents exposed behind the tool interface.
    """

    sandbox: Path
    seed: int = 0
    depth: int = 0
    caller: Optional[str] = None
    latency_scale: float = 1.0
    apply_latency: bool = True

    def rng(self, salt: str = "") -> Random:
        return Random(f"{self.seed}:{salt}")


ToolFn = Callable[[dict, ToolContext], Any]


class ToolRegistry:
    """Named tool functions plus their specs."""

    def __init__(self):
        self._specs: dict[str, ToolSpec] = {}
        self._fns: dict[str, ToolFn] = {}

    def register(self, spec: ToolSpec, fn: ToolFn) -> None:
        if spec.name in self._specs:
            raise ValueError(f"tool {spec.name!r} already registered")
        self._specs[spec.name] = spec
        self._fns[spec.name] = fn

    def names(self) -> list[str]:
        return sorted(self._specs)

    def has(self, name: str) -> bool:
        return name in self._specs

    def spec(self, name: str) -> ToolSpec:
        return self._specs[name]

    def fn(self, name: str) -> ToolFn:
        return self._fns[name]

    def describe(self) -> list[tuple[str, str]]:
        return [(n, self._specs[n].description) for n in self.names()]


def _check_schema(schema: dict[str, str], params: dict) -> Optional[str]:
    for key, type_name in schema.items():
        optional = type_name.endswith("?")
        base = type_name[:-1] if optional else type_name
        if key not in params:
            if optional:
                continue
            return f"missing required param {key!r}"
        expected = _SCHEMA_TYPES.get(base, object)
        value = params[key]
        if expected is not object and not isinstance(value, expected):
            return f"param {key!r} expects {base}, got {type(value).__name__}"
        if base in ("int", "float") and isinstance(value, bool):
            return f"param {key!r} expects {base}, got bool"
    for key in params:
        if key not in schema:
            return f"unexpected param {key!r}"
    return None


def execute_tool(call: ActionModel, registry: ToolRegistry, ctx: ToolContext) -> ToolResult:
    """Run one tool call; malformed calls come back as error results.

    Schema violations, unknown tools, and exceptions inside the tool all
    yield ``is_error=True`` with a diagnostic instead of propagating -- a bad
    action must never take the rollout down with it.
    """
    started = time.monotonic()
    name = call.tool or ""
    if not registry.has(name):
        return ToolResult(f"unknown tool {name!r}", is_error=True,
                          elapsed=time.monotonic() - started)
    spec = registry.spec(name)
    problem = _check_schema(spec.param_schema, call.params)
    if problem is not None:
        return ToolResult(f"invalid call to {name}: {problem}", is_error=True,
                          elapsed=time.monotonic() - started)
    delay = spec.latency.sample(ctx.rng("latency")) * ctx.latency_scale
    if delay > 0 and ctx.apply_latency:
        time.sleep(delay)
    try:
        content = registry.fn(name)(call.params, ctx)
    except Exception as exc:  # error totality: diagnose, never crash
        return ToolResult(f"{type(exc).__name__}: {exc}", is_error=True,
                          elapsed=time.monotonic() - started)
    return ToolResult(content, is_error=False, elapsed=time.monotonic() - started)


# ---------------------------------------------------------------------------
# calculator: +, -, *, / with parentheses over ints and decimals


class _ExprParser:
    """Recursive-descent arithmetic parser over exact rationals."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def parse(self) -> Fraction:
        value = self._expr()
        self._skip_ws()
        if self.pos != len(self.text):
            raise ValueError(f"unexpected character at {self.pos}: {self.text[self.pos]!r}")
        return value

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _expr(self) -> Fraction:
        value = self._term()
        while True:
            op = self._peek()
            if op == "+":
                self.pos += 1
                value = value + self._term()
            elif op == "-":
                self.pos += 1
                value = value - self._term()
            else:
                return value

    def _term(self) -> Fraction:
        value = self._factor()
        while True:
            op = self._peek()
            if op == "*":
                self.pos += 1
                value = value * self._factor()
            elif op == "/":
                self.pos += 1
                divisor = self._factor()
                if divisor == 0:
                    raise ZeroDivisionError("division by zero")
                value = value / divisor
            else:
                return value

    def _factor(self) -> Fraction:
        ch = self._peek()
        if ch == "(":
            self.pos += 1
            value = self._expr()
            if self._peek() != ")":
                raise ValueError("unbalanced parenthesis")
            self.pos += 1
            return value
        if ch == "-":
            self.pos += 1
            return -self._factor()
        if ch == "+":
            self.pos += 1
            return self._factor()
        return self._number()

    def _number(self) -> Fraction:
        self._skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isdigit() or self.text[self.pos] == "."):
            self.pos += 1
        token = self.text[start:self.pos]
        if not token:
            raise ValueError(f"expected a number at position {start}")
        return Fraction(token)


def format_number(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return repr(float(value))


def evaluate_expression(expr: str) -> str:
    return format_number(_ExprParser(expr).parse())


def _calculator(params: dict, ctx: ToolContext) -> str:
    return evaluate_expression(params["expr"])


# ---------------------------------------------------------------------------
# kv_search: ranked snippet lookup over a small keyed corpus

DEFAULT_CORPUS = [
    {"key_terms": ["orchestration", "rollout"], "snippet": "Rollout orchestration distributes agent attempts across workers.", "rank_score": 3.0},
    {"key_terms": ["heartbeat", "worker"], "snippet": "Workers prove liveness with periodic heartbeats.", "rank_score": 2.5},
    {"key_terms": ["priority", "queue"], "snippet": "Higher priority tasks are scheduled first.", "rank_score": 2.0},
    {"key_terms": ["trace", "recovery"], "snippet": "An append-only trace makes coordinator state recoverable.", "rank_score": 2.0},
    {"key_terms": ["reward", "advantage"], "snippet": "Group-normalized advantages compare rollouts of the same task.", "rank_score": 1.5},
]


def load_corpus(path: str | Path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def make_kv_search(corpus: Optional[list[dict]] = None) -> ToolFn:
    corpus = DEFAULT_CORPUS if corpus is None else corpus

    def kv_search(params: dict, ctx: ToolContext) -> list[dict]:
        terms = [t for t in params["q"].lower().split() if t]
        top_n = int(params.get("top_n", 3))
        hits = []
        for entry in corpus:
            keys = {k.lower() for k in entry["key_terms"]}
            overlap = sum(1 for t in terms if t in keys)
            if overlap:
                hits.append({"snippet": entry["snippet"],
                             "score": overlap * float(entry["rank_score"])})
        hits.sort(key=lambda h: (-h["score"], h["snippet"]))
        return hits[:top_n]  # a miss is an empty list, not an error

    return kv_search


# ---------------------------------------------------------------------------
# file_read / file_write: jailed to the per-task sandbox directory


def _resolve_jailed(sandbox: Path, user_path: str) -> Path:
    root = sandbox.resolve()
    candidate = (root / user_path).resolve()
    if candidate != root and root not in candidate.parents:
        raise PermissionError(f"path {user_path!r} escapes the sandbox")
    return candidate


def _file_read(params: dict, ctx: ToolContext) -> str:
    target = _resolve_jailed(ctx.sandbox, params["path"])
    return target.read_text(encoding="utf-8")


def _file_write(params: dict, ctx: ToolContext) -> str:
    target = _resolve_jailed(ctx.sandbox, params["path"])
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(params["content"], encoding="utf-8")
    return f"wrote {len(params['content'])} bytes"


# ---------------------------------------------------------------------------
# sleepy_noop: pure latency, for benchmarking long-running environments


def _sleepy_noop(params: dict, ctx: ToolContext) -> str:
    seconds = float(params.get("seconds", 0.0)) * ctx.latency_scale
    if seconds > 0 and ctx.apply_latency:
        time.sleep(seconds)
    return "ok"


def builtin_registry(corpus: Optional[list[dict]] = None) -> ToolRegistry:
    """The standard simulated toolset."""
    reg = ToolRegistry()
    reg.register(
        ToolSpec("calculator", "Evaluate an arithmetic expression (+, -, *, /, parentheses).",
                 {"expr": "str"}),
        _calculator,
    )
    reg.register(
        ToolSpec("kv_search", "Search a keyed corpus; returns ranked snippets.",
                 {"q": "str", "top_n": "int?"}),
        make_kv_search(corpus),
    )
    reg.register(
        ToolSpec("file_read", "Read a file inside the task sandbox.",
                 {"path": "str"}),
        _file_read,
    )
    reg.register(
        ToolSpec("file_write", "Write a file inside the task sandbox.",
                 {"path": "str", "content": "str"}),
        _file_write,
    )
    reg.register(
        ToolSpec("sleepy_noop", "Do nothing for a configurable duration.",
                 {"seconds": "float?"}, deterministic=True),
        _sleepy_noop,
    )
    return reg
