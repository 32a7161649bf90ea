"""agentmesh: distributed agent rollout orchestration.

A message-passing runtime, a tool-calling agent loop over deterministic
simulated tools, a fault-tolerant coordinator/worker executor with an
append-only recovery trace, training-batch orchestration with
group-normalized advantages, and a pass@k / speedup evaluation harness.
"""

from .agents import (
    AgentSpec,
    AgentStatus,
    Environment,
    PolicyRef,
    PromptContext,
    Trajectory,
    TrajectoryStep,
    agent_as_tool,
    assemble_context,
    build_topology,
    run_task,
)
from .coordinator import (
    Coordinator,
    CoordinatorConfig,
    CoordinatorExecutor,
    WorkerStatus,
    rebuild_state,
)
from .errors import (
    AgentMeshError,
    CoordinatorHaltedError,
    DuplicateTaskError,
    IncompleteGroupError,
    MessageValidationError,
)
from .evaluation import (
    BenchReport,
    BenchResult,
    PassKRecord,
    ephemeral_cluster,
    pass_at_k,
    pass_at_k_single,
    run_efficiency_bench,
    run_scaling_experiment,
)
from .execution import LocalSequentialExecutor, execute_rollout
from .messages import (
    ActionKind,
    ActionModel,
    Control,
    DeliveryResult,
    DeliveryStatus,
    EndpointRegistry,
    ErrorCause,
    ErrorNotice,
    Message,
    Observation,
    TaskItem,
    canonical_json,
    make_error_notice,
    new_message,
    validate,
)
from .policies import (
    PolicyServer,
    RemoteEndpointPolicy,
    ScriptedPolicy,
    SeededStochasticPolicy,
    stable_seed,
)
from .tools import ToolRegistry, ToolResult, ToolSpec, builtin_registry
from .trace import TraceEvent, TraceKind, TraceStore, scan_trace, verify_trace
from .training import (
    PolicyState,
    PolicyVersion,
    RolloutGroup,
    compute_reward,
    emit_training_batch,
    grpo_advantages,
    make_rollout_items,
    normalize_answer,
    run_rollout_group,
)
from .worker import ChaosConfig, Worker, WorkerPool

__version__ = "0.1.0"
