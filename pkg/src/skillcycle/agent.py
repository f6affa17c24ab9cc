"""Meta-controller: decision context, reasoning trace, next tool call.

Every decision carries a five-field reasoning trace (scene
interpretation, current objective, success criteria, assessment, next
action). The reference backend is a scripted planner — a pure function
of (memory, observation) given its fixed scenario/plan configuration —
so identical inputs always produce identical decisions.

Scripted planner rule table (first match wins):

Task-executor mode, for the first non-terminal subtask ``s``:

    D1  no such s (all Done)                          -> Finish
    D2  s Pending                                     -> InvokePolicy(forward)
    D3  s Active,  goal predicate holds               -> MarkDone
    D4  s Active,  goal not yet reached               -> Retry / Escalate
        (defensive; attempts permitting Retry, else Escalate)
    D5  s Failed,  attempts_made >= max_attempts      -> Escalate
    D6  s Failed,  forward precondition holds         -> Retry
    D7  s Failed,  last execution was a failed
        restore attempt (recovery already tried)      -> Escalate
    D8  s Failed,  scene degraded, restorer known     -> Recover
    D9  s Failed,  otherwise                          -> Escalate

Data-collector mode, for the collected subtask ``s``:

    C1  forward precondition holds                    -> InvokePolicy(forward)
    C2  last execution was a failed inverse           -> Escalate (reset)
    C3  goal predicate holds                          -> InvokePolicy(inverse)
    C4  otherwise (scene degraded)                    -> Escalate (reset)

``attempts_made`` is the retry count recorded in task memory plus one
(the initial attempt); Retry and Recover are never emitted once it
reaches the per-subtask attempt budget.
"""

from __future__ import annotations

import hashlib
import json
import urllib.request
from dataclasses import dataclass

from .canon import canonical_dumps
from .errors import BackendError, DomainError, NotFound, ToolNotAllowed
from .events import KIND_TOOL_CALL, EventLog
from .memory import MODE_DATA_COLLECTOR, MemoryState, STATUS_ACTIVE, STATUS_DONE, STATUS_ESCALATED, STATUS_FAILED, STATUS_PENDING
from .records import Instruction
from .simenv import (
    DEGRADING,
    FORWARD,
    INVERSE,
    NONDEGRADING,
    EnvSummary,
    Scenario,
    SubtaskSpec,
    in_precondition,
    predicate_holds,
)
from .toolbus import METHOD_CALL, ToolRegistry, ToolRequest, decode_message, encode_message

ACTION_INVOKE = "InvokePolicy"
ACTION_RETRY = "Retry"
ACTION_RECOVER = "Recover"
ACTION_ESCALATE = "Escalate"
ACTION_MARK_DONE = "MarkDone"
ACTION_FINISH = "Finish"


@dataclass
class Observation:
    """What the agent sees each cycle: scene summary plus robot scalars."""

    env_summary: EnvSummary
    robot_stats: dict[str, float]
    timestamp: int


@dataclass
class CoTTrace:
    scene_interpretation: str
    current_objective: str
    success_criteria: str
    assessment: str
    next_action: str

    def to_dict(self) -> dict:
        return {
            "scene_interpretation": self.scene_interpretation,
            "current_objective": self.current_objective,
            "success_criteria": self.success_criteria,
            "assessment": self.assessment,
            "next_action": self.next_action,
        }

    def complete(self) -> bool:
        return all(self.to_dict().values())


@dataclass
class Decision:
    action: str
    chosen_subtask: str | None
    trace: CoTTrace
    policy_id: str | None = None
    instruction: Instruction | None = None
    reason: str | None = None

    def to_payload(self) -> dict:
        return {
            "action": self.action,
            "subtask": self.chosen_subtask,
            "policy_id": self.policy_id,
            "reason": self.reason,
            "trace": self.trace.to_dict(),
        }


def build_instruction(scenario: Scenario, subtask_id: str, direction: str) -> Instruction:
    """Deterministic instruction from the scenario phrase for the
    subtask: the forward phrase for forward skills, the inverse phrase
    for inverse and recovery skills."""
    if subtask_id not in scenario.subtasks:
        raise NotFound(f"unknown subtask: {subtask_id}")
    sub = scenario.subtasks[subtask_id]
    text = sub.forward_text if direction == FORWARD else sub.inverse_text
    return Instruction(text=text, subtask_id=subtask_id, direction=direction)


def evaluate_subtask(summary: EnvSummary, subtask: SubtaskSpec) -> str:
    """Success iff the subtask's goal predicate holds on the summary."""
    return "Success" if predicate_holds(subtask.goal_predicate, summary.structured) else "Failure"


def classify_failure(state_before, state_after, subtask: SubtaskSpec, direction: str = FORWARD) -> str:
    """Non-degrading iff the after-state still admits an immediate retry
    (it remains inside the policy's precondition region)."""
    del state_before  # classification depends only on where the failure left us
    return NONDEGRADING if in_precondition(state_after, subtask, direction) else DEGRADING


class DecisionBackend:
    """Interface: decide(memory, observation) -> Decision."""

    def decide(self, memory: MemoryState, obs: Observation) -> Decision:
        raise NotImplementedError


def decide(memory: MemoryState, obs: Observation, backend: DecisionBackend) -> Decision:
    decision = backend.decide(memory, obs)
    if not decision.trace.complete():
        raise BackendError("backend returned an incomplete reasoning trace")
    return decision


class ScriptedPlanner(DecisionBackend):
    """Rule-table reference backend (see module docstring for the table)."""

    def __init__(
        self,
        scenario: Scenario,
        pool,
        max_attempts: int | dict[str, int] = 3,
        recovery_map: dict[str, str] | None = None,
        allow_recovery: bool = True,
    ):
        self.scenario = scenario
        self.pool = pool
        self.max_attempts = max_attempts
        self.recovery_map = dict(recovery_map or {})
        self.allow_recovery = allow_recovery
        self._criteria = {
            sid: canonical_dumps(sub.goal_predicate) for sid, sub in scenario.subtasks.items()
        }

    def _budget(self, subtask_id: str) -> int:
        if isinstance(self.max_attempts, dict):
            return self.max_attempts.get(subtask_id, 3)
        return self.max_attempts

    def _trace(self, obs: Observation, objective: str, criteria: str, assessment: str, next_action: str) -> CoTTrace:
        return CoTTrace(
            scene_interpretation=obs.env_summary.text,
            current_objective=objective,
            success_criteria=criteria,
            assessment=assessment,
            next_action=next_action,
        )

    def decide(self, memory: MemoryState, obs: Observation) -> Decision:
        if memory.role.mode == MODE_DATA_COLLECTOR:
            return self._decide_collect(memory, obs)
        return self._decide_deploy(memory, obs)

    # -- task-executor rules ------------------------------------------------

    def _decide_deploy(self, memory: MemoryState, obs: Observation) -> Decision:
        task = memory.task
        current = None
        for entry in task.subtasks:
            if entry.status not in (STATUS_DONE, STATUS_ESCALATED):
                current = entry
                break
        if current is None:
            trace = self._trace(obs, "complete the task plan", "every subtask done",
                                "all subtasks are terminal", "finish the task")
            return Decision(ACTION_FINISH, None, trace)

        sid = current.subtask_id
        sub = self.scenario.subtask(sid)
        state = obs.env_summary.structured
        criteria = self._criteria[sid]
        attempts_made = task.attempt_counts.get(sid, 0) + 1
        budget = self._budget(sid)

        if current.status == STATUS_PENDING:
            spec = self.pool.find(sid, FORWARD)
            instr = build_instruction(self.scenario, sid, FORWARD)
            trace = self._trace(obs, sub.forward_text, criteria,
                                "subtask not yet attempted", f"start forward skill {spec.policy_id}")
            return Decision(ACTION_INVOKE, sid, trace, spec.policy_id, instr)

        if current.status == STATUS_ACTIVE:
            if predicate_holds(sub.goal_predicate, state):
                trace = self._trace(obs, sub.forward_text, criteria,
                                    "goal predicate satisfied", "mark the subtask done")
                return Decision(ACTION_MARK_DONE, sid, trace)
            if attempts_made < budget:
                spec = self.pool.find(sid, FORWARD)
                instr = build_instruction(self.scenario, sid, FORWARD)
                trace = self._trace(obs, sub.forward_text, criteria,
                                    "attempt finished without reaching the goal", "retry the same skill")
                return Decision(ACTION_RETRY, sid, trace, spec.policy_id, instr, reason="goal not reached")
            trace = self._trace(obs, sub.forward_text, criteria,
                                "attempt budget exhausted without success", "escalate to a human operator")
            return Decision(ACTION_ESCALATE, sid, trace, reason="attempts exhausted")

        # current.status == STATUS_FAILED
        if attempts_made >= budget:
            trace = self._trace(obs, sub.forward_text, criteria,
                                f"{attempts_made} attempts used of {budget}", "escalate to a human operator")
            return Decision(ACTION_ESCALATE, sid, trace, reason="attempts exhausted")
        if in_precondition(state, sub, FORWARD):
            spec = self.pool.find(sid, FORWARD)
            instr = build_instruction(self.scenario, sid, FORWARD)
            trace = self._trace(obs, sub.forward_text, criteria,
                                "failure left the scene retryable", "retry the same skill")
            return Decision(ACTION_RETRY, sid, trace, spec.policy_id, instr, reason="non-degrading failure")
        stats = obs.robot_stats
        if stats.get("last_direction", -1) not in (-1, 0) and stats.get("last_outcome") == 0:
            trace = self._trace(obs, sub.forward_text, criteria,
                                "restore attempt failed; scene still degraded", "escalate to a human operator")
            return Decision(ACTION_ESCALATE, sid, trace, reason="recovery failed")
        recovery_id = self.pool.resolve_recovery(sid, self.recovery_map) if self.allow_recovery else None
        if recovery_id is not None:
            instr = build_instruction(self.scenario, sid, INVERSE)
            trace = self._trace(obs, sub.forward_text, criteria,
                                "degrading failure moved the scene out of the precondition region",
                                f"run restore skill {recovery_id}")
            return Decision(ACTION_RECOVER, sid, trace, recovery_id, instr, reason="degrading failure")
        trace = self._trace(obs, sub.forward_text, criteria,
                            "scene degraded and no restore skill is registered", "escalate to a human operator")
        return Decision(ACTION_ESCALATE, sid, trace, reason="degraded, no recovery")

    # -- data-collector rules -------------------------------------------------

    def _decide_collect(self, memory: MemoryState, obs: Observation) -> Decision:
        entry = memory.task.subtasks[0]
        sid = entry.subtask_id
        sub = self.scenario.subtask(sid)
        state = obs.env_summary.structured
        criteria = self._criteria[sid]
        stats = obs.robot_stats

        if in_precondition(state, sub, FORWARD):
            spec = self.pool.find(sid, FORWARD)
            instr = build_instruction(self.scenario, sid, FORWARD)
            trace = self._trace(obs, sub.forward_text, criteria,
                                "scene is in the forward precondition region",
                                f"start forward skill {spec.policy_id}")
            return Decision(ACTION_INVOKE, sid, trace, spec.policy_id, instr)
        if stats.get("last_direction") == 1 and stats.get("last_outcome") == 0:
            trace = self._trace(obs, sub.inverse_text, criteria,
                                "inverse skill failed to reset the scene", "request a human reset")
            return Decision(ACTION_ESCALATE, sid, trace, reason="inverse failure")
        if predicate_holds(sub.goal_predicate, state):
            spec = self.pool.find(sid, INVERSE)
            instr = build_instruction(self.scenario, sid, INVERSE)
            trace = self._trace(obs, sub.inverse_text, criteria,
                                "forward goal reached; scene must be reset for the next cycle",
                                f"start inverse skill {spec.policy_id}")
            return Decision(ACTION_INVOKE, sid, trace, spec.policy_id, instr)
        trace = self._trace(obs, sub.forward_text, criteria,
                            "scene is degraded and cannot continue the loop", "request a human reset")
        return Decision(ACTION_ESCALATE, sid, trace, reason="degraded scene")


class RemoteBackend(DecisionBackend):
    """HTTP decision backend stub.

    Serializes the decision context to a documented JSON request:
    ``POST {memory, observation, tools[], trace_format: "cot-v1"}``;
    expects ``{decision, trace}`` back. Any transport or protocol
    failure raises BackendError, which callers treat as an escalation.
    Not exercised by the test suite (no live endpoint).
    """

    def __init__(self, url: str, tools: list[dict] | None = None, timeout: float = 10.0):
        self.url = url
        self.tools = tools or []
        self.timeout = timeout

    def build_request(self, memory: MemoryState, obs: Observation) -> dict:
        return {
            "memory": memory.to_dict(),
            "observation": {
                "env_summary": {"structured": obs.env_summary.structured, "text": obs.env_summary.text},
                "robot_stats": obs.robot_stats,
                "timestamp": obs.timestamp,
            },
            "tools": self.tools,
            "trace_format": "cot-v1",
        }

    def decide(self, memory: MemoryState, obs: Observation) -> Decision:
        body = canonical_dumps(self.build_request(memory, obs)).encode("ascii")
        request = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read())
            decision = payload["decision"]
            trace = CoTTrace(**payload["trace"])
            instruction = None
            if decision.get("instruction"):
                instruction = Instruction.from_dict(decision["instruction"])
            return Decision(
                action=decision["action"],
                chosen_subtask=decision.get("subtask"),
                trace=trace,
                policy_id=decision.get("policy_id"),
                instruction=instruction,
                reason=decision.get("reason"),
            )
        except Exception as exc:  # any remote failure is an escalation
            raise BackendError(f"remote backend failed: {exc}") from exc


class AgentSession:
    """Agent-side bus client: role-gated tool calls, working-memory
    bookkeeping, and event logging.

    Every call round-trips through the wire encoding (encode, decode,
    dispatch, encode, decode), so the schema boundary is exercised even
    in-process, and both the request and its response land in the event
    log as paired ToolCall events.
    """

    def __init__(self, registry: ToolRegistry, memory: MemoryState, event_log: EventLog, world):
        self.registry = registry
        self.memory = memory
        self.log = event_log
        self.world = world
        self._next_id = 1

    def call(self, tool: str, arguments: dict | None = None) -> dict:
        if tool not in self.memory.role.allowed_tools:
            raise ToolNotAllowed(f"{self.memory.role.mode} may not call {tool}")
        arguments = arguments or {}
        request = ToolRequest(self._next_id, METHOD_CALL, {"name": tool, "arguments": arguments})
        self._next_id += 1
        request_bytes = encode_message(request)
        wire_request = decode_message(request_bytes)
        self.log.append(
            self.world.state.tick,
            KIND_TOOL_CALL,
            {"role": "request", "id": request.id, "tool": tool, "arguments": arguments},
        )
        response_bytes = encode_message(self.registry.dispatch(wire_request))
        response = decode_message(response_bytes)
        payload: dict = {"role": "response", "id": response.id, "tool": tool}
        if response.error is not None:
            payload["error"] = response.error
        else:
            payload["result"] = response.result
        self.log.append(self.world.state.tick, KIND_TOOL_CALL, payload)
        # Digest the wire bytes directly rather than re-serializing.
        self.memory.working.record_tool_digested(
            tool,
            hashlib.sha256(request_bytes).hexdigest()[:16],
            hashlib.sha256(response_bytes).hexdigest()[:16],
            self.world.state.tick,
        )
        if response.error is not None:
            raise DomainError(response.error["code"], response.error["message"])
        return response.result

    def observe(self) -> Observation:
        summary = self.call("env_summary")
        stats = self.call("fetch_robot_stats")["stats"]
        return Observation(
            env_summary=EnvSummary(structured=summary["structured"], text=summary["text"]),
            robot_stats=stats,
            timestamp=self.world.state.tick,
        )
