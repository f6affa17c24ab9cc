"""Deployment-time supervision: execute a subtask plan with monitoring,
retry, recovery, and bounded human escalation.

Per subtask: run the forward skill; after every attempt the agent
queries the scene summary and robot stats and re-decides. A
non-degrading failure is retried while the attempt budget lasts. A
degrading failure triggers the mapped restore skill (the inverse skill
by default) and then a retry; a failed restore escalates. Once attempts
are exhausted — or the scene is degraded with no restorer — the agent
escalates: if a human operator is available (and not yet used for this
subtask) the scene is restored and the skill gets exactly one more
attempt; otherwise, or if that attempt also fails, the task aborts.

A task that finishes with zero interventions is Completed; with any
human help it is CompletedWithHuman. All trajectories produced during
deployment stay in the event log and can be re-appended to the dataset
afterwards via ``reintegrate``, which also advances the learning-curve
counters — deployment doubles as data collection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .agent import (
    ACTION_ESCALATE,
    ACTION_FINISH,
    ACTION_INVOKE,
    ACTION_MARK_DONE,
    ACTION_RECOVER,
    ACTION_RETRY,
    AgentSession,
    CoTTrace,
    Decision,
    build_instruction,
    classify_failure,
    decide,
)
from .canon import canonical_dumps
from .collector import Dataset, ScriptedHuman
from .errors import BackendError, SchemaError
from .events import KIND_DECISION, KIND_INTERVENTION, KIND_OUTCOME, KIND_TOOL_CALL, EventLog
from .memory import (
    MODE_TASK_EXECUTOR,
    STATUS_ACTIVE,
    STATUS_DONE,
    STATUS_ESCALATED,
    STATUS_FAILED,
    MemoryState,
    RoleIdentity,
    SubtaskEntry,
    TaskMemory,
    WorkingMemory,
)
from .records import Trajectory
from .simenv import DEGRADING, FORWARD, NONDEGRADING, Outcome, SimWorld
from .toolbus import build_standard_registry

RESULT_COMPLETED = "Completed"
RESULT_COMPLETED_WITH_HUMAN = "CompletedWithHuman"
RESULT_ABORTED = "Aborted"

_TERMINAL = (STATUS_DONE, STATUS_ESCALATED)


@dataclass
class TaskPlan:
    """Ordered subtasks with attempt budgets and restore-skill overrides."""

    subtask_ids: list[str]
    max_attempts: int | dict[str, int] = 3
    recovery_map: dict[str, str] = field(default_factory=dict)

    def budget(self, subtask_id: str) -> int:
        if isinstance(self.max_attempts, dict):
            return self.max_attempts.get(subtask_id, 3)
        return self.max_attempts

    def validate(self) -> None:
        if not self.subtask_ids:
            raise SchemaError("plan declares no subtasks")
        budgets = (
            self.max_attempts.values() if isinstance(self.max_attempts, dict) else [self.max_attempts]
        )
        if any(b < 1 for b in budgets):
            raise SchemaError("max_attempts must be at least 1")


def load_plan(path: str) -> TaskPlan:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        plan = TaskPlan(
            subtask_ids=list(data["subtasks"]),
            max_attempts=data.get("max_attempts", 3),
            recovery_map=dict(data.get("recovery_map", {})),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"cannot load plan {path}: {exc}") from exc
    plan.validate()
    return plan


@dataclass
class TaskResult:
    status: str
    subtasks: dict[str, dict]
    interventions: int
    wall_ticks: int

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "subtasks": self.subtasks,
            "interventions": self.interventions,
            "wall_ticks": self.wall_ticks,
        }


def schedule_next(plan: TaskPlan, task_memory: TaskMemory) -> str | None:
    """First subtask in plan order that is not yet terminal; None when
    the whole plan is done."""
    for sid in plan.subtask_ids:
        if task_memory.entry(sid).status not in _TERMINAL:
            return sid
    return None


def handle_failure(outcome: Outcome, attempts: int, budget: int, recovery_available: bool) -> str:
    """Failure triage: retry in place, restore first, or hand over."""
    if outcome.failure_class == NONDEGRADING and attempts < budget:
        return ACTION_RETRY
    if outcome.failure_class == DEGRADING and recovery_available and attempts < budget:
        return ACTION_RECOVER
    return ACTION_ESCALATE


def _escalate_decision(obs, subtask_id: str, why: str) -> Decision:
    trace = CoTTrace(
        scene_interpretation=obs.env_summary.text,
        current_objective=f"continue subtask {subtask_id}" if subtask_id else "continue the task",
        success_criteria="decision backend reachable",
        assessment=why,
        next_action="escalate to a human operator",
    )
    return Decision(ACTION_ESCALATE, subtask_id, trace, reason="backend failure")


def execute_task(
    backend,
    world: SimWorld,
    pool,
    plan: TaskPlan,
    dataset: Dataset | None = None,
    human: ScriptedHuman | None = None,
    human_retry: bool | dict[str, bool] | None = None,
    store=None,
) -> tuple[TaskResult, EventLog]:
    """Run one long-horizon episode under agent supervision.

    ``human_retry`` gates the one human-assisted attempt per subtask
    (bool, or a per-subtask map); by default it follows whether a human
    operator was provided at all.
    """
    plan.validate()
    scenario = world.scenario
    for sid in plan.subtask_ids:
        scenario.subtask(sid)  # SchemaError on unknown ids

    dataset = dataset if dataset is not None else Dataset()
    registry = build_standard_registry(world, pool, dataset, human)
    memory = MemoryState(
        role=RoleIdentity.for_mode(MODE_TASK_EXECUTOR),
        task=TaskMemory(
            task_id=f"deploy:{scenario.name}",
            goal_text=f"complete the {scenario.name} task plan",
            subtasks=[SubtaskEntry(sid, scenario.subtask(sid).forward_text) for sid in plan.subtask_ids],
        ),
        working=WorkingMemory(active_skill="long-horizon-execution"),
    )
    log = EventLog()
    session = AgentSession(registry, memory, log, world)
    if store is not None:
        store.put_state(memory)

    def human_allowed(sid: str) -> bool:
        if human is None or not human.available:
            return False
        if isinstance(human_retry, dict):
            return human_retry.get(sid, True)
        if human_retry is None:
            return True
        return human_retry

    def run_attempt(decision_like_policy: str, instruction, direction_label: str, sid: str):
        before = world.state
        result = session.call(
            "start_policy",
            {
                "policy_id": decision_like_policy,
                "instruction": instruction.text,
                "direction": instruction.direction,
            },
        )
        outcome = Outcome.from_dict(result["outcome"])
        trajectory = Trajectory.from_dict(result["trajectory"])
        classified = None
        if not outcome.success:
            classified = classify_failure(before, world.state, scenario.subtask(sid), trajectory.direction)
        log.append(
            world.state.tick,
            KIND_OUTCOME,
            {
                "subtask": sid,
                "policy_id": trajectory.policy_id,
                "direction": trajectory.direction,
                "role": direction_label,
                "kind": outcome.kind,
                "failure_class": outcome.failure_class,
                "classified": classified,
                "steps": outcome.steps_taken,
            },
        )
        return outcome

    interventions = 0
    interventions_by_subtask: dict[str, int] = {sid: 0 for sid in plan.subtask_ids}
    human_used: dict[str, bool] = {}
    aborted = False

    # Observations are refreshed after every scene-changing operation
    # (skill attempts, interventions); decisions that only touch memory
    # reuse the latest one, so there is always at least one summary
    # query between consecutive outcome events.
    obs = session.observe()
    while True:
        try:
            decision = decide(memory, obs, backend)
        except BackendError as exc:
            decision = _escalate_decision(obs, schedule_next(plan, memory.task) or "", str(exc))
        log.append(world.state.tick, KIND_DECISION, decision.to_payload())
        action = decision.action
        sid = decision.chosen_subtask

        if action == ACTION_FINISH:
            break

        if action == ACTION_MARK_DONE:
            memory.task.update_status(sid, STATUS_DONE)
            if store is not None:
                store.put("Task", canonical_dumps(memory.task.to_dict()))
            continue

        if action in (ACTION_INVOKE, ACTION_RETRY):
            memory.task.update_status(sid, STATUS_ACTIVE)
            outcome = run_attempt(decision.policy_id, decision.instruction, "attempt", sid)
            if not outcome.success:
                memory.task.update_status(sid, STATUS_FAILED)
            obs = session.observe()
            continue

        if action == ACTION_RECOVER:
            run_attempt(decision.policy_id, decision.instruction, "restore", sid)
            obs = session.observe()
            continue

        if action == ACTION_ESCALATE:
            if sid and human_allowed(sid) and not human_used.get(sid, False):
                human_used[sid] = True
                session.call("call_human", {"reason": decision.reason or "escalation", "subtask_id": sid})
                interventions += 1
                interventions_by_subtask[sid] += 1
                log.append(
                    world.state.tick,
                    KIND_INTERVENTION,
                    {"reason": decision.reason or "escalation", "subtask": sid, "time_cost": human.time_cost},
                )
                if memory.task.entry(sid).status == STATUS_FAILED:
                    memory.task.update_status(sid, STATUS_ACTIVE)
                instr = build_instruction(scenario, sid, FORWARD)
                spec = pool.find(sid, FORWARD)
                outcome = run_attempt(spec.policy_id, instr, "human-granted attempt", sid)
                if outcome.success:
                    obs = session.observe()
                    continue  # goal now holds; next decision marks it done
                memory.task.update_status(sid, STATUS_ESCALATED)
            aborted = True
            break

        raise SchemaError(f"unexpected action: {action}")

    subtask_report = {
        sid: {
            "status": memory.task.entry(sid).status,
            "retries": memory.task.attempt_counts.get(sid, 0),
            "interventions": interventions_by_subtask[sid],
        }
        for sid in plan.subtask_ids
    }
    if aborted:
        status = RESULT_ABORTED
    elif interventions > 0:
        status = RESULT_COMPLETED_WITH_HUMAN
    else:
        status = RESULT_COMPLETED
    result = TaskResult(
        status=status,
        subtasks=subtask_report,
        interventions=interventions,
        wall_ticks=world.state.tick,
    )
    return result, log


def reintegrate(event_log: EventLog, dataset: Dataset, pool=None) -> int:
    """Append every trajectory recorded in a deployment log to the
    dataset; successful ones advance the learning-curve counters when a
    pool is given. Re-passing the same log appends duplicates — callers
    own idempotence."""
    count = 0
    for event in event_log.of_kind(KIND_TOOL_CALL):
        payload = event.payload
        if payload.get("role") != "response" or payload.get("tool") != "start_policy":
            continue
        result = payload.get("result")
        if not result:
            continue
        trajectory = Trajectory.from_dict(result["trajectory"])
        dataset.append(trajectory)
        count += 1
        if pool is not None and trajectory.outcome.success:
            pool.record_trajectory(trajectory.policy_id)
    return count
