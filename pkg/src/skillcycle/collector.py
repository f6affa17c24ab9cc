"""Self-resetting data collection: alternate forward and inverse skills
under agent control, assemble entangled pairs, persist everything.

One cycle: evaluate the scene, run the forward skill, and on success run
the inverse skill to reset; a successful forward/inverse couple becomes
an entangled pair. Non-degrading forward failures are simply retried
(the scene is untouched). A degrading forward failure or any inverse
failure costs one scripted human reset — those are the only two ways an
intervention can enter the event log.

All trajectories (including failures) are persisted; only successful
ones advance the per-policy learning-curve counters. Human corrective
resets are logged as interventions, and the corrective trajectory they
stand in for is recorded under the forward policy with direction Human.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .agent import AgentSession, Decision, Observation, classify_failure, decide
from .agent import ACTION_ESCALATE, ACTION_INVOKE, CoTTrace
from .canon import canonical_dumps
from .errors import BackendError, BudgetExceeded, MismatchedPair, NotFound, SchemaError, StorageError
from .events import KIND_DECISION, KIND_INTERVENTION, KIND_OUTCOME, EventLog
from .memory import (
    MODE_DATA_COLLECTOR,
    STATUS_ACTIVE,
    MemoryState,
    RoleIdentity,
    SubtaskEntry,
    TaskMemory,
    WorkingMemory,
)
from .records import EntangledPair, Trajectory
from .simenv import FORWARD, HUMAN, INVERSE, Outcome, SimWorld
from .toolbus import build_standard_registry

SCHEMA_TAG = "eap-v1"


class Dataset:
    """Append-only JSONL dataset of trajectories and entangled pairs.

    One canonical-JSON record per line, tagged ``"schema": "eap-v1"``.
    Without a path the dataset lives in memory (useful for transient
    deploy episodes); with a path every append goes straight to disk.
    Per-policy counters track successful trajectories only — these are
    the counts that drive the learning curves.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.record_count = 0
        self.pair_count = 0
        self.policy_counts: dict[str, int] = {}
        self._lines: list[bytes] = []
        self._size = 0
        self._fh = None
        if path is not None:
            try:
                os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
                if os.path.exists(path):
                    self._reload()
                self._fh = open(path, "ab")
            except OSError as exc:
                raise StorageError(f"cannot open dataset {path}: {exc}") from exc

    def _reload(self) -> None:
        with open(self.path, "rb") as f:
            for line in f:
                if line.strip():
                    self._count_record(json.loads(line))
                self._size += len(line)

    def _count_record(self, d: dict) -> None:
        self.record_count += 1
        if d["type"] == "pair":
            self.pair_count += 1
        elif d["outcome"]["kind"] == "Success" or d["direction"] == HUMAN:
            self.policy_counts[d["policy_id"]] = self.policy_counts.get(d["policy_id"], 0) + 1

    def append(self, record: Trajectory | EntangledPair) -> int:
        """Append one record; returns the byte offset it starts at."""
        if isinstance(record, EntangledPair):
            d = {"type": "pair", "schema": SCHEMA_TAG, **record.to_dict()}
        else:
            d = {"type": "trajectory", "schema": SCHEMA_TAG, **record.to_dict()}
        line = canonical_dumps(d).encode("ascii") + b"\n"
        offset = self._size
        if self._fh is not None:
            try:
                self._fh.write(line)
                self._fh.flush()
            except OSError as exc:
                raise StorageError(f"append failed: {exc}") from exc
        else:
            self._lines.append(line)
        self._size += len(line)
        self._count_record(d)
        return offset

    def size_bytes(self) -> int:
        return self._size

    def read_at(self, offset: int) -> dict:
        """Read back the record starting at a byte offset."""
        if self._fh is not None:
            with open(self.path, "rb") as f:
                f.seek(offset)
                return json.loads(f.readline())
        pos = 0
        for line in self._lines:
            if pos == offset:
                return json.loads(line)
            pos += len(line)
        raise StorageError(f"no record at offset {offset}")

    def iter_records(self):
        if self._fh is not None:
            with open(self.path, "rb") as f:
                for line in f:
                    if line.strip():
                        yield json.loads(line)
        else:
            for line in self._lines:
                yield json.loads(line)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def append(dataset: Dataset, record: Trajectory | EntangledPair) -> int:
    return dataset.append(record)


@dataclass
class ScriptedHuman:
    """Stand-in operator: restores the subtask's precondition with
    probability one at a fixed time cost."""

    available: bool = True
    time_cost: float = 1.0

    def intervene(self, world: SimWorld, subtask_id: str) -> None:
        world.restore_precondition(subtask_id)


def assemble_pair(forward: Trajectory, inverse: Trajectory) -> EntangledPair:
    """Couple a successful forward trajectory with the successful inverse
    that reset it. Anything else is a mismatch."""
    if forward.direction != FORWARD or not forward.outcome.success:
        raise MismatchedPair("forward member must be a successful forward trajectory")
    if inverse.direction != INVERSE or not inverse.outcome.success:
        raise MismatchedPair("inverse member must be a successful inverse trajectory")
    if forward.episode != inverse.episode:
        raise MismatchedPair(
            f"episode mismatch: {forward.episode} vs {inverse.episode}"
        )
    return EntangledPair(
        pair_id=f"{forward.trajectory_id}+{inverse.trajectory_id}",
        forward=forward,
        inverse=inverse,
    )


def _decide_or_escalate(memory: MemoryState, obs: Observation, backend, subtask_id: str) -> Decision:
    try:
        return decide(memory, obs, backend)
    except BackendError as exc:
        trace = CoTTrace(
            scene_interpretation=obs.env_summary.text,
            current_objective=f"continue work on {subtask_id}",
            success_criteria="backend reachable",
            assessment=f"decision backend failed: {exc}",
            next_action="escalate to a human operator",
        )
        return Decision(ACTION_ESCALATE, subtask_id, trace, reason="backend failure")


def collect_pairs(
    backend,
    world: SimWorld,
    pool,
    subtask_id: str,
    n_pairs: int,
    budget: int,
    dataset: Dataset | None = None,
    human: ScriptedHuman | None = None,
    store=None,
) -> tuple[list[EntangledPair], EventLog]:
    """Run the self-resetting loop until ``n_pairs`` pairs are assembled.

    ``budget`` caps the total number of skill attempts (forward plus
    inverse); exhausting it raises BudgetExceeded carrying the partial
    pairs and the event log. Every tool call flows through the bus and
    is recorded in the returned event log.
    """
    scenario = world.scenario
    if subtask_id not in scenario.subtasks:
        raise NotFound(f"unknown subtask: {subtask_id}")
    sub = scenario.subtask(subtask_id)
    if pool.find(subtask_id, FORWARD) is None or pool.find(subtask_id, INVERSE) is None:
        raise SchemaError(f"{subtask_id}: forward and inverse policies must be registered")

    dataset = dataset if dataset is not None else Dataset()
    human = human if human is not None else ScriptedHuman()
    registry = build_standard_registry(world, pool, dataset, human)
    memory = MemoryState(
        role=RoleIdentity.for_mode(MODE_DATA_COLLECTOR),
        task=TaskMemory(
            task_id=f"collect:{scenario.name}:{subtask_id}",
            goal_text=f"collect {n_pairs} entangled pairs for {subtask_id}",
            subtasks=[SubtaskEntry(subtask_id, sub.forward_text, STATUS_ACTIVE)],
        ),
        working=WorkingMemory(active_skill="entangled-pair-collection"),
    )
    log = EventLog()
    session = AgentSession(registry, memory, log, world)
    if store is not None:
        store.put_state(memory)

    pairs: list[EntangledPair] = []
    pending_forward: Trajectory | None = None
    attempts = 0

    while len(pairs) < n_pairs:
        obs = session.observe()
        decision = _decide_or_escalate(memory, obs, backend, subtask_id)
        log.append(world.state.tick, KIND_DECISION, decision.to_payload())

        if decision.action == ACTION_INVOKE:
            if attempts >= budget:
                raise BudgetExceeded(
                    f"attempt budget {budget} exhausted with {len(pairs)}/{n_pairs} pairs",
                    pairs=pairs,
                    event_log=log,
                )
            attempts += 1
            before = world.state
            result = session.call(
                "start_policy",
                {
                    "policy_id": decision.policy_id,
                    "instruction": decision.instruction.text,
                    "direction": decision.instruction.direction,
                },
            )
            outcome = Outcome.from_dict(result["outcome"])
            trajectory = Trajectory.from_dict(result["trajectory"])
            classified = None
            if not outcome.success:
                classified = classify_failure(before, world.state, sub, trajectory.direction)
            log.append(
                world.state.tick,
                KIND_OUTCOME,
                {
                    "subtask": subtask_id,
                    "policy_id": trajectory.policy_id,
                    "direction": trajectory.direction,
                    "kind": outcome.kind,
                    "failure_class": outcome.failure_class,
                    "classified": classified,
                    "steps": outcome.steps_taken,
                },
            )
            session.call("append_trajectory", {"trajectory": trajectory.to_dict()})
            if outcome.success:
                pool.record_trajectory(trajectory.policy_id)
            if trajectory.direction == FORWARD:
                pending_forward = trajectory if outcome.success else None
            else:
                if outcome.success and pending_forward is not None:
                    pair = assemble_pair(pending_forward, trajectory)
                    dataset.append(pair)
                    pairs.append(pair)
                pending_forward = None

        elif decision.action == ACTION_ESCALATE:
            session.call("call_human", {"reason": decision.reason or "reset", "subtask_id": subtask_id})
            log.append(
                world.state.tick,
                KIND_INTERVENTION,
                {"reason": decision.reason or "reset", "subtask": subtask_id, "time_cost": human.time_cost},
            )
            if store is not None:
                store.put("Note", f"human reset for {subtask_id}: {decision.reason}")
            pending_forward = None

        else:
            raise SchemaError(f"unexpected collection action: {decision.action}")

    return pairs, log
