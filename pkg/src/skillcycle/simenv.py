"""Deterministic symbolic simulator for tabletop manipulation scenes.

A scene is a set of named objects with coarse statuses, plus a drawer and
a spill field. Skill executions are atomic: an outcome is sampled (two
RNG draws, always — success draw then class draw — so streams stay
aligned when parameters change), then applied to the state.

Outcome semantics per direction:

* forward success makes the subtask's goal predicate true (object to its
  goal status, drawer/spill to the goal-required values);
* forward/inverse non-degrading failure leaves everything unchanged but
  the tick;
* a degrading failure moves the object to one of the subtask's degrade
  targets, chosen uniformly from the class draw's leftover mass (recorded
  in the outcome, so replaying an outcome is deterministic);
* inverse or recovery success puts the object back to its start status
  and restores scene defaults for any field the goal constrains.

Precondition regions: a forward skill requires its scenario predicate; an
inverse or recovery skill is runnable exactly when the forward
precondition does NOT hold (there is something to undo or repair).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import PreconditionError, SchemaError

OBJECT_STATUSES = ("AtStart", "Grasped", "AtGoal", "Displaced", "Tipped")
DRAWER_STATES = ("Open", "Closed")
SPILL_STATES = ("Present", "Wiped", "None")

FORWARD = "Forward"
INVERSE = "Inverse"
RECOVERY = "Recovery"
HUMAN = "Human"
DIRECTIONS = (FORWARD, INVERSE, RECOVERY, HUMAN)

OUTCOME_SUCCESS = "Success"
OUTCOME_FAILURE = "Failure"
NONDEGRADING = "NonDegrading"
DEGRADING = "Degrading"


@dataclass
class EnvState:
    """Ground-truth scene state owned by the simulator."""

    objects: dict[str, str]
    drawer: str
    spill: str
    tick: int = 0

    def validate(self) -> None:
        grasped = [o for o, s in self.objects.items() if s == "Grasped"]
        if len(grasped) > 1:
            raise SchemaError(f"more than one object grasped: {grasped}")
        for obj, status in self.objects.items():
            if status not in OBJECT_STATUSES:
                raise SchemaError(f"{obj}: bad status {status}")

    def copy(self) -> "EnvState":
        return EnvState(dict(self.objects), self.drawer, self.spill, self.tick)

    def to_dict(self) -> dict:
        return {
            "objects": dict(sorted(self.objects.items())),
            "drawer": self.drawer,
            "spill": self.spill,
            "tick": self.tick,
        }


@dataclass
class EnvSummary:
    """What the agent sees: a structured mirror plus a text rendering."""

    structured: dict
    text: str


@dataclass
class Outcome:
    kind: str
    failure_class: str | None = None
    steps_taken: int = 1
    degrade_target: str | None = None

    @property
    def success(self) -> bool:
        return self.kind == OUTCOME_SUCCESS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "failure_class": self.failure_class,
            "steps_taken": self.steps_taken,
            "degrade_target": self.degrade_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Outcome":
        return cls(d["kind"], d["failure_class"], d["steps_taken"], d["degrade_target"])


@dataclass
class SubtaskSpec:
    """One manipulation subtask: texts, predicates, failure shape."""

    subtask_id: str
    object_id: str
    forward_text: str
    inverse_text: str
    goal_predicate: dict
    precondition_predicate: dict
    degrade_targets: list[str]
    nondegrading_fraction: float = 0.5
    # Scene defaults, stamped at load time, used when an inverse or
    # recovery success restores fields the goal constrains.
    restore_drawer: str | None = None
    restore_spill: str | None = None


@dataclass
class Scenario:
    name: str
    objects: list[str]
    drawer_default: str
    spill_default: str
    subtasks: dict[str, SubtaskSpec]
    subtask_order: list[str] = field(default_factory=list)

    def subtask(self, subtask_id: str) -> SubtaskSpec:
        if subtask_id not in self.subtasks:
            raise SchemaError(f"unknown subtask: {subtask_id}")
        return self.subtasks[subtask_id]


_PREDICATE_KEYS = {"objects", "drawer", "spill"}


def _validate_predicate(pred: dict, objects: list[str], label: str) -> None:
    if not isinstance(pred, dict):
        raise SchemaError(f"{label}: predicate must be an object")
    unknown = set(pred) - _PREDICATE_KEYS
    if unknown:
        raise SchemaError(f"{label}: unknown predicate keys {sorted(unknown)}")
    for obj, allowed in pred.get("objects", {}).items():
        if obj not in objects:
            raise SchemaError(f"{label}: predicate references undeclared object {obj}")
        if not allowed or any(s not in OBJECT_STATUSES for s in allowed):
            raise SchemaError(f"{label}: bad status list for {obj}")
    for key, domain in (("drawer", DRAWER_STATES), ("spill", SPILL_STATES)):
        if key in pred and (not pred[key] or any(v not in domain for v in pred[key])):
            raise SchemaError(f"{label}: bad {key} values")


def scenario_from_dict(d: dict) -> Scenario:
    try:
        name = d["name"]
        objects = list(d["objects"])
        drawer_default = d.get("drawer_default", "Open")
        spill_default = d.get("spill_default", "None")
        raw_subtasks = d["subtasks"]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"scenario missing field: {exc}") from exc
    if drawer_default not in DRAWER_STATES or spill_default not in SPILL_STATES:
        raise SchemaError("bad drawer/spill default")
    outcome_params = d.get("outcome_params", {})

    subtasks: dict[str, SubtaskSpec] = {}
    order: list[str] = []
    for raw in raw_subtasks:
        try:
            sid = raw["subtask_id"]
            spec = SubtaskSpec(
                subtask_id=sid,
                object_id=raw["object_id"],
                forward_text=raw["forward_text"],
                inverse_text=raw["inverse_text"],
                goal_predicate=raw["goal_predicate"],
                precondition_predicate=raw["precondition_predicate"],
                degrade_targets=list(raw["degrade_targets"]),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"subtask missing field: {exc}") from exc
        if sid in subtasks:
            raise SchemaError(f"duplicate subtask id: {sid}")
        if spec.object_id not in objects:
            raise SchemaError(f"{sid}: undeclared object {spec.object_id}")
        if not spec.degrade_targets or any(s not in OBJECT_STATUSES for s in spec.degrade_targets):
            raise SchemaError(f"{sid}: bad degrade_targets")
        _validate_predicate(spec.goal_predicate, objects, f"{sid}.goal")
        _validate_predicate(spec.precondition_predicate, objects, f"{sid}.precondition")
        beta = outcome_params.get(sid, {}).get("nondegrading_fraction", 0.5)
        if not 0.0 <= beta <= 1.0:
            raise SchemaError(f"{sid}: nondegrading_fraction out of range")
        spec.nondegrading_fraction = beta
        if "drawer" in spec.goal_predicate:
            spec.restore_drawer = drawer_default
        if "spill" in spec.goal_predicate:
            spec.restore_spill = spill_default
        subtasks[sid] = spec
        order.append(sid)
    if not subtasks:
        raise SchemaError("scenario declares no subtasks")
    return Scenario(name, objects, drawer_default, spill_default, subtasks, order)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot load scenario {path}: {exc}") from exc
    return scenario_from_dict(data)


def predicate_holds(pred: dict, state) -> bool:
    """Evaluate a conjunction predicate on an EnvState or structured dict."""
    if isinstance(state, EnvState):
        objects, drawer, spill = state.objects, state.drawer, state.spill
    else:
        objects, drawer, spill = state["objects"], state["drawer"], state["spill"]
    for obj, allowed in pred.get("objects", {}).items():
        if objects.get(obj) not in allowed:
            return False
    if "drawer" in pred and drawer not in pred["drawer"]:
        return False
    if "spill" in pred and spill not in pred["spill"]:
        return False
    return True


def initial_state(scenario: Scenario) -> EnvState:
    return EnvState(
        objects={obj: "AtStart" for obj in scenario.objects},
        drawer=scenario.drawer_default,
        spill=scenario.spill_default,
        tick=0,
    )


def reset(scenario: Scenario, seed: int) -> EnvState:
    """Fresh episode state. The seed feeds the episode RNG stream (see
    SimWorld), never the initial state, so resets are seed-independent."""
    del seed
    return initial_state(scenario)


def in_precondition(env: EnvState | dict, subtask: SubtaskSpec, direction: str = FORWARD) -> bool:
    """Whether the environment admits executing the subtask's policy.

    Forward uses the scenario predicate directly. Inverse and recovery
    act on anything the forward skill could NOT start from: the goal
    configuration after a forward success, or a degraded scene.
    """
    holds = predicate_holds(subtask.precondition_predicate, env)
    return holds if direction == FORWARD else not holds


def sample_outcome(
    env: EnvState,
    subtask: SubtaskSpec,
    success_prob: float,
    beta: float,
    rng,
    direction: str = FORWARD,
) -> Outcome:
    """Draw one execution outcome.

    Consumes exactly two RNG values in a fixed order — the success draw,
    then the class draw (even on success) — so downstream draws do not
    shift when probabilities change. On a degrading failure the degrade
    target index is derived from the class draw's leftover mass, which is
    uniform on [0,1) conditional on the degrading branch.
    """
    if not 0.0 <= success_prob <= 1.0 or not 0.0 <= beta <= 1.0:
        raise SchemaError("probabilities must lie in [0,1]")
    if not in_precondition(env, subtask, direction):
        raise PreconditionError(f"{subtask.subtask_id} ({direction}): precondition violated")
    u_success = rng.random()
    u_class = rng.random()
    if u_success < success_prob:
        return Outcome(OUTCOME_SUCCESS)
    if u_class < beta:
        return Outcome(OUTCOME_FAILURE, failure_class=NONDEGRADING)
    leftover = (u_class - beta) / (1.0 - beta) if beta < 1.0 else 0.0
    idx = min(int(leftover * len(subtask.degrade_targets)), len(subtask.degrade_targets) - 1)
    return Outcome(OUTCOME_FAILURE, failure_class=DEGRADING, degrade_target=subtask.degrade_targets[idx])


def apply_outcome(env: EnvState, subtask: SubtaskSpec, outcome: Outcome, direction: str = FORWARD) -> EnvState:
    """Apply a sampled outcome; returns the new state (input untouched)."""
    new = env.copy()
    new.tick += outcome.steps_taken
    if outcome.kind == OUTCOME_SUCCESS:
        if direction == FORWARD:
            goal = subtask.goal_predicate
            for obj, allowed in goal.get("objects", {}).items():
                new.objects[obj] = allowed[0]
            if "drawer" in goal:
                new.drawer = goal["drawer"][0]
            if "spill" in goal:
                new.spill = goal["spill"][0]
        else:
            new.objects[subtask.object_id] = "AtStart"
            if subtask.restore_drawer is not None:
                new.drawer = subtask.restore_drawer
            if subtask.restore_spill is not None:
                new.spill = subtask.restore_spill
    elif outcome.failure_class == DEGRADING:
        new.objects[subtask.object_id] = outcome.degrade_target
    new.validate()
    return new


def summarize(env: EnvState) -> EnvSummary:
    """Structured mirror of the state plus a stable one-line rendering."""
    structured = env.to_dict()
    parts = [f"tick={env.tick}", f"drawer={env.drawer}", f"spill={env.spill}"]
    parts += [f"{obj}={env.objects[obj]}" for obj in sorted(env.objects)]
    return EnvSummary(structured=structured, text=" ".join(parts))


class SimWorld:
    """One episode's scenario, mutable state, and private RNG stream."""

    def __init__(self, scenario: Scenario, rng, episode: int = 0):
        self.scenario = scenario
        self.rng = rng
        self.episode = episode
        self.state = initial_state(scenario)
        self.steps_executed = 0

    def restore_precondition(self, subtask_id: str) -> None:
        """Put one subtask's slice of the scene back to its start
        configuration (what a human reset does)."""
        sub = self.scenario.subtask(subtask_id)
        new = self.state.copy()
        new.tick += 1
        new.objects[sub.object_id] = "AtStart"
        pre = sub.precondition_predicate
        for obj, allowed in pre.get("objects", {}).items():
            new.objects[obj] = allowed[0]
        if "drawer" in pre:
            new.drawer = pre["drawer"][0]
        if "spill" in pre:
            new.spill = pre["spill"][0]
        self.state = new
