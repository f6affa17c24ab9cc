"""Registry and lifecycle for forward / inverse / recovery skills.

Each skill carries a learning curve mapping accumulated trajectory count
to a single-attempt success rate (piecewise-linear between anchors,
clamped outside). A pool drives one robot, so at most one handle is ever
active; executing a handle resolves the whole attempt — sample an
outcome at the current curve rate, apply it to the scene, synthesize the
trajectory — and terminates the handle, returning control to the agent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import PolicyBusy, PolicyNotActive, PreconditionError, SchemaError
from .records import Instruction, Trajectory, synth_steps
from .simenv import (
    DIRECTIONS,
    FORWARD,
    INVERSE,
    RECOVERY,
    Outcome,
    SimWorld,
    apply_outcome,
    in_precondition,
    sample_outcome,
)

HANDLE_ACTIVE = "Active"
HANDLE_TERMINATED = "Terminated"

_DIRECTION_CODE = {FORWARD: 0, INVERSE: 1, RECOVERY: 2}


@dataclass
class LearningCurve:
    """Anchor points (n_trajectories, success_rate), strictly increasing n."""

    anchors: list[tuple[int, float]]

    def __post_init__(self):
        if not self.anchors:
            raise SchemaError("learning curve needs at least one anchor")
        ns = [n for n, _ in self.anchors]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise SchemaError("curve anchors must be strictly increasing in n")
        if any(not 0.0 <= r <= 1.0 for _, r in self.anchors):
            raise SchemaError("curve rates must lie in [0,1]")

    def rate_at(self, n: int) -> float:
        if n < 0:
            raise SchemaError("trajectory count must be non-negative")
        anchors = self.anchors
        if n <= anchors[0][0]:
            return anchors[0][1]
        if n >= anchors[-1][0]:
            return anchors[-1][1]
        for (n0, r0), (n1, r1) in zip(anchors, anchors[1:]):
            if n0 <= n <= n1:
                frac = (n - n0) / (n1 - n0)
                return r0 + frac * (r1 - r0)
        raise AssertionError("unreachable")


def success_rate(curve: LearningCurve, n_trajectories: int) -> float:
    return curve.rate_at(n_trajectories)


@dataclass
class PolicySpec:
    policy_id: str
    subtask_id: str
    direction: str
    curve: LearningCurve
    steps_min: int = 1
    steps_max: int = 1


@dataclass
class PolicyHandle:
    handle_id: int
    policy_id: str
    instruction: Instruction
    state: str = HANDLE_ACTIVE


def load_policies(path: str) -> list[PolicySpec]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot load policies {path}: {exc}") from exc
    specs = []
    for raw in data.get("policies", []):
        try:
            dist = raw.get("steps_distribution", {"min": 1, "max": 1})
            specs.append(
                PolicySpec(
                    policy_id=raw["policy_id"],
                    subtask_id=raw["subtask_id"],
                    direction=raw["direction"],
                    curve=LearningCurve([tuple(a) for a in raw["curve"]]),
                    steps_min=dist["min"],
                    steps_max=dist["max"],
                )
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad policy spec: {exc}") from exc
    return specs


class PolicyPool:
    """Skill registry plus single-robot execution lifecycle."""

    def __init__(self, specs: list[PolicySpec], initial_counts: dict[str, int] | None = None):
        self.specs: dict[str, PolicySpec] = {}
        self._by_role: dict[tuple[str, str], PolicySpec] = {}
        for spec in specs:
            if spec.direction not in DIRECTIONS:
                raise SchemaError(f"{spec.policy_id}: bad direction {spec.direction}")
            if spec.policy_id in self.specs:
                raise SchemaError(f"duplicate policy id: {spec.policy_id}")
            key = (spec.subtask_id, spec.direction)
            if key in self._by_role:
                raise SchemaError(f"duplicate (subtask, direction): {key}")
            self.specs[spec.policy_id] = spec
            self._by_role[key] = spec
        self.counts: dict[str, int] = dict(initial_counts or {})
        self._active: PolicyHandle | None = None
        self._next_handle = 0
        self._next_exec = 0
        # Last-execution summary exposed through fetch_robot_stats.
        self._last: dict[str, int] = {"last_outcome": -1, "last_direction": -1, "last_failure_degrading": 0}

    # -- registry ---------------------------------------------------------

    def find(self, subtask_id: str, direction: str) -> PolicySpec | None:
        return self._by_role.get((subtask_id, direction))

    def resolve_recovery(self, subtask_id: str, recovery_map: dict[str, str] | None = None) -> str | None:
        """Recovery skill for a subtask: explicit plan mapping, else a
        registered Recovery spec, else the inverse skill doubling as the
        restorer."""
        if recovery_map and subtask_id in recovery_map:
            return recovery_map[subtask_id]
        for direction in (RECOVERY, INVERSE):
            spec = self.find(subtask_id, direction)
            if spec is not None:
                return spec.policy_id
        return None

    def set_trajectory_count(self, policy_id: str, n: int) -> None:
        if policy_id not in self.specs:
            raise SchemaError(f"unknown policy: {policy_id}")
        self.counts[policy_id] = n

    def set_all_counts(self, n: int, direction: str | None = FORWARD) -> None:
        for spec in self.specs.values():
            if direction is None or spec.direction == direction:
                self.counts[spec.policy_id] = n

    def record_trajectory(self, policy_id: str, n: int = 1) -> None:
        self.counts[policy_id] = self.counts.get(policy_id, 0) + n

    def trajectory_count(self, policy_id: str) -> int:
        return self.counts.get(policy_id, 0)

    def current_rate(self, policy_id: str) -> float:
        spec = self.specs[policy_id]
        return spec.curve.rate_at(self.trajectory_count(policy_id))

    # -- lifecycle --------------------------------------------------------

    @property
    def active_handle(self) -> PolicyHandle | None:
        return self._active

    def start(self, policy_id: str, instruction: Instruction) -> PolicyHandle:
        if self._active is not None:
            raise PolicyBusy(f"handle {self._active.handle_id} still active")
        if policy_id not in self.specs:
            raise SchemaError(f"unknown policy: {policy_id}")
        handle = PolicyHandle(self._next_handle, policy_id, instruction)
        self._next_handle += 1
        self._active = handle
        return handle

    def change(self, handle: PolicyHandle, new_policy_id: str, new_instruction: Instruction) -> PolicyHandle:
        if self._active is None or handle is not self._active or handle.state != HANDLE_ACTIVE:
            raise PolicyNotActive("change requires the active handle")
        if new_policy_id not in self.specs:
            raise SchemaError(f"unknown policy: {new_policy_id}")
        # Atomic swap: the old handle dies and the new one is active in
        # one step, so the single-active invariant is never observable
        # as violated.
        handle.state = HANDLE_TERMINATED
        new_handle = PolicyHandle(self._next_handle, new_policy_id, new_instruction)
        self._next_handle += 1
        self._active = new_handle
        return new_handle

    def terminate(self, handle: PolicyHandle) -> PolicyHandle:
        if self._active is None or handle is not self._active or handle.state != HANDLE_ACTIVE:
            raise PolicyNotActive("terminate requires the active handle")
        handle.state = HANDLE_TERMINATED
        self._active = None
        return handle

    def terminate_active(self) -> PolicyHandle:
        if self._active is None:
            raise PolicyNotActive("no active policy")
        return self.terminate(self._active)

    def execute(self, handle: PolicyHandle, world: SimWorld) -> tuple[Outcome, Trajectory]:
        """Run the active handle for one attempt and terminate it.

        Draw order per execution: success draw, class draw (inside
        sample_outcome), then one steps-taken draw. The handle is
        terminated even when the precondition check rejects the attempt,
        so a failed start never wedges the pool.
        """
        if self._active is None or handle is not self._active or handle.state != HANDLE_ACTIVE:
            raise PolicyNotActive("execute requires the active handle")
        spec = self.specs[handle.policy_id]
        subtask = world.scenario.subtask(spec.subtask_id)
        if not in_precondition(world.state, subtask, spec.direction):
            self.terminate(handle)
            raise PreconditionError(
                f"{spec.policy_id}: {spec.subtask_id} ({spec.direction}) precondition violated"
            )
        rate = spec.curve.rate_at(self.trajectory_count(spec.policy_id))
        outcome = sample_outcome(
            world.state, subtask, rate, subtask.nondegrading_fraction, world.rng, spec.direction
        )
        steps = world.rng.randint(spec.steps_min, spec.steps_max)
        outcome = replace(outcome, steps_taken=steps)
        start_tick = world.state.tick
        world.state = apply_outcome(world.state, subtask, outcome, spec.direction)
        world.steps_executed += steps
        exec_no = self._next_exec
        self._next_exec += 1
        trajectory = Trajectory(
            trajectory_id=f"e{world.episode}-x{exec_no}",
            policy_id=spec.policy_id,
            direction=spec.direction,
            instruction=handle.instruction,
            steps=synth_steps(
                start_tick,
                steps,
                {"policy": spec.policy_id, "episode": world.episode, "exec": exec_no},
            ),
            outcome=outcome,
            episode=world.episode,
        )
        self._last = {
            "last_outcome": 1 if outcome.success else 0,
            "last_direction": _DIRECTION_CODE.get(spec.direction, -1),
            "last_failure_degrading": 1 if outcome.failure_class == "Degrading" else 0,
        }
        self.terminate(handle)
        return outcome, trajectory

    def stats(self, world: SimWorld) -> dict[str, int]:
        """Scalar robot status snapshot for the agent."""
        return {
            "policy_active": 1 if self._active is not None else 0,
            "steps_executed": world.steps_executed,
            **self._last,
        }


# Operation-name aliases.

def pool_start(pool: PolicyPool, policy_id: str, instruction: Instruction) -> PolicyHandle:
    return pool.start(policy_id, instruction)


def pool_change(pool: PolicyPool, handle: PolicyHandle, new_policy_id: str, new_instruction: Instruction) -> PolicyHandle:
    return pool.change(handle, new_policy_id, new_instruction)


def pool_execute(pool: PolicyPool, handle: PolicyHandle, world: SimWorld) -> tuple[Outcome, Trajectory]:
    return pool.execute(handle, world)
