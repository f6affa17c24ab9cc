"""Wire- and dataset-level record types shared across subsystems."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .canon import digest
from .errors import SchemaError
from .simenv import DIRECTIONS, Outcome


@dataclass
class Instruction:
    """Language instruction conditioning a policy, generated by template
    from the scenario's phrase for (subtask, direction)."""

    text: str
    subtask_id: str
    direction: str

    def to_dict(self) -> dict:
        return {"text": self.text, "subtask_id": self.subtask_id, "direction": self.direction}

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        return cls(d["text"], d["subtask_id"], d["direction"])


@dataclass
class Trajectory:
    """One policy execution: step digests, outcome, provenance.

    Steps are ``[t, obs_digest, q_digest, a_digest]`` with strictly
    increasing ``t``. Symbolic executions store content digests; real
    vector data (toy policy demos) goes into ``extension``.
    """

    trajectory_id: str
    policy_id: str
    direction: str
    instruction: Instruction
    steps: list[list]
    outcome: Outcome
    episode: int
    extension: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "trajectory_id": self.trajectory_id,
            "policy_id": self.policy_id,
            "direction": self.direction,
            "instruction": self.instruction.to_dict(),
            "steps": self.steps,
            "outcome": self.outcome.to_dict(),
            "episode": self.episode,
        }
        if self.extension:
            d["extension"] = self.extension
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        if d["direction"] not in DIRECTIONS:
            raise SchemaError(f"bad trajectory direction: {d['direction']}")
        return cls(
            trajectory_id=d["trajectory_id"],
            policy_id=d["policy_id"],
            direction=d["direction"],
            instruction=Instruction.from_dict(d["instruction"]),
            steps=[list(s) for s in d["steps"]],
            outcome=Outcome.from_dict(d["outcome"]),
            episode=d["episode"],
            extension=dict(d.get("extension", {})),
        )


@dataclass
class EntangledPair:
    """A forward trajectory coupled with the inverse that reset it."""

    pair_id: str
    forward: Trajectory
    inverse: Trajectory

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "forward": self.forward.to_dict(),
            "inverse": self.inverse.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntangledPair":
        return cls(d["pair_id"], Trajectory.from_dict(d["forward"]), Trajectory.from_dict(d["inverse"]))


def synth_steps(start_tick: int, n_steps: int, seed_material: dict) -> list[list]:
    """Deterministic per-step digests for a symbolic execution.

    One base hash of the seed material, then one hash per step sliced
    into the observation/proprioception/action digests.
    """
    base = digest(seed_material).encode("ascii")
    steps = []
    for j in range(max(n_steps, 1)):
        h = hashlib.sha256(base + j.to_bytes(4, "big")).hexdigest()
        steps.append([start_tick + j, h[:16], h[16:32], h[32:48]])
    return steps
