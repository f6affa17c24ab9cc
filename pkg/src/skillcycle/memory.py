"""File-backed structured agent memory: embeddings, search, and management.

The agent's decision context is a three-part structured state: a role
identity (operating mode plus the tools that mode may call), a task-level
memory (the global goal, its subtasks and their statuses), and a working
memory (active skill plus the append-only tool invocation history).

Stores persist one JSON file per record under ``<root>/records/`` with a
``manifest.json`` index; every write goes to a temp file and is renamed
into place, so a store is never observed half-written. Embeddings are
hashed bags of words: deterministic, dependency-free, and good enough for
the exact/near-exact retrieval this system needs.
"""

from __future__ import annotations

import math
import os
import re
import time
from dataclasses import dataclass, field

from .canon import canonical_dumps, digest, rfc3339
from .errors import InvalidTransition, NotFound, StorageError

EMBED_DIM = 256

# Fixed token hash: FNV-1a, 64-bit (offset basis / prime per the FNV spec).
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_TOKEN_RE = re.compile(r"[0-9a-z]+")

MODE_DATA_COLLECTOR = "DataCollector"
MODE_TASK_EXECUTOR = "TaskExecutor"

STANDARD_TOOLS = (
    "append_trajectory",
    "call_human",
    "change_policy",
    "env_summary",
    "fetch_robot_stats",
    "start_policy",
    "terminate_policy",
)

# Fixed tool set per operating mode. The executor never appends data
# directly; deployment trajectories are harvested from the event log.
MODE_TOOLSETS = {
    MODE_DATA_COLLECTOR: frozenset(STANDARD_TOOLS),
    MODE_TASK_EXECUTOR: frozenset(t for t in STANDARD_TOOLS if t != "append_trajectory"),
}

STATUS_PENDING = "Pending"
STATUS_ACTIVE = "Active"
STATUS_DONE = "Done"
STATUS_FAILED = "Failed"
STATUS_ESCALATED = "Escalated"

SUBTASK_STATUSES = (STATUS_PENDING, STATUS_ACTIVE, STATUS_DONE, STATUS_FAILED, STATUS_ESCALATED)

_ALLOWED_TRANSITIONS = {
    (STATUS_PENDING, STATUS_ACTIVE),
    (STATUS_ACTIVE, STATUS_DONE),
    (STATUS_ACTIVE, STATUS_FAILED),
    (STATUS_ACTIVE, STATUS_ESCALATED),
    (STATUS_FAILED, STATUS_ACTIVE),
}

RECORD_KINDS = ("Role", "Task", "Working", "Note")


def _fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def embed(text: str) -> list[float]:
    """Hashed bag-of-words embedding: 256 buckets, unit L2 norm.

    Lowercase, split on non-alphanumerics, FNV-1a-64 each token into a
    bucket, accumulate counts, normalize. No tokens yields the zero
    vector. Deterministic across processes and platforms.
    """
    vec = [0.0] * EMBED_DIM
    tokens = _TOKEN_RE.findall(text.lower())
    for tok in tokens:
        vec[_fnv1a64(tok) % EMBED_DIM] += 1.0
    norm = math.sqrt(sum(v * v for v in vec))
    if norm > 0.0:
        vec = [v / norm for v in vec]
    return vec


@dataclass
class RoleIdentity:
    """Operating mode and the fixed tool set that mode may invoke."""

    mode: str
    allowed_tools: frozenset[str]

    @classmethod
    def for_mode(cls, mode: str) -> "RoleIdentity":
        if mode not in MODE_TOOLSETS:
            raise NotFound(f"unknown mode: {mode}")
        return cls(mode=mode, allowed_tools=MODE_TOOLSETS[mode])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "allowed_tools": sorted(self.allowed_tools)}

    @classmethod
    def from_dict(cls, d: dict) -> "RoleIdentity":
        return cls(mode=d["mode"], allowed_tools=frozenset(d["allowed_tools"]))


@dataclass
class SubtaskEntry:
    subtask_id: str
    description: str
    status: str = STATUS_PENDING

    def to_dict(self) -> dict:
        return {"subtask_id": self.subtask_id, "description": self.description, "status": self.status}

    @classmethod
    def from_dict(cls, d: dict) -> "SubtaskEntry":
        return cls(d["subtask_id"], d["description"], d["status"])


@dataclass
class TaskMemory:
    """Global task, its ordered subtasks, and per-subtask retry counts.

    At most one subtask is Active; statuses move Pending -> Active ->
    {Done, Failed, Escalated}, with Failed -> Active allowed for retries.
    ``attempt_counts`` increments exactly on Failed -> Active.
    """

    task_id: str
    goal_text: str
    subtasks: list[SubtaskEntry] = field(default_factory=list)
    attempt_counts: dict[str, int] = field(default_factory=dict)

    def entry(self, subtask_id: str) -> SubtaskEntry:
        for e in self.subtasks:
            if e.subtask_id == subtask_id:
                return e
        raise NotFound(f"unknown subtask: {subtask_id}")

    def active_subtask(self) -> str | None:
        for e in self.subtasks:
            if e.status == STATUS_ACTIVE:
                return e.subtask_id
        return None

    def update_status(self, subtask_id: str, new_status: str) -> "TaskMemory":
        entry = self.entry(subtask_id)
        old = entry.status
        if (old, new_status) not in _ALLOWED_TRANSITIONS:
            raise InvalidTransition(f"{subtask_id}: {old} -> {new_status} not allowed")
        if new_status == STATUS_ACTIVE and self.active_subtask() is not None:
            raise InvalidTransition(f"{subtask_id}: another subtask is already Active")
        entry.status = new_status
        if old == STATUS_FAILED and new_status == STATUS_ACTIVE:
            self.attempt_counts[subtask_id] = self.attempt_counts.get(subtask_id, 0) + 1
        return self

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "goal_text": self.goal_text,
            "subtasks": [e.to_dict() for e in self.subtasks],
            "attempt_counts": dict(sorted(self.attempt_counts.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskMemory":
        return cls(
            task_id=d["task_id"],
            goal_text=d["goal_text"],
            subtasks=[SubtaskEntry.from_dict(e) for e in d["subtasks"]],
            attempt_counts=dict(d["attempt_counts"]),
        )


@dataclass
class WorkingMemory:
    """Short-term execution context: active skill and tool-call history.

    History entries are ``(sequence_no, tool_name, args_digest,
    result_digest, timestamp)`` with strictly increasing sequence numbers;
    the list is append-only within a session.
    """

    active_skill: str | None = None
    tool_history: list[tuple] = field(default_factory=list)

    def record_tool(self, tool_name: str, args, result, timestamp: int) -> None:
        seq = len(self.tool_history)
        self.tool_history.append((seq, tool_name, digest(args), digest(result), timestamp))

    def record_tool_digested(self, tool_name: str, args_digest: str, result_digest: str, timestamp: int) -> None:
        """Same as record_tool with digests the caller already computed
        (e.g. straight from the wire bytes)."""
        seq = len(self.tool_history)
        self.tool_history.append((seq, tool_name, args_digest, result_digest, timestamp))

    def to_dict(self) -> dict:
        return {
            "active_skill": self.active_skill,
            "tool_history": [list(t) for t in self.tool_history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkingMemory":
        return cls(
            active_skill=d["active_skill"],
            tool_history=[tuple(t) for t in d["tool_history"]],
        )


@dataclass
class MemoryState:
    """The full structured memory triple: role, task, working."""

    role: RoleIdentity
    task: TaskMemory
    working: WorkingMemory

    def to_dict(self) -> dict:
        return {"role": self.role.to_dict(), "task": self.task.to_dict(), "working": self.working.to_dict()}

    def serialize(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryState":
        return cls(
            role=RoleIdentity.from_dict(d["role"]),
            task=TaskMemory.from_dict(d["task"]),
            working=WorkingMemory.from_dict(d["working"]),
        )

    @classmethod
    def deserialize(cls, text: str) -> "MemoryState":
        import json

        return cls.from_dict(json.loads(text))


@dataclass
class MemoryRecord:
    record_id: int
    kind: str
    text: str
    embedding: list[float]
    created_at: str

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "kind": self.kind,
            "text": self.text,
            "embedding": self.embedding,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryRecord":
        return cls(d["record_id"], d["kind"], d["text"], d["embedding"], d["created_at"])


def _atomic_write(path: str, data: str) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="ascii") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"write failed: {path}: {exc}") from exc


class MemoryStore:
    """Directory-backed record store with embedding search.

    Layout: ``<root>/manifest.json`` holding the next record id and the
    record index, and ``<root>/records/<record_id>.json`` per record.
    Single writer, many readers; each write is atomic (temp + rename).
    """

    def __init__(self, root: str, clock=time.time):
        self.root = root
        self._clock = clock
        self._records: dict[int, MemoryRecord] = {}
        self._next_id = 0
        try:
            os.makedirs(os.path.join(root, "records"), exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot open store at {root}: {exc}") from exc
        self._load()

    # -- persistence ------------------------------------------------------

    def _manifest_path(self) -> str:
        return os.path.join(self.root, "manifest.json")

    def _record_path(self, record_id: int) -> str:
        return os.path.join(self.root, "records", f"{record_id}.json")

    def _load(self) -> None:
        import json

        path = self._manifest_path()
        if not os.path.exists(path):
            self._write_manifest()
            return
        try:
            with open(path, encoding="ascii") as f:
                manifest = json.load(f)
            self._next_id = manifest["next_record_id"]
            for rid in manifest["record_ids"]:
                with open(self._record_path(rid), encoding="ascii") as f:
                    self._records[rid] = MemoryRecord.from_dict(json.load(f))
        except OSError as exc:
            raise StorageError(f"cannot read store at {self.root}: {exc}") from exc

    def _write_manifest(self) -> None:
        manifest = {"next_record_id": self._next_id, "record_ids": sorted(self._records)}
        _atomic_write(self._manifest_path(), canonical_dumps(manifest))

    # -- operations -------------------------------------------------------

    def put(self, kind: str, text: str) -> int:
        """Persist one record; returns its unique, monotone id."""
        if kind not in RECORD_KINDS:
            raise NotFound(f"unknown record kind: {kind}")
        record = MemoryRecord(
            record_id=self._next_id,
            kind=kind,
            text=text,
            embedding=embed(text),
            created_at=rfc3339(self._clock()),
        )
        _atomic_write(self._record_path(record.record_id), canonical_dumps(record.to_dict()))
        self._records[record.record_id] = record
        self._next_id += 1
        self._write_manifest()
        return record.record_id

    def get(self, record_id: int) -> MemoryRecord:
        if record_id not in self._records:
            raise NotFound(f"no record {record_id}")
        return self._records[record_id]

    def count(self) -> int:
        return len(self._records)

    def search(self, query: str, k: int) -> list[tuple[int, float]]:
        """Top-k records by cosine score, ties broken by ascending id.

        A query with no tokens embeds to the zero vector and matches
        nothing. Stored embeddings are unit (or zero), so cosine is a
        plain dot product.
        """
        q = embed(query)
        if not any(q):
            return []
        scored = []
        for rid in sorted(self._records):
            e = self._records[rid].embedding
            score = sum(a * b for a, b in zip(q, e))
            scored.append((rid, score))
        scored.sort(key=lambda t: (-t[1], t[0]))
        return scored[: max(k, 0)]

    def put_state(self, state: MemoryState) -> dict[str, int]:
        """Snapshot the full memory triple as three records."""
        return {
            "Role": self.put("Role", canonical_dumps(state.role.to_dict())),
            "Task": self.put("Task", canonical_dumps(state.task.to_dict())),
            "Working": self.put("Working", canonical_dumps(state.working.to_dict())),
        }

    def update_task(self, task_memory: TaskMemory, subtask_id: str, new_status: str) -> TaskMemory:
        """Apply a status transition and persist the updated task memory."""
        task_memory.update_status(subtask_id, new_status)
        self.put("Task", canonical_dumps(task_memory.to_dict()))
        return task_memory


# Module-level aliases for the operation names used throughout the docs.

def mem_put(store: MemoryStore, kind: str, text: str) -> int:
    return store.put(kind, text)


def mem_search(store: MemoryStore, query: str, k: int) -> list[tuple[int, float]]:
    return store.search(query, k)


def mem_update_task(store: MemoryStore, task_memory: TaskMemory, subtask_id: str, new_status: str) -> TaskMemory:
    return store.update_task(task_memory, subtask_id, new_status)
