import json
import math
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillcycle.canon import canonical_dumps
from skillcycle.errors import InvalidTransition, NotFound
from skillcycle.memory import (
    EMBED_DIM,
    MemoryState,
    MemoryStore,
    RoleIdentity,
    SubtaskEntry,
    TaskMemory,
    WorkingMemory,
    embed,
    mem_put,
    mem_search,
    mem_update_task,
)


# Independent re-implementation of the embedding for oracle checks:
# FNV-1a 64-bit per token, 256 buckets, L2 normalization.
def _reference_embed(text):
    import re

    vec = [0.0] * 256
    for tok in re.findall(r"[0-9a-z]+", text.lower()):
        h = 0xCBF29CE484222325
        for b in tok.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) % 2**64
        vec[h % 256] += 1.0
    norm = math.sqrt(sum(v * v for v in vec))
    return [v / norm for v in vec] if norm else vec


def _cosine(a, b):
    return sum(x * y for x, y in zip(a, b))


class TestEmbed:
    def test_empty_text_is_zero_vector(self):
        assert embed("") == [0.0] * EMBED_DIM

    def test_repeated_token_normalizes_to_single_one(self):
        vec = embed("drawer drawer")
        nonzero = [v for v in vec if v != 0.0]
        assert nonzero == [1.0]

    def test_cosine_against_reference_implementation(self):
        a, b = "close the drawer", "shut the drawer"
        expected = _cosine(_reference_embed(a), _reference_embed(b))
        got = _cosine(embed(a), embed(b))
        assert got == pytest.approx(expected, abs=1e-12)
        # two of three tokens shared; only a bucket collision could move this
        assert got == pytest.approx(2 / 3, abs=1e-9)

    def test_unit_norm_or_zero(self):
        for text in ["primer in drawer", "a b c d e f", "", "   ", "x"]:
            norm = math.sqrt(sum(v * v for v in embed(text)))
            assert norm == 0.0 or abs(norm - 1.0) <= 1e-9

    def test_deterministic_across_processes(self):
        code = (
            "from skillcycle.memory import embed;"
            "import hashlib, json;"
            "print(hashlib.sha256(json.dumps(embed('close the drawer')).encode()).hexdigest())"
        )
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
        import hashlib

        local = hashlib.sha256(json.dumps(embed("close the drawer")).encode()).hexdigest()
        assert out.stdout.strip() == local


class TestStore:
    def test_put_then_reload_round_trip(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        rid = mem_put(store, "Note", "drawer is open")
        reopened = MemoryStore(str(tmp_path / "mem"))
        assert reopened.get(rid).text == "drawer is open"

    def test_record_ids_increase(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        first = store.put("Note", "one")
        second = store.put("Note", "two")
        assert second > first

    def test_hundred_records_survive_reopen(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        for i in range(100):
            store.put("Note", f"record number {i}")
        reopened = MemoryStore(str(tmp_path / "mem"))
        assert reopened.count() == 100

    def test_unknown_kind_rejected(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        with pytest.raises(NotFound):
            store.put("Junk", "x")

    def test_record_file_layout(self, tmp_path):
        root = tmp_path / "mem"
        store = MemoryStore(str(root))
        rid = store.put("Note", "spill wiped")
        with open(root / "records" / f"{rid}.json") as f:
            record = json.load(f)
        assert set(record) == {"record_id", "kind", "text", "embedding", "created_at"}
        assert len(record["embedding"]) == EMBED_DIM
        with open(root / "manifest.json") as f:
            manifest = json.load(f)
        assert rid in manifest["record_ids"]


class TestSearch:
    def test_self_similarity_is_one(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        rid = store.put("Note", "primer in drawer")
        results = mem_search(store, "primer in drawer", 1)
        assert results[0][0] == rid
        assert results[0][1] >= 1 - 1e-9

    def test_empty_query_returns_nothing(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        store.put("Note", "something")
        assert mem_search(store, "", 5) == []

    def test_scores_match_brute_force(self, tmp_path):
        texts = ["the lotion tipped over", "close the drawer now", "wipe the spill with tissue"]
        store = MemoryStore(str(tmp_path / "mem"))
        ids = [store.put("Note", t) for t in texts]
        query = "the drawer tipped"
        expected = sorted(
            ((rid, _cosine(_reference_embed(query), _reference_embed(t))) for rid, t in zip(ids, texts)),
            key=lambda p: (-p[1], p[0]),
        )
        got = mem_search(store, query, 3)
        assert [r for r, _ in got] == [r for r, _ in expected]
        for (_, s1), (_, s2) in zip(got, expected):
            assert s1 == pytest.approx(s2, abs=1e-12)

    def test_k_caps_results(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        for i in range(3):
            store.put("Note", f"drawer note {i}")
        assert len(mem_search(store, "drawer", 10)) == 3


def _fresh_task():
    return TaskMemory(
        task_id="t1",
        goal_text="tidy the table",
        subtasks=[SubtaskEntry("a", "first"), SubtaskEntry("b", "second")],
    )


class TestTaskTransitions:
    def test_pending_to_active(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        tm = mem_update_task(store, _fresh_task(), "a", "Active")
        assert tm.entry("a").status == "Active"
        assert tm.active_subtask() == "a"

    def test_done_cannot_reactivate(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        tm = _fresh_task()
        mem_update_task(store, tm, "a", "Active")
        mem_update_task(store, tm, "a", "Done")
        with pytest.raises(InvalidTransition):
            mem_update_task(store, tm, "a", "Active")

    def test_retry_counts_failed_to_active(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        tm = _fresh_task()
        mem_update_task(store, tm, "a", "Active")
        mem_update_task(store, tm, "a", "Failed")
        mem_update_task(store, tm, "a", "Active")  # first retry
        mem_update_task(store, tm, "a", "Failed")
        mem_update_task(store, tm, "a", "Active")  # second retry
        assert tm.attempt_counts["a"] == 2

    def test_unknown_subtask(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        with pytest.raises(NotFound):
            mem_update_task(store, _fresh_task(), "zzz", "Active")

    def test_single_active_enforced(self):
        tm = _fresh_task()
        tm.update_status("a", "Active")
        with pytest.raises(InvalidTransition):
            tm.update_status("b", "Active")


TRANSITION_TARGETS = ["Active", "Done", "Failed", "Escalated"]


@given(
    st.lists(
        st.tuples(st.sampled_from(["a", "b"]), st.sampled_from(TRANSITION_TARGETS)),
        max_size=40,
    )
)
@settings(max_examples=200, deadline=None)
def test_status_machine_never_breaks_invariants(moves):
    tm = _fresh_task()
    done_ever = set()
    for sid, target in moves:
        try:
            tm.update_status(sid, target)
        except InvalidTransition:
            continue
        if target == "Done":
            done_ever.add(sid)
    active = [e for e in tm.subtasks if e.status == "Active"]
    assert len(active) <= 1
    for sid in done_ever:
        assert tm.entry(sid).status == "Done"


def _state_sample():
    role = RoleIdentity.for_mode("DataCollector")
    task = _fresh_task()
    task.update_status("a", "Active")
    working = WorkingMemory(active_skill="collection")
    working.record_tool("env_summary", {}, {"ok": 1}, 3)
    return MemoryState(role, task, working)


class TestStateRoundTrip:
    def test_serialize_deserialize_identity(self):
        state = _state_sample()
        blob = state.serialize()
        again = MemoryState.deserialize(blob)
        assert again.serialize() == blob
        assert again.to_dict() == state.to_dict()

    def test_put_state_kinds(self, tmp_path):
        store = MemoryStore(str(tmp_path / "mem"))
        ids = store.put_state(_state_sample())
        assert set(ids) == {"Role", "Task", "Working"}
        for kind, rid in ids.items():
            record = store.get(rid)
            assert record.kind == kind
            json.loads(record.text)  # payload is canonical JSON

    def test_canonical_form_is_stable(self):
        state = _state_sample()
        assert state.serialize() == canonical_dumps(json.loads(state.serialize()))
