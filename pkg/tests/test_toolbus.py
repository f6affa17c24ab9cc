import io
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillcycle.collector import Dataset, ScriptedHuman
from skillcycle.errors import DuplicateTool, FramingError
from skillcycle.policypool import PolicyPool
from skillcycle.records import Instruction
from skillcycle.rng import episode_rng
from skillcycle.simenv import SimWorld
from skillcycle.toolbus import (
    BusServer,
    ERR_BAD_ARGS,
    ERR_ENV_VIOLATION,
    ERR_HUMAN_UNAVAILABLE,
    ERR_PARSE,
    ERR_POLICY_NOT_ACTIVE,
    ERR_UNKNOWN_TOOL,
    STANDARD_DESCRIPTORS,
    ToolDescriptor,
    ToolRegistry,
    ToolRequest,
    ToolResponse,
    build_standard_registry,
    decode_message,
    encode_message,
    handle_line,
    serve_stream,
    socket_call,
)


class TestFraming:
    def test_golden_tool_list_bytes(self):
        assert encode_message(ToolRequest(1, "tool/list")) == b'{"id":1,"method":"tool/list"}\n'

    def test_golden_call_bytes(self):
        req = ToolRequest(2, "tool/call", {"name": "env_summary", "arguments": {}})
        assert (
            encode_message(req)
            == b'{"id":2,"method":"tool/call","params":{"arguments":{},"name":"env_summary"}}\n'
        )

    def test_golden_error_bytes(self):
        resp = ToolResponse(3, error={"code": -32601, "message": "unknown tool: x"})
        assert (
            encode_message(resp)
            == b'{"error":{"code":-32601,"message":"unknown tool: x"},"id":3}\n'
        )

    def test_encode_is_idempotent_canonicalization(self):
        req = ToolRequest(9, "tool/call", {"name": "t", "arguments": {"b": 1, "a": 2}})
        once = encode_message(req)
        again = encode_message(decode_message(once))
        assert once == again

    @pytest.mark.parametrize(
        "line",
        [
            b"not json at all\n",
            b'{"method":"tool/list","id":1}\n',  # non-canonical key order
            b'{"id": 1,"method":"tool/list"}\n',  # whitespace
            b'{"id":1,"method":"tool/poke"}\n',  # unknown method
            b'{"id":-1,"method":"tool/list"}\n',  # negative id
            b'{"id":true,"method":"tool/list"}\n',  # boolean id
            b'{"id":1}\n',  # neither request nor response
            b'{"id":1,"result":{},"error":{"code":1,"message":"m"}}\n',  # both
            b'{"id":1,"method":"tool/list","params":{"name":"x","arguments":{}}}\n',  # params on list
            b'{"id":1,"method":"tool/call","params":{"name":"x"}}\n',  # missing arguments
            b'[1,2,3]\n',
            b'{"error":{"code":"x","message":"m"},"id":1}\n',  # non-integer code
        ],
    )
    def test_decode_rejects_non_canonical_or_invalid(self, line):
        with pytest.raises(FramingError):
            decode_message(line)

    def test_decode_response_success(self):
        resp = decode_message(b'{"id":4,"result":{"ok":1}}\n')
        assert isinstance(resp, ToolResponse)
        assert resp.result == {"ok": 1}


_ARG_VALUES = st.one_of(
    st.integers(min_value=-(10**9), max_value=10**9),
    st.booleans(),
    st.text(st.characters(min_codepoint=32, max_codepoint=126), max_size=12),
    st.floats(allow_nan=False, allow_infinity=False, width=32),
)
_NAMES = st.text(st.characters(whitelist_categories=("Ll",), max_codepoint=122), min_size=1, max_size=10)


@st.composite
def _messages(draw):
    kind = draw(st.sampled_from(["list", "call", "result", "error"]))
    msg_id = draw(st.integers(min_value=0, max_value=2**32))
    if kind == "list":
        return ToolRequest(msg_id, "tool/list")
    if kind == "call":
        args = draw(st.dictionaries(_NAMES, _ARG_VALUES, max_size=4))
        return ToolRequest(msg_id, "tool/call", {"name": draw(_NAMES), "arguments": args})
    if kind == "result":
        return ToolResponse(msg_id, result=draw(st.dictionaries(_NAMES, _ARG_VALUES, max_size=4)))
    return ToolResponse(
        msg_id,
        error={"code": draw(st.integers(min_value=-40000, max_value=40000)), "message": draw(_NAMES)},
    )


@given(_messages())
@settings(max_examples=300, deadline=None)
def test_round_trip_random_messages(msg):
    assert decode_message(encode_message(msg)) == msg


def _fresh_stack(vanity_scenario, vanity_specs, with_human=True):
    world = SimWorld(vanity_scenario, episode_rng(3, 0))
    pool = PolicyPool(vanity_specs)
    pool.set_all_counts(250)
    dataset = Dataset()
    human = ScriptedHuman() if with_human else None
    registry = build_standard_registry(world, pool, dataset, human)
    return world, pool, dataset, registry


def _call(registry, name, arguments, msg_id=1):
    req = ToolRequest(msg_id, "tool/call", {"name": name, "arguments": arguments})
    return registry.dispatch(decode_message(encode_message(req)))


class TestDispatch:
    def test_env_summary_fresh_scene(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = _call(registry, "env_summary", {})
        structured = resp.result["structured"]
        assert structured["drawer"] == "Open"
        assert structured["spill"] == "Present"
        assert structured["tick"] == 0
        assert structured["objects"] == {
            "body_lotion": "AtStart",
            "lipstick": "AtStart",
            "primer": "AtStart",
            "tissue": "AtStart",
        }

    def test_unknown_tool_code(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = _call(registry, "no_such_tool", {})
        assert resp.error["code"] == ERR_UNKNOWN_TOOL == -32601

    def test_terminate_with_nothing_active(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = _call(registry, "terminate_policy", {})
        assert resp.error["code"] == ERR_POLICY_NOT_ACTIVE == 1001

    def test_schema_violations(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        missing = _call(registry, "start_policy", {"policy_id": "place_lotion_forward"})
        assert missing.error["code"] == ERR_BAD_ARGS == -32602
        wrong_type = _call(registry, "call_human", {"reason": 5, "subtask_id": "place_lotion"})
        assert wrong_type.error["code"] == ERR_BAD_ARGS
        unknown_arg = _call(registry, "env_summary", {"verbose": True})
        assert unknown_arg.error["code"] == ERR_BAD_ARGS

    def test_start_policy_runs_one_attempt(self, vanity_scenario, vanity_specs):
        world, pool, dataset, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = _call(
            registry,
            "start_policy",
            {"policy_id": "place_lotion_forward", "instruction": "place the body lotion", "direction": "Forward"},
        )
        assert resp.result["outcome"]["kind"] in ("Success", "Failure")
        assert pool.active_handle is None  # attempt terminates the handle
        assert resp.result["trajectory"]["policy_id"] == "place_lotion_forward"

    def test_precondition_violation_maps_to_1002(self, vanity_scenario, vanity_specs):
        world, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        world.state.objects["body_lotion"] = "Tipped"
        resp = _call(
            registry,
            "start_policy",
            {"policy_id": "place_lotion_forward", "instruction": "x", "direction": "Forward"},
        )
        assert resp.error["code"] == ERR_ENV_VIOLATION == 1002

    def test_busy_start_maps_to_1001(self, vanity_scenario, vanity_specs):
        world, pool, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        pool.start("place_lotion_forward", Instruction("x", "place_lotion", "Forward"))
        resp = _call(
            registry,
            "start_policy",
            {"policy_id": "place_primer_forward", "instruction": "x", "direction": "Forward"},
        )
        assert resp.error["code"] == ERR_POLICY_NOT_ACTIVE

    def test_change_policy_swaps_active_handle(self, vanity_scenario, vanity_specs):
        world, pool, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        first = pool.start("place_lotion_forward", Instruction("x", "place_lotion", "Forward"))
        resp = _call(registry, "change_policy", {"policy_id": "place_primer_forward", "instruction": "y"})
        assert resp.result["policy_id"] == "place_primer_forward"
        assert first.state == "Terminated"
        assert pool.active_handle.handle_id == resp.result["handle_id"]

    def test_change_policy_without_active_is_1001(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = _call(registry, "change_policy", {"policy_id": "place_primer_forward", "instruction": "y"})
        assert resp.error["code"] == ERR_POLICY_NOT_ACTIVE

    def test_call_human_unavailable_is_1003(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs, with_human=False)
        resp = _call(registry, "call_human", {"reason": "stuck", "subtask_id": "place_lotion"})
        assert resp.error["code"] == ERR_HUMAN_UNAVAILABLE == 1003

    def test_response_id_matches_request(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        for msg_id in (0, 5, 1234):
            resp = _call(registry, "env_summary", {}, msg_id=msg_id)
            assert resp.id == msg_id

    def test_tool_list_sorted_standard_set(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        resp = registry.dispatch(ToolRequest(1, "tool/list"))
        names = [t["name"] for t in resp.result["tools"]]
        assert names == [
            "append_trajectory",
            "call_human",
            "change_policy",
            "env_summary",
            "fetch_robot_stats",
            "start_policy",
            "terminate_policy",
        ]

    def test_standard_descriptor_schemas(self):
        schemas = {d.name: set(d.arg_schema) for d in STANDARD_DESCRIPTORS}
        assert schemas == {
            "start_policy": {"policy_id", "instruction", "direction"},
            "terminate_policy": set(),
            "change_policy": {"policy_id", "instruction"},
            "env_summary": set(),
            "fetch_robot_stats": set(),
            "call_human": {"reason", "subtask_id"},
            "append_trajectory": {"trajectory"},
        }


class TestRegistry:
    def test_register_then_list(self):
        registry = ToolRegistry()
        registry.register(ToolDescriptor("ping", "ping", {}), lambda args: {"pong": 1})
        assert [d.name for d in registry.descriptors()] == ["ping"]

    def test_duplicate_rejected(self):
        registry = ToolRegistry()
        registry.register(ToolDescriptor("ping", "ping", {}), lambda args: {})
        with pytest.raises(DuplicateTool):
            registry.register(ToolDescriptor("ping", "again", {}), lambda args: {})

    def test_seven_standard_tools(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        assert len(registry.descriptors()) == 7


class TestTransports:
    def test_handle_line_parse_error(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        out = decode_message(handle_line(registry, b"garbage\n"))
        assert out.error["code"] == ERR_PARSE == -32700

    def test_stream_transport(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        reader = io.BytesIO(
            encode_message(ToolRequest(1, "tool/list"))
            + encode_message(ToolRequest(2, "tool/call", {"name": "env_summary", "arguments": {}}))
        )
        writer = io.BytesIO()
        handled = serve_stream(registry, reader, writer)
        assert handled == 2
        lines = writer.getvalue().splitlines(keepends=True)
        first, second = decode_message(lines[0]), decode_message(lines[1])
        assert first.id == 1 and "tools" in first.result
        assert second.id == 2 and "structured" in second.result

    def test_socket_transport(self, vanity_scenario, vanity_specs):
        _, _, _, registry = _fresh_stack(vanity_scenario, vanity_specs)
        server = BusServer(registry)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            resp = socket_call(server.server_address, ToolRequest(7, "tool/list"))
            assert resp.id == 7
            assert len(resp.result["tools"]) == 7
        finally:
            server.shutdown()
            server.server_close()
