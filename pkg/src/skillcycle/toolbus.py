"""Wire-level tool invocation: framing, registry, dispatch, transports.

Messages are newline-delimited canonical JSON (sorted keys, no
insignificant whitespace, ASCII). A request is ``{"id": n, "method":
"tool/list"}`` or ``{"id": n, "method": "tool/call", "params": {"name":
..., "arguments": {...}}}``; a response echoes the id and carries exactly
one of ``result`` or ``error``. Decoding is strict: a line that is not
the canonical encoding of a valid message raises FramingError rather
than being repaired.

Error code space: JSON-RPC-style negatives for protocol errors (-32700
unparseable line, -32601 unknown tool, -32602 argument schema violation)
and 1000+ for domain errors (1001 policy lifecycle violation, 1002
environment/precondition violation, 1003 human unavailable).

Three transports share the framing: the in-process channel used by the
agent loops, a line-oriented stream server (stdio), and a TCP socket
server. Each connection is served strictly FIFO.
"""

from __future__ import annotations

import json
import socket
import socketserver
from dataclasses import dataclass, field

from .canon import canonical_dumps
from .errors import (
    DomainError,
    DuplicateTool,
    FramingError,
    PolicyBusy,
    PolicyNotActive,
    PreconditionError,
    SchemaError,
)
from .records import Instruction, Trajectory

METHOD_CALL = "tool/call"
METHOD_LIST = "tool/list"

ERR_PARSE = -32700
ERR_UNKNOWN_TOOL = -32601
ERR_BAD_ARGS = -32602
ERR_POLICY_NOT_ACTIVE = 1001
ERR_ENV_VIOLATION = 1002
ERR_HUMAN_UNAVAILABLE = 1003

_ARG_TYPES = {
    "string": str,
    "integer": int,
    "number": (int, float),
    "boolean": bool,
    "object": dict,
    "array": list,
}


@dataclass
class ToolRequest:
    id: int
    method: str
    params: dict | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "method": self.method}
        if self.params is not None:
            d["params"] = self.params
        return d


@dataclass
class ToolResponse:
    id: int
    result: dict | None = None
    error: dict | None = None

    def to_dict(self) -> dict:
        d: dict = {"id": self.id}
        if self.result is not None:
            d["result"] = self.result
        if self.error is not None:
            d["error"] = self.error
        return d


def _is_uint(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _validate_request(d: dict) -> ToolRequest:
    keys = set(d)
    if not _is_uint(d.get("id")):
        raise FramingError("request id must be an unsigned integer")
    method = d.get("method")
    if method == METHOD_LIST:
        if keys != {"id", "method"}:
            raise FramingError("tool/list takes no params")
        return ToolRequest(d["id"], method)
    if method == METHOD_CALL:
        if keys != {"id", "method", "params"}:
            raise FramingError("tool/call requires params")
        params = d["params"]
        if (
            not isinstance(params, dict)
            or set(params) != {"name", "arguments"}
            or not isinstance(params["name"], str)
            or not isinstance(params["arguments"], dict)
        ):
            raise FramingError("params must be {name, arguments}")
        return ToolRequest(d["id"], method, params)
    raise FramingError(f"unknown method: {method!r}")


def _validate_response(d: dict) -> ToolResponse:
    if not _is_uint(d.get("id")):
        raise FramingError("response id must be an unsigned integer")
    has_result = "result" in d
    has_error = "error" in d
    if has_result == has_error:
        raise FramingError("response carries exactly one of result/error")
    if has_result:
        if set(d) != {"id", "result"} or not isinstance(d["result"], dict):
            raise FramingError("bad result response")
        return ToolResponse(d["id"], result=d["result"])
    err = d["error"]
    if (
        set(d) != {"id", "error"}
        or not isinstance(err, dict)
        or set(err) != {"code", "message"}
        or not isinstance(err["code"], int)
        or isinstance(err["code"], bool)
        or not isinstance(err["message"], str)
    ):
        raise FramingError("bad error response")
    return ToolResponse(d["id"], error=err)


def encode_message(msg: ToolRequest | ToolResponse) -> bytes:
    """One line of canonical JSON terminated by a single 0x0A byte."""
    return canonical_dumps(msg.to_dict()).encode("ascii") + b"\n"


def decode_message(line: bytes) -> ToolRequest | ToolResponse:
    """Strict inverse of encode: non-canonical or invalid lines raise
    FramingError (never an uncaught parse exception)."""
    if not isinstance(line, (bytes, bytearray)):
        raise FramingError("decode expects bytes")
    stripped = bytes(line).rstrip(b"\n")
    try:
        d = json.loads(stripped.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FramingError(f"not JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise FramingError("message must be a JSON object")
    msg = _validate_request(d) if "method" in d else _validate_response(d)
    if encode_message(msg).rstrip(b"\n") != stripped:
        raise FramingError("line is not in canonical form")
    return msg


@dataclass
class ToolDescriptor:
    name: str
    description: str
    arg_schema: dict[str, dict]

    def to_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "arg_schema": self.arg_schema}


@dataclass
class ToolRegistry:
    """Named tools with argument schemas and handlers."""

    _tools: dict = field(default_factory=dict)

    def register(self, descriptor: ToolDescriptor, handler) -> "ToolRegistry":
        if descriptor.name in self._tools:
            raise DuplicateTool(descriptor.name)
        self._tools[descriptor.name] = (descriptor, handler)
        return self

    def descriptors(self) -> list[ToolDescriptor]:
        return [self._tools[name][0] for name in sorted(self._tools)]

    def _check_arguments(self, descriptor: ToolDescriptor, arguments: dict) -> None:
        schema = descriptor.arg_schema
        unknown = set(arguments) - set(schema)
        if unknown:
            raise DomainError(ERR_BAD_ARGS, f"{descriptor.name}: unknown arguments {sorted(unknown)}")
        for name, rules in schema.items():
            if name not in arguments:
                if rules.get("required", True):
                    raise DomainError(ERR_BAD_ARGS, f"{descriptor.name}: missing argument {name}")
                continue
            expected = _ARG_TYPES[rules["type"]]
            value = arguments[name]
            if isinstance(value, bool) and rules["type"] in ("integer", "number"):
                raise DomainError(ERR_BAD_ARGS, f"{descriptor.name}: {name} must be {rules['type']}")
            if not isinstance(value, expected):
                raise DomainError(ERR_BAD_ARGS, f"{descriptor.name}: {name} must be {rules['type']}")

    def dispatch(self, request: ToolRequest) -> ToolResponse:
        """Route one request; every request yields exactly one response
        with a matching id."""
        if request.method == METHOD_LIST:
            return ToolResponse(request.id, result={"tools": [d.to_dict() for d in self.descriptors()]})
        name = request.params["name"]
        if name not in self._tools:
            return ToolResponse(request.id, error={"code": ERR_UNKNOWN_TOOL, "message": f"unknown tool: {name}"})
        descriptor, handler = self._tools[name]
        try:
            self._check_arguments(descriptor, request.params["arguments"])
            result = handler(request.params["arguments"])
        except DomainError as exc:
            return ToolResponse(request.id, error={"code": exc.code, "message": exc.message})
        return ToolResponse(request.id, result=result)


# -- standard tool set -----------------------------------------------------

STANDARD_DESCRIPTORS = (
    ToolDescriptor(
        "start_policy",
        "Start the named skill and run it for one attempt.",
        {
            "policy_id": {"type": "string", "required": True},
            "instruction": {"type": "string", "required": True},
            "direction": {"type": "string", "required": True},
        },
    ),
    ToolDescriptor("terminate_policy", "Terminate the active skill handle.", {}),
    ToolDescriptor(
        "change_policy",
        "Atomically switch the active handle to another skill.",
        {
            "policy_id": {"type": "string", "required": True},
            "instruction": {"type": "string", "required": True},
        },
    ),
    ToolDescriptor("env_summary", "Structured and text summary of the scene.", {}),
    ToolDescriptor("fetch_robot_stats", "Scalar robot status snapshot.", {}),
    ToolDescriptor(
        "call_human",
        "Request a human intervention to restore the scene.",
        {
            "reason": {"type": "string", "required": True},
            "subtask_id": {"type": "string", "required": True},
        },
    ),
    ToolDescriptor(
        "append_trajectory",
        "Append one trajectory record to the dataset.",
        {"trajectory": {"type": "object", "required": True}},
    ),
)


def build_standard_registry(world, pool, dataset, human=None) -> ToolRegistry:
    """The seven standard tools wired to one episode's world and pool.

    ``dataset`` needs an ``append(record) -> offset`` method; ``human``
    (optional) needs ``available``, ``time_cost``, and
    ``intervene(world, subtask_id)``.
    """
    registry = ToolRegistry()

    def h_env_summary(args: dict) -> dict:
        from .simenv import summarize

        summary = summarize(world.state)
        return {"structured": summary.structured, "text": summary.text}

    def h_fetch_stats(args: dict) -> dict:
        return {"stats": pool.stats(world)}

    def h_start_policy(args: dict) -> dict:
        spec = pool.specs.get(args["policy_id"])
        if spec is None:
            raise DomainError(ERR_BAD_ARGS, f"unknown policy_id: {args['policy_id']}")
        instruction = Instruction(args["instruction"], spec.subtask_id, args["direction"])
        try:
            handle = pool.start(args["policy_id"], instruction)
            outcome, trajectory = pool.execute(handle, world)
        except PolicyBusy as exc:
            raise DomainError(ERR_POLICY_NOT_ACTIVE, str(exc)) from exc
        except PreconditionError as exc:
            raise DomainError(ERR_ENV_VIOLATION, str(exc)) from exc
        return {
            "handle_id": handle.handle_id,
            "policy_id": spec.policy_id,
            "outcome": outcome.to_dict(),
            "trajectory": trajectory.to_dict(),
        }

    def h_terminate(args: dict) -> dict:
        try:
            handle = pool.terminate_active()
        except PolicyNotActive as exc:
            raise DomainError(ERR_POLICY_NOT_ACTIVE, str(exc)) from exc
        return {"terminated_handle": handle.handle_id}

    def h_change(args: dict) -> dict:
        active = pool.active_handle
        if active is None:
            raise DomainError(ERR_POLICY_NOT_ACTIVE, "no active policy to change")
        spec = pool.specs.get(args["policy_id"])
        if spec is None:
            raise DomainError(ERR_BAD_ARGS, f"unknown policy_id: {args['policy_id']}")
        instruction = Instruction(args["instruction"], spec.subtask_id, spec.direction)
        try:
            handle = pool.change(active, args["policy_id"], instruction)
        except PolicyNotActive as exc:
            raise DomainError(ERR_POLICY_NOT_ACTIVE, str(exc)) from exc
        return {"handle_id": handle.handle_id, "policy_id": handle.policy_id}

    def h_call_human(args: dict) -> dict:
        if human is None or not getattr(human, "available", False):
            raise DomainError(ERR_HUMAN_UNAVAILABLE, "no human operator available")
        human.intervene(world, args["subtask_id"])
        return {"restored": True, "time_cost": human.time_cost}

    def h_append(args: dict) -> dict:
        try:
            record = Trajectory.from_dict(args["trajectory"])
        except (KeyError, TypeError, SchemaError) as exc:
            raise DomainError(ERR_BAD_ARGS, f"bad trajectory record: {exc}") from exc
        offset = dataset.append(record)
        return {"offset": offset}

    handlers = {
        "start_policy": h_start_policy,
        "terminate_policy": h_terminate,
        "change_policy": h_change,
        "env_summary": h_env_summary,
        "fetch_robot_stats": h_fetch_stats,
        "call_human": h_call_human,
        "append_trajectory": h_append,
    }
    for descriptor in STANDARD_DESCRIPTORS:
        registry.register(descriptor, handlers[descriptor.name])
    return registry


# -- transports ------------------------------------------------------------

def handle_line(registry: ToolRegistry, line: bytes) -> bytes:
    """Serve one wire line: decode, dispatch, encode. Unparseable or
    non-request lines come back as an id-0 parse error, never a crash."""
    try:
        msg = decode_message(line)
        if not isinstance(msg, ToolRequest):
            raise FramingError("servers accept requests only")
    except FramingError as exc:
        return encode_message(ToolResponse(0, error={"code": ERR_PARSE, "message": str(exc)}))
    return encode_message(registry.dispatch(msg))


def serve_stream(registry: ToolRegistry, reader, writer) -> int:
    """Serve newline-framed requests from a byte stream until EOF.
    Returns the number of lines handled."""
    handled = 0
    for line in reader:
        if not line.strip():
            continue
        writer.write(handle_line(registry, line))
        writer.flush()
        handled += 1
    return handled


def serve_stdio(registry: ToolRegistry) -> int:
    import sys

    return serve_stream(registry, sys.stdin.buffer, sys.stdout.buffer)


class _BusHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            if not line.strip():
                continue
            self.wfile.write(handle_line(self.server.registry, line))
            self.wfile.flush()


class BusServer(socketserver.ThreadingTCPServer):
    """TCP transport; each connection is its own FIFO request stream."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, registry: ToolRegistry, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _BusHandler)
        self.registry = registry


def socket_call(address: tuple[str, int], request: ToolRequest, timeout: float = 5.0) -> ToolResponse:
    """One request/response round trip over the TCP transport."""
    with socket.create_connection(address, timeout=timeout) as conn:
        conn.sendall(encode_message(request))
        line = conn.makefile("rb").readline()
    msg = decode_message(line)
    if not isinstance(msg, ToolResponse):
        raise FramingError("expected a response")
    return msg
