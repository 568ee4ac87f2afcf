"""Ingestion and grouping of production function-calling traffic.

Wire format is line-delimited JSON, one record per line, with fields
`record_id`, `query`, `history`, `tools`, `called_function`, `arguments`,
`timestamp_ms`. Malformed lines never abort the stream: each produces a
diagnostic and is skipped. Records that are usable but imperfect (missing
timestamp, unknown extra fields) are kept and flagged with a warning.
"""

from __future__ import annotations

import json
import unicodedata
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator, Mapping

from .errors import DataError

MAX_HISTORY_TURNS = 3
PARAM_TYPES = ("string", "number", "boolean", "enum")
ROLES = ("user", "assistant")

_RECORD_FIELDS = (
    "record_id",
    "query",
    "history",
    "tools",
    "called_function",
    "arguments",
    "timestamp_ms",
)

_WS_RUN = re.compile(r"\s+")


def canonicalize_query(raw: str) -> str:
    """Trim, collapse whitespace runs to single spaces, NFC-normalize.

    Idempotent; defines query identity for grouping. Case is preserved on
    purpose: folding would conflate distinct entity surfaces.
    """
    return unicodedata.normalize("NFC", _WS_RUN.sub(" ", raw.strip()))


@dataclass(frozen=True)
class ParamSpec:
    """One parameter of a tool: type tag, required flag, enum values."""

    type_tag: str
    required: bool = True
    enum_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: Mapping[str, ParamSpec]  # insertion-ordered

    def required_parameters(self) -> list[str]:
        return [n for n, p in self.parameters.items() if p.required]


@dataclass(frozen=True)
class FunctionCallRecord:
    """One production function-calling event."""

    record_id: str
    query: str
    history: tuple[tuple[str, str], ...]  # (role, text), last 3 turns
    tools: tuple[ToolSchema, ...]
    called_function: str
    arguments: Mapping[str, str]
    timestamp_ms: int

    def tool_named(self, name: str) -> ToolSchema | None:
        for t in self.tools:
            if t.name == name:
                return t
        return None

    def completeness(self) -> int:
        """Count of non-empty argument values; used for representative picks."""
        return sum(1 for v in self.arguments.values() if v.strip())


@dataclass(frozen=True)
class Diagnostic:
    line_no: int | None
    reason: str
    severity: str = "error"  # "error" rejects the line, "warning" keeps it

    def to_obj(self) -> dict[str, Any]:
        return {"line": self.line_no, "reason": self.reason, "severity": self.severity}


@dataclass(frozen=True, eq=False)
class QueryGroup:
    """All records sharing one canonicalized query text.

    `records` may be empty for groups rehydrated from an id-only snapshot;
    the histogram then remains the source of truth for counts.
    """

    query_text: str
    records: tuple[FunctionCallRecord, ...]
    function_histogram: Mapping[str, int] = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return sum(self.function_histogram.values())


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    obj: dict[str, Any] = {}
    for key, value in pairs:
        if key in obj:
            raise ValueError(f"duplicate key {key!r}")
        obj[key] = value
    return obj


def _parse_param(name: str, obj: Any) -> ParamSpec:
    if not isinstance(obj, dict):
        raise ValueError(f"parameter {name!r} spec must be an object")
    type_tag = obj.get("type")
    if type_tag not in PARAM_TYPES:
        raise ValueError(f"parameter {name!r} has unknown type {type_tag!r}")
    required = obj.get("required", True)
    if not isinstance(required, bool):
        raise ValueError(f"parameter {name!r} required flag must be boolean")
    enum_values: tuple[str, ...] = ()
    if type_tag == "enum":
        values = obj.get("enum")
        if not isinstance(values, list) or not values or not all(isinstance(v, str) for v in values):
            raise ValueError(f"enum parameter {name!r} needs a non-empty string list")
        enum_values = tuple(values)
    elif "enum" in obj:
        raise ValueError(f"parameter {name!r} is not enum-typed but carries enum values")
    return ParamSpec(type_tag=type_tag, required=required, enum_values=enum_values)


def parse_tool_obj(obj: Any) -> ToolSchema:
    if not isinstance(obj, dict):
        raise ValueError("tool must be an object")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise ValueError("tool name must be a non-empty string")
    description = obj.get("description", "")
    if not isinstance(description, str):
        raise ValueError(f"tool {name!r} description must be a string")
    params_obj = obj.get("parameters")
    if not isinstance(params_obj, dict):
        raise ValueError(f"tool {name!r} parameters must be an object")
    parameters = {pname: _parse_param(pname, pspec) for pname, pspec in params_obj.items()}
    return ToolSchema(name=name, description=description, parameters=parameters)


def parse_record_obj(obj: Any) -> tuple[FunctionCallRecord, list[str]]:
    """Build a validated record from a decoded JSON object.

    Returns the record plus warning strings for recoverable oddities.
    Raises ValueError with a reason when the record must be rejected.
    """
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    warnings: list[str] = []

    unknown = sorted(set(obj) - set(_RECORD_FIELDS))
    if unknown:
        warnings.append("unknown fields ignored: " + ", ".join(unknown))

    record_id = obj.get("record_id")
    if not isinstance(record_id, str) or not record_id:
        raise ValueError("record_id must be a non-empty string")

    query = obj.get("query")
    if not isinstance(query, str):
        raise ValueError("query must be a string")
    if not query.strip():
        raise ValueError("query is empty after trimming")

    history_obj = obj.get("history", [])
    if not isinstance(history_obj, list):
        raise ValueError("history must be an array")
    history: list[tuple[str, str]] = []
    for turn in history_obj:
        if not isinstance(turn, dict) or not isinstance(turn.get("text"), str):
            raise ValueError("history turn must be an object with role and text")
        role = turn.get("role")
        if role not in ROLES:
            raise ValueError(f"history role {role!r} not in {ROLES}")
        history.append((role, turn["text"]))
    history = history[-MAX_HISTORY_TURNS:]

    tools_obj = obj.get("tools")
    if not isinstance(tools_obj, list) or not tools_obj:
        raise ValueError("tools must be a non-empty array")
    tools = tuple(parse_tool_obj(t) for t in tools_obj)
    names = [t.name for t in tools]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tool name in tools")

    called_function = obj.get("called_function")
    if not isinstance(called_function, str) or not called_function:
        raise ValueError("called_function must be a non-empty string")
    tool = next((t for t in tools if t.name == called_function), None)
    if tool is None:
        raise ValueError(f"unknown function {called_function!r}")

    arguments_obj = obj.get("arguments", {})
    if not isinstance(arguments_obj, dict):
        raise ValueError("arguments must be an object")
    for key, value in arguments_obj.items():
        if not isinstance(value, str):
            raise ValueError(f"argument {key!r} value must be a string")
        if key not in tool.parameters:
            raise ValueError(f"argument {key!r} not in schema of {called_function!r}")

    timestamp_ms = obj.get("timestamp_ms")
    if timestamp_ms is None:
        warnings.append("missing timestamp_ms, assigned 0")
        timestamp_ms = 0
    elif isinstance(timestamp_ms, bool) or not isinstance(timestamp_ms, int):
        raise ValueError("timestamp_ms must be an integer")

    record = FunctionCallRecord(
        record_id=record_id,
        query=query,
        history=tuple(history),
        tools=tools,
        called_function=called_function,
        arguments=dict(arguments_obj),
        timestamp_ms=timestamp_ms,
    )
    return record, warnings


def ingest_records(
    source: IO[bytes] | IO[str] | Iterable[bytes | str],
) -> tuple[list[FunctionCallRecord], list[Diagnostic]]:
    """Parse a line-delimited record stream, keeping valid records.

    Per-line schema violations become diagnostics and never abort the
    stream. An unreadable source raises DataError.
    """
    records: list[FunctionCallRecord] = []
    diagnostics: list[Diagnostic] = []
    try:
        lines: Iterator[bytes | str] = iter(source)
    except TypeError as exc:
        raise DataError(f"unreadable source: {exc}") from exc

    line_no = 0
    while True:
        try:
            raw = next(lines)
        except StopIteration:
            break
        except (OSError, UnicodeError) as exc:
            raise DataError(f"unreadable source at line {line_no + 1}: {exc}") from exc
        line_no += 1
        if isinstance(raw, bytes):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                diagnostics.append(Diagnostic(line_no, f"invalid UTF-8: {exc}"))
                continue
        else:
            line = raw
        if not line.strip():
            continue
        try:
            obj = json.loads(line, object_pairs_hook=_reject_duplicate_keys)
        except ValueError as exc:
            diagnostics.append(Diagnostic(line_no, f"invalid JSON: {exc}"))
            continue
        try:
            record, warnings = parse_record_obj(obj)
        except ValueError as exc:
            diagnostics.append(Diagnostic(line_no, str(exc)))
            continue
        records.append(record)
        diagnostics.extend(Diagnostic(line_no, w, severity="warning") for w in warnings)
    return records, diagnostics


def group_by_query(records: Iterable[FunctionCallRecord]) -> list[QueryGroup]:
    """One group per distinct canonicalized query; groups partition the input."""
    by_text: dict[str, list[FunctionCallRecord]] = {}
    for record in records:
        by_text.setdefault(canonicalize_query(record.query), []).append(record)
    groups = []
    for text in sorted(by_text):
        members = by_text[text]
        histogram = dict(sorted(Counter(r.called_function for r in members).items()))
        groups.append(QueryGroup(query_text=text, records=tuple(members), function_histogram=histogram))
    return groups


# Canonical JSON serialization, used for the validated record file and for
# rendering tool schemas into prompts. Field order is fixed so repeated runs
# are byte-identical.

def param_to_obj(spec: ParamSpec) -> dict[str, Any]:
    obj: dict[str, Any] = {"type": spec.type_tag, "required": spec.required}
    if spec.type_tag == "enum":
        obj["enum"] = list(spec.enum_values)
    return obj


def tool_to_obj(tool: ToolSchema) -> dict[str, Any]:
    return {
        "name": tool.name,
        "description": tool.description,
        "parameters": {n: param_to_obj(p) for n, p in tool.parameters.items()},
    }


def record_to_obj(record: FunctionCallRecord) -> dict[str, Any]:
    return {
        "record_id": record.record_id,
        "query": record.query,
        "history": [{"role": r, "text": t} for r, t in record.history],
        "tools": [tool_to_obj(t) for t in record.tools],
        "called_function": record.called_function,
        "arguments": dict(record.arguments),
        "timestamp_ms": record.timestamp_ms,
    }


def serialize_records(records: Iterable[FunctionCallRecord]) -> str:
    return "".join(json.dumps(record_to_obj(r), ensure_ascii=False) + "\n" for r in records)
