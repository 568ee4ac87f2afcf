"""Small-path prompt assembly, token optimization, and output handling.

Generation itself is a pluggable backend. The deterministic slot-filling
stub keeps the whole system testable offline: it answers from the routing
context (dominant function plus extracted entity spans) and refuses rather
than guess when a required parameter cannot be filled, which the gateway
turns into a large-model fallback.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping, Sequence

import httpx

from .corpus import MAX_HISTORY_TURNS, ToolSchema, tool_to_obj
from .errors import (
    BackendUnavailableError,
    FcParseError,
    FcValidationError,
    InvalidInputError,
    StubIncompleteError,
)
from .ner import EntitySpan

DEFAULT_ELIDED_PREFIX = '{"name":'

_ROLE_TEXTS = {
    "verbose": (
        "You are a parameter extraction bot. Your task is to analyze the user's"
        " conversation history and current query, select the appropriate tool,"
        " and output the corresponding parameters."
    ),
    # Streamlined system-text variant; same task, fewer input characters.
    "minimal": "Pick the right tool for the query and output its parameters.",
}

_OUTPUT_FORMAT_LINE = '{"name":"tool_name","arguments":{"key1": "value1"}}'


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    turns: tuple[tuple[str, str], ...]
    instruction: str
    rendered: str


@dataclass(frozen=True)
class FunctionCallResult:
    name: str
    arguments: Mapping[str, str]


@dataclass(frozen=True)
class RoutingContext:
    """What the router hands the generation backend for a small-path query."""

    dominant_function: str
    spans: tuple[EntitySpan, ...] = ()


def schema_text(tools: Sequence[ToolSchema]) -> str:
    return json.dumps([tool_to_obj(t) for t in tools], ensure_ascii=False, separators=(",", ":"))


def assemble_prompt(
    tools: Sequence[ToolSchema],
    history: Sequence[tuple[str, str]],
    query: str,
    style: str = "verbose",
) -> PromptBundle:
    """Render the model input. Byte-deterministic for identical inputs."""
    if not tools:
        raise InvalidInputError("cannot assemble a prompt with no tools")
    if style not in _ROLE_TEXTS:
        raise InvalidInputError(f"unknown prompt style {style!r}")
    turns = tuple(history)[-MAX_HISTORY_TURNS:]
    system_text = (
        "# Role\n"
        f"{_ROLE_TEXTS[style]}\n"
        "\n"
        "# Tool Definition\n"
        f"{schema_text(tools)}\n"
        "\n"
        "# Output in the following JSON format\n"
        f"{_OUTPUT_FORMAT_LINE}\n"
    )
    history_block = "".join(
        ("### Instruction:\n" if role == "user" else "### Response:\n") + text + "\n"
        for role, text in turns
    )
    rendered = (
        system_text
        + "\n"
        + "Based on the following conversation:\n"
        + history_block
        + "### Instruction:\n"
        + query
        + "\n### Response:\n"
    )
    return PromptBundle(system_text=system_text, turns=turns, instruction=query, rendered=rendered)


@dataclass(frozen=True)
class TokenMapping:
    """Bijective parameter-name aliasing, e.g. media_type -> type."""

    pairs: Mapping[str, str]

    def __post_init__(self):
        values = list(self.pairs.values())
        if len(set(values)) != len(values):
            raise InvalidInputError("token mapping aliases must be unique")

    def inverse(self) -> dict[str, str]:
        return {alias: original for original, alias in self.pairs.items()}


def optimize_schema_tokens(
    tools: Sequence[ToolSchema], mapping: TokenMapping | Mapping[str, str]
) -> tuple[tuple[ToolSchema, ...], TokenMapping]:
    """Rename parameter keys through the alias map.

    An alias may not collide with an unmapped original name in the same
    tool. Parameter order and everything else in the schema is preserved.
    """
    if not isinstance(mapping, TokenMapping):
        mapping = TokenMapping(pairs=dict(mapping))
    optimized = []
    for tool in tools:
        unmapped = {n for n in tool.parameters if n not in mapping.pairs}
        parameters = {}
        for name, spec in tool.parameters.items():
            alias = mapping.pairs.get(name, name)
            if alias != name and alias in unmapped:
                raise InvalidInputError(
                    f"alias {alias!r} collides with parameter of tool {tool.name!r}"
                )
            parameters[alias] = spec
        if len(parameters) != len(tool.parameters):
            raise InvalidInputError(f"alias collision within tool {tool.name!r}")
        optimized.append(ToolSchema(name=tool.name, description=tool.description, parameters=parameters))
    return tuple(optimized), mapping


def restore_parameter_names(
    result: FunctionCallResult, mapping: TokenMapping | Mapping[str, str]
) -> FunctionCallResult:
    """Map alias-space argument keys back to original names."""
    if not isinstance(mapping, TokenMapping):
        mapping = TokenMapping(pairs=dict(mapping))
    inverse = mapping.inverse()
    return FunctionCallResult(
        name=result.name,
        arguments={inverse.get(k, k): v for k, v in result.arguments.items()},
    )


def validate_result(result: FunctionCallResult, tools: Sequence[ToolSchema]) -> None:
    tool = next((t for t in tools if t.name == result.name), None)
    if tool is None:
        raise FcValidationError(f"unknown function {result.name!r}")
    for key in result.arguments:
        if key not in tool.parameters:
            raise FcValidationError(f"argument {key!r} not in schema of {result.name!r}")
    for required in tool.required_parameters():
        if required not in result.arguments:
            raise FcValidationError(f"missing required argument {required!r}")


def canonical_result_text(result: FunctionCallResult) -> str:
    return json.dumps(
        {"name": result.name, "arguments": dict(result.arguments)},
        ensure_ascii=False,
        separators=(",", ":"),
    )


def parse_fc_output(
    text: str,
    tools: Sequence[ToolSchema],
    elided_prefix: str | None = DEFAULT_ELIDED_PREFIX,
) -> FunctionCallResult:
    """Strict parse of the single-object output format, then validation.

    A backend trained with prefix elision sends the object without its
    common prefix; re-prepending the configured prefix recovers it.
    """
    stripped = text.strip()
    candidates = [stripped]
    if elided_prefix:
        candidates.append(elided_prefix + stripped)
    obj = None
    for candidate in candidates:
        try:
            parsed = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(parsed, dict):
            obj = parsed
            break
    if obj is None:
        raise FcParseError(f"not a function-call object: {stripped[:80]!r}")
    if set(obj) != {"name", "arguments"}:
        raise FcParseError(f"unexpected keys {sorted(obj)} in function-call object")
    name = obj["name"]
    arguments = obj["arguments"]
    if not isinstance(name, str) or not isinstance(arguments, dict):
        raise FcParseError("name must be a string and arguments an object")
    if not all(isinstance(v, str) for v in arguments.values()):
        raise FcParseError("argument values must be strings")
    result = FunctionCallResult(name=name, arguments=arguments)
    validate_result(result, tools)
    return result


class GenerationBackend(ABC):
    """Contract: return a FunctionCallResult valid against `tools` within
    the small-path deadline, or raise; the gateway treats every raise as a
    large-model fallback."""

    @abstractmethod
    def generate(
        self,
        query: str,
        history: Sequence[tuple[str, str]],
        tools: Sequence[ToolSchema],
        context: RoutingContext,
    ) -> FunctionCallResult: ...


class StubGenerator(GenerationBackend):
    """Deterministic template filling in place of a trained small model.

    slot_map: entity type tag -> parameter name (in whatever name space the
    caller's tools use, so alias-optimized deployments configure aliases).
    keyword_table: parameter name -> ordered {lowercase keyword: value};
    the first keyword found in the query wins, which covers control-style
    enum parameters.
    """

    def __init__(
        self,
        slot_map: Mapping[str, str] | None = None,
        keyword_table: Mapping[str, Mapping[str, str]] | None = None,
    ):
        self.slot_map = dict(slot_map or {})
        self.keyword_table = {k: dict(v) for k, v in (keyword_table or {}).items()}
        self._param_to_type: dict[str, str] = {}
        for type_tag, param in self.slot_map.items():
            self._param_to_type.setdefault(param, type_tag)

    def generate(self, query, history, tools, context) -> FunctionCallResult:
        tool = next((t for t in tools if t.name == context.dominant_function), None)
        if tool is None:
            raise StubIncompleteError(
                f"dominant function {context.dominant_function!r} not in request tools"
            )
        arguments: dict[str, str] = {}
        query_lower = query.lower()
        for name in tool.parameters:
            type_tag = self._param_to_type.get(name)
            if type_tag is not None:
                span = next((s for s in context.spans if s.type_tag == type_tag), None)
                if span is not None:
                    arguments[name] = span.surface
                    continue
            keywords = self.keyword_table.get(name)
            if keywords:
                for keyword, value in keywords.items():
                    if keyword.lower() in query_lower:
                        arguments[name] = value
                        break
        missing = [p for p in tool.required_parameters() if p not in arguments]
        if missing:
            raise StubIncompleteError(f"cannot fill required parameters {missing}")
        result = FunctionCallResult(name=tool.name, arguments=arguments)
        validate_result(result, tools)
        return result


class HttpGenerator(GenerationBackend):
    """Client for a real parameter-generation service.

    POSTs {"prompt": ...} and parses {"text": ...} through the strict
    output parser. The per-request deadline is enforced by the HTTP client.
    """

    def __init__(
        self,
        url: str,
        deadline_s: float = 0.3,
        prompt_style: str = "verbose",
        elided_prefix: str | None = DEFAULT_ELIDED_PREFIX,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.prompt_style = prompt_style
        self.elided_prefix = elided_prefix
        self._client = client or httpx.Client(timeout=deadline_s)

    def generate(self, query, history, tools, context) -> FunctionCallResult:
        prompt = assemble_prompt(tools, history, query, style=self.prompt_style)
        try:
            response = self._client.post(self.url, json={"prompt": prompt.rendered})
        except httpx.HTTPError as exc:
            raise BackendUnavailableError(f"generation backend unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise BackendUnavailableError(f"generation backend returned {response.status_code}")
        try:
            text = response.json()["text"]
        except (ValueError, KeyError) as exc:
            raise BackendUnavailableError(f"malformed generation response: {exc}") from exc
        return parse_fc_output(text, tools, self.elided_prefix)
