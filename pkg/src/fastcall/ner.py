"""Dictionary-based entity extraction and query templating.

Matching is exact-surface, longest-match, leftmost, greedy: deterministic
and cheap enough for the routing hot path. Templates replace matched spans
with `<type_tag>` placeholders so queries that differ only in entity
surfaces share one pattern.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Diagnostic, canonicalize_query
from .errors import DataError, InvalidInputError

DEFAULT_TYPE_PRIORITY = ("song", "artist", "genre", "movie")

_TYPE_TAG = re.compile(r"^[a-z_][a-z0-9_]*$")
_PLACEHOLDER = re.compile(r"<([a-z_][a-z0-9_]*)>")


@dataclass(frozen=True)
class EntityDictionary:
    """Surface string to type tag, with a priority order over type tags."""

    entries: Mapping[str, str]
    type_priority: tuple[str, ...] = DEFAULT_TYPE_PRIORITY

    @property
    def max_surface_len(self) -> int:
        return max((len(s) for s in self.entries), default=0)


EMPTY_DICTIONARY = EntityDictionary(entries={})


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int  # exclusive
    surface: str
    type_tag: str


@dataclass(frozen=True)
class QueryTemplate:
    pattern: str
    slots: tuple[str, ...]


def template_slots(pattern: str) -> tuple[str, ...]:
    """Slots of a pattern string, in placeholder order.

    Queries whose literal text contains `<tag>` tokens are outside this
    module's supported input space.
    """
    return tuple(m.group(1) for m in _PLACEHOLDER.finditer(pattern))


def load_dictionaries(
    sources: Iterable[str | Path],
    type_priority: Sequence[str] = DEFAULT_TYPE_PRIORITY,
) -> tuple[EntityDictionary, list[Diagnostic]]:
    """Merge tab-separated `surface<TAB>type_tag` files into one dictionary.

    On a duplicate surface with conflicting types the type earlier in
    `type_priority` wins and a warning diagnostic is recorded. Type tags not
    in the priority list are appended in first-seen order. Lines starting
    with `#` are comments; malformed lines are skipped with a diagnostic.
    """
    priority = list(type_priority)
    entries: dict[str, str] = {}
    diagnostics: list[Diagnostic] = []

    def rank(tag: str) -> int:
        return priority.index(tag)

    for source in sources:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read dictionary {path}: {exc}") from exc
        for line_no, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                diagnostics.append(Diagnostic(line_no, f"{path.name}: malformed line"))
                continue
            surface = canonicalize_query(parts[0])
            tag = parts[1].strip()
            if not _TYPE_TAG.match(tag):
                diagnostics.append(Diagnostic(line_no, f"{path.name}: bad type tag {tag!r}"))
                continue
            if tag not in priority:
                priority.append(tag)
                diagnostics.append(
                    Diagnostic(line_no, f"{path.name}: type {tag!r} appended to priority", "warning")
                )
            existing = entries.get(surface)
            if existing is not None and existing != tag:
                winner = existing if rank(existing) <= rank(tag) else tag
                diagnostics.append(
                    Diagnostic(
                        line_no,
                        f"{path.name}: surface {surface!r} tagged both {existing!r} and {tag!r},"
                        f" kept {winner!r}",
                        "warning",
                    )
                )
                entries[surface] = winner
            else:
                entries[surface] = tag
    return EntityDictionary(entries=entries, type_priority=tuple(priority)), diagnostics


def extract_entities(query: str, dictionary: EntityDictionary) -> list[EntitySpan]:
    """Non-overlapping spans by leftmost longest-match scanning.

    At each position the longest dictionary surface starting there is
    taken and the region consumed; equal-length type conflicts cannot
    reach here because the dictionary maps each surface to one type,
    chosen by priority at load time.
    """
    entries = dictionary.entries
    max_len = dictionary.max_surface_len
    spans: list[EntitySpan] = []
    n = len(query)
    i = 0
    while i < n:
        matched = False
        for length in range(min(max_len, n - i), 0, -1):
            surface = query[i : i + length]
            tag = entries.get(surface)
            if tag is not None:
                spans.append(EntitySpan(start=i, end=i + length, surface=surface, type_tag=tag))
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return spans


def _check_spans(query: str, spans: Sequence[EntitySpan]) -> list[EntitySpan]:
    ordered = sorted(spans, key=lambda s: s.start)
    prev_end = 0
    for span in ordered:
        if span.start < prev_end:
            raise InvalidInputError(f"overlapping span at {span.start}")
        if not (0 <= span.start < span.end <= len(query)):
            raise InvalidInputError(f"span [{span.start}, {span.end}) out of bounds")
        if query[span.start : span.end] != span.surface:
            raise InvalidInputError(f"span surface {span.surface!r} does not match query slice")
        prev_end = span.end
    return ordered


def templatize(query: str, spans: Sequence[EntitySpan]) -> QueryTemplate:
    """Replace each span with `<type_tag>`, preserving all other text."""
    ordered = _check_spans(query, spans)
    parts: list[str] = []
    slots: list[str] = []
    cursor = 0
    for span in ordered:
        parts.append(query[cursor : span.start])
        parts.append(f"<{span.type_tag}>")
        slots.append(span.type_tag)
        cursor = span.end
    parts.append(query[cursor:])
    return QueryTemplate(pattern="".join(parts), slots=tuple(slots))


def template_for(query: str, dictionary: EntityDictionary) -> QueryTemplate:
    return templatize(query, extract_entities(query, dictionary))


def fill_template(template: QueryTemplate, surfaces: Sequence[str]) -> str:
    """Substitute surfaces back into the pattern, left to right."""
    if len(surfaces) != len(template.slots):
        raise InvalidInputError(
            f"{len(surfaces)} surfaces for {len(template.slots)} slots"
        )
    it = iter(surfaces)
    return _PLACEHOLDER.sub(lambda _m: next(it), template.pattern)
