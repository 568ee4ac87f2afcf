"""Online routing: may the small path answer this query?

Evaluation order puts exact evidence before statistical evidence: complex
templates veto first, then simple-template hits, then exemplar similarity,
then nearest-centroid classification with a margin rule. Every failure mode
routes to the large model; no error escapes to the caller.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .clustering import LABEL_COMPLEX, LABEL_SIMPLE, QueryCluster
from .corpus import Diagnostic, canonicalize_query
from .embedding import Vectorizer
from .errors import InvalidInputError
from .ner import EntityDictionary, template_for

ROUTE_SMALL = "small"
ROUTE_LARGE = "large"

REASONS = (
    "template_match",
    "exemplar_match",
    "centroid_match",
    "no_match",
    "complex_template",
    "below_margin",
    "vectorizer_error",
)


@dataclass(frozen=True)
class RouterThresholds:
    exemplar_sim: float = 0.92
    centroid_sim: float = 0.88
    margin: float = 0.05
    deadline_ms: float = 50.0

    def validate(self) -> None:
        for name in ("exemplar_sim", "centroid_sim"):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise InvalidInputError(f"{name} must be in (0, 1], got {value}")
        if self.margin < 0:
            raise InvalidInputError("margin must be >= 0")
        if self.deadline_ms <= 0:
            raise InvalidInputError("deadline_ms must be > 0")


@dataclass(frozen=True)
class SimpleEntry:
    cluster_id: str
    dominant_function: str
    centroid: np.ndarray
    exemplars: np.ndarray  # (n_exemplars, dim)
    templates: frozenset[str]


@dataclass(frozen=True)
class RoutingTable:
    """Immutable routing snapshot; safe to share across request threads."""

    snapshot_id: str
    vectorizer_name: str
    dimension: int
    entries: tuple[SimpleEntry, ...]
    complex_templates: frozenset[str]
    thresholds: RouterThresholds
    # derived lookup structures
    template_to_entry: Mapping[str, int] = field(default_factory=dict)
    exemplar_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    exemplar_entry_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    centroid_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def exemplar_count(self) -> int:
        return int(self.exemplar_matrix.shape[0])


@dataclass(frozen=True)
class RoutingDecision:
    route: str
    reason: str
    matched_cluster: str | None = None
    matched_function: str | None = None
    score: float | None = None
    elapsed_us: int = 0


def assemble_table(
    snapshot_id: str,
    vectorizer_name: str,
    dimension: int,
    entries: Sequence[SimpleEntry],
    complex_templates: frozenset[str],
    thresholds: RouterThresholds,
) -> RoutingTable:
    """Wire the derived lookup structures; entries must be pre-sorted."""
    template_to_entry: dict[str, int] = {}
    for idx, entry in enumerate(entries):
        for pattern in sorted(entry.templates):
            template_to_entry.setdefault(pattern, idx)
    if entries:
        exemplar_matrix = np.vstack([e.exemplars for e in entries])
        exemplar_entry_index = np.concatenate(
            [np.full(len(e.exemplars), i, dtype=int) for i, e in enumerate(entries)]
        )
        centroid_matrix = np.stack([e.centroid for e in entries])
    else:
        exemplar_matrix = np.zeros((0, dimension))
        exemplar_entry_index = np.zeros(0, dtype=int)
        centroid_matrix = np.zeros((0, dimension))
    return RoutingTable(
        snapshot_id=snapshot_id,
        vectorizer_name=vectorizer_name,
        dimension=dimension,
        entries=tuple(entries),
        complex_templates=complex_templates,
        thresholds=thresholds,
        template_to_entry=template_to_entry,
        exemplar_matrix=exemplar_matrix,
        exemplar_entry_index=exemplar_entry_index,
        centroid_matrix=centroid_matrix,
    )


def build_routing_table(
    clusters: Sequence[QueryCluster],
    thresholds: RouterThresholds,
    snapshot_id: str,
    vectorizer_name: str,
    dimension: int,
    max_exemplars: int = 200,
) -> tuple[RoutingTable, list[Diagnostic]]:
    """Build the table from labeled clusters.

    Templates seen in both a simple and a complex cluster are treated as
    complex: ambiguity beats coverage.
    """
    thresholds.validate()
    diagnostics: list[Diagnostic] = []
    unlabeled = [c.cluster_id for c in clusters if c.label not in (LABEL_SIMPLE, LABEL_COMPLEX)]
    if unlabeled:
        raise InvalidInputError(f"clusters not labeled: {unlabeled[:3]}")

    complex_templates = set()
    for cluster in clusters:
        if cluster.label == LABEL_COMPLEX:
            complex_templates.update(cluster.templates)

    entries: list[SimpleEntry] = []
    for cluster in sorted(
        (c for c in clusters if c.label == LABEL_SIMPLE), key=lambda c: c.cluster_id
    ):
        if cluster.dominant_function is None:
            raise InvalidInputError(f"simple cluster {cluster.cluster_id} lacks dominant function")
        members = sorted(
            cluster.members, key=lambda m: (-m.group.record_count, m.group.query_text)
        )[:max_exemplars]
        exemplars = np.stack([m.embedding for m in members])
        if exemplars.shape[1] != dimension:
            raise InvalidInputError(
                f"cluster {cluster.cluster_id} embeddings have dimension"
                f" {exemplars.shape[1]}, table expects {dimension}"
            )
        entries.append(
            SimpleEntry(
                cluster_id=cluster.cluster_id,
                dominant_function=cluster.dominant_function,
                centroid=np.asarray(cluster.centroid, dtype=float),
                exemplars=exemplars,
                templates=frozenset(cluster.templates) - complex_templates,
            )
        )
    if not entries:
        diagnostics.append(Diagnostic(None, "no simple clusters, routing table is empty", "warning"))
    return (
        assemble_table(
            snapshot_id,
            vectorizer_name,
            dimension,
            entries,
            frozenset(complex_templates),
            thresholds,
        ),
        diagnostics,
    )


def match_query(
    query: str,
    history_length: int,
    table: RoutingTable,
    vectorizer: Vectorizer,
    dictionary: EntityDictionary,
) -> RoutingDecision:
    """Decide the serving path for one query. Never raises.

    History length is accepted for logging parity but does not influence
    the decision: context-dependent queries are exactly the complex ones,
    and those are excluded by template and by similarity already.
    """
    del history_length
    start = time.perf_counter()

    def done(route, reason, entry_idx=None, score=None):
        elapsed_us = int((time.perf_counter() - start) * 1e6)
        entry = table.entries[entry_idx] if entry_idx is not None else None
        return RoutingDecision(
            route=route,
            reason=reason,
            matched_cluster=entry.cluster_id if entry else None,
            matched_function=entry.dominant_function if entry else None,
            score=score,
            elapsed_us=elapsed_us,
        )

    def over_deadline() -> bool:
        return (time.perf_counter() - start) * 1000.0 > table.thresholds.deadline_ms

    text = canonicalize_query(query)
    if not text:
        return done(ROUTE_LARGE, "no_match")

    pattern = template_for(text, dictionary).pattern
    if pattern in table.complex_templates:
        return done(ROUTE_LARGE, "complex_template")
    entry_idx = table.template_to_entry.get(pattern)
    if entry_idx is not None:
        return done(ROUTE_SMALL, "template_match", entry_idx)

    if not table.entries:
        return done(ROUTE_LARGE, "no_match")
    if over_deadline():
        return done(ROUTE_LARGE, "no_match")

    try:
        vector = vectorizer.embed(text)
    except Exception:
        return done(ROUTE_LARGE, "vectorizer_error")
    if over_deadline():
        return done(ROUTE_LARGE, "no_match")

    exemplar_sims = table.exemplar_matrix @ vector
    best_row = int(np.argmax(exemplar_sims))
    best_exemplar = float(exemplar_sims[best_row])
    if best_exemplar >= table.thresholds.exemplar_sim:
        return done(
            ROUTE_SMALL,
            "exemplar_match",
            int(table.exemplar_entry_index[best_row]),
            best_exemplar,
        )
    if over_deadline():
        return done(ROUTE_LARGE, "no_match", score=best_exemplar)

    centroid_sims = table.centroid_matrix @ vector
    order = np.argsort(centroid_sims)
    best_idx = int(order[-1])
    best_centroid = float(centroid_sims[best_idx])
    second_best = float(centroid_sims[order[-2]]) if len(order) > 1 else -1.0
    if best_centroid >= table.thresholds.centroid_sim:
        if best_centroid - second_best >= table.thresholds.margin:
            return done(ROUTE_SMALL, "centroid_match", best_idx, best_centroid)
        return done(ROUTE_LARGE, "below_margin", score=best_centroid)
    return done(ROUTE_LARGE, "no_match", score=max(best_exemplar, best_centroid))
