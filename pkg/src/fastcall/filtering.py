"""Simple/complex labeling and training-data construction.

A cluster is simple when one function dominates its records; everything
else, including clusters too small to support a frequency argument, is
complex. Training data is balanced per function with a seeded sampler so
repeated builds are byte-identical.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .clustering import (
    LABEL_COMPLEX,
    LABEL_SIMPLE,
    ClusterMember,
    QueryCluster,
    make_cluster,
    relabel,
)
from .corpus import Diagnostic, FunctionCallRecord, QueryGroup
from .errors import InvalidInputError, MissingRecordsError
from .paramgen import (
    FunctionCallResult,
    FcValidationError,
    assemble_prompt,
    canonical_result_text,
    validate_result,
)


@dataclass(frozen=True)
class FilterConfig:
    dominance_threshold: float = 0.9
    per_function_target: int = 500
    min_cluster_records: int = 5

    def validate(self) -> None:
        # > 0.5 guarantees a unique dominant function whenever the test passes
        if not (0.5 < self.dominance_threshold <= 1.0):
            raise InvalidInputError(
                f"dominance_threshold must be in (0.5, 1], got {self.dominance_threshold}"
            )
        if self.per_function_target < 1:
            raise InvalidInputError("per_function_target must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    prompt: str
    completion: str
    function_name: str
    source_record_id: str


def classify_cluster(cluster: QueryCluster, config: FilterConfig) -> tuple[str, str | None]:
    """Label a cluster by dominant-function share.

    Returns (label, dominant_function_or_None). Clusters with fewer than
    min_cluster_records records are complex by policy.
    """
    histogram = cluster.function_histogram
    if not histogram:
        raise InvalidInputError("cluster histogram is empty")
    total = sum(histogram.values())
    if total < config.min_cluster_records:
        return LABEL_COMPLEX, None
    top_function = max(histogram, key=lambda f: (histogram[f], f))
    if histogram[top_function] / total >= config.dominance_threshold:
        return LABEL_SIMPLE, top_function
    return LABEL_COMPLEX, None


def label_clusters(clusters: Sequence[QueryCluster], config: FilterConfig) -> list[QueryCluster]:
    labeled = []
    for cluster in clusters:
        label, dominant = classify_cluster(cluster, config)
        labeled.append(relabel(cluster, label, dominant))
    return labeled


def drop_nondominant(cluster: QueryCluster) -> QueryCluster:
    """Discard records that call anything but the dominant function.

    Member groups left empty are removed; groups that are already pure
    pass through untouched, so id-only snapshot groups are fine there.
    """
    if cluster.label != LABEL_SIMPLE or cluster.dominant_function is None:
        raise InvalidInputError("drop_nondominant needs a simple-labeled cluster")
    dominant = cluster.dominant_function
    members: list[ClusterMember] = []
    for member in cluster.members:
        histogram = member.group.function_histogram
        if set(histogram) == {dominant}:
            members.append(member)
            continue
        if not member.group.records:
            raise MissingRecordsError(
                f"group {member.group.query_text!r} needs record bodies to filter"
            )
        kept = tuple(r for r in member.group.records if r.called_function == dominant)
        if not kept:
            continue
        group = QueryGroup(
            query_text=member.group.query_text,
            records=kept,
            function_histogram={dominant: len(kept)},
        )
        members.append(ClusterMember(group=group, embedding=member.embedding, template=member.template))
    return make_cluster(members, label=LABEL_SIMPLE, dominant_function=dominant)


def _rep_key(record: FunctionCallRecord) -> tuple[int, int, str]:
    return (-record.completeness(), -record.timestamp_ms, record.record_id)


def select_representative(group: QueryGroup) -> FunctionCallRecord:
    """Most complete, then most recent record; record_id breaks full ties."""
    if not group.records:
        raise InvalidInputError(f"group {group.query_text!r} has no record bodies")
    return min(group.records, key=_rep_key)


def _completion_valid(record: FunctionCallRecord) -> bool:
    result = FunctionCallResult(name=record.called_function, arguments=dict(record.arguments))
    try:
        validate_result(result, record.tools)
    except FcValidationError:
        return False
    return True


def balanced_sample(
    clusters: Sequence[QueryCluster],
    config: FilterConfig,
    seed: int = 0,
    prompt_style: str = "verbose",
) -> tuple[list[TrainingExample], list[Diagnostic]]:
    """Build per-function balanced prompt/completion pairs.

    The candidate pool for a function is the representative record of every
    group in clusters it dominates. Oversized pools are downsampled with a
    seeded uniform draw; undersized ones are supplemented with each group's
    next-best records (no repetition, never past availability). Records
    whose recorded arguments do not validate against their own tool schema
    are skipped so every completion round-trips through the output parser.
    """
    config.validate()
    diagnostics: list[Diagnostic] = []
    simple = [c for c in clusters if c.label == LABEL_SIMPLE and c.dominant_function]
    if not simple:
        diagnostics.append(Diagnostic(None, "no simple clusters, no training data", "warning"))
        return [], diagnostics

    # per function: ranked record lists per group, in (cluster_id, text) order
    ranked: dict[str, list[list[FunctionCallRecord]]] = {}
    skipped = 0
    for cluster in sorted(simple, key=lambda c: c.cluster_id):
        pools = ranked.setdefault(cluster.dominant_function, [])
        for member in cluster.members:
            if not member.group.records:
                raise MissingRecordsError(
                    f"group {member.group.query_text!r} has no record bodies for sampling"
                )
            usable = [r for r in sorted(member.group.records, key=_rep_key) if _completion_valid(r)]
            skipped += len(member.group.records) - len(usable)
            if usable:
                pools.append(usable)
    if skipped:
        diagnostics.append(
            Diagnostic(None, f"skipped {skipped} records with schema-invalid arguments", "warning")
        )

    rng = random.Random(seed)
    examples: list[TrainingExample] = []
    for function in sorted(ranked):
        pools = ranked[function]
        chosen: list[FunctionCallRecord] = [pool[0] for pool in pools]
        if len(chosen) > config.per_function_target:
            indices = sorted(rng.sample(range(len(chosen)), config.per_function_target))
            chosen = [chosen[i] for i in indices]
        elif len(chosen) < config.per_function_target:
            rank = 1
            while len(chosen) < config.per_function_target:
                added = False
                for pool in pools:
                    if rank < len(pool):
                        chosen.append(pool[rank])
                        added = True
                        if len(chosen) == config.per_function_target:
                            break
                if not added:
                    break
                rank += 1
        for record in chosen:
            bundle = assemble_prompt(record.tools, record.history, record.query, style=prompt_style)
            result = FunctionCallResult(name=record.called_function, arguments=dict(record.arguments))
            examples.append(
                TrainingExample(
                    prompt=bundle.rendered,
                    completion=canonical_result_text(result),
                    function_name=function,
                    source_record_id=record.record_id,
                )
            )
    return examples, diagnostics
