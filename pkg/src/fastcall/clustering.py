"""Threshold agglomerative clustering of query groups.

Average linkage over unit vectors reduces to a dot product of per-cluster
embedding sums divided by the member-count product, which keeps the merge
loop cheap. Merging stops once the best pair falls below the similarity
threshold, so the cluster count is never fixed in advance.

The same machinery runs at two levels: first over query-group embeddings,
then (for incremental batch updates) over cluster centroids.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .corpus import FunctionCallRecord, QueryGroup
from .errors import (
    DataError,
    DegenerateCentroidError,
    InvalidInputError,
    MissingRecordsError,
)
from .ner import EntityDictionary, template_for

LABEL_UNLABELED = "unlabeled"
LABEL_SIMPLE = "simple"
LABEL_COMPLEX = "complex"

# Ties in the merge loop are resolved within this window so float summation
# order cannot flip which pair merges first.
TIE_EPS = 1e-12

CENTROID_TOL = 1e-6


@dataclass(frozen=True)
class ClusteringConfig:
    similarity_threshold: float = 0.85
    batch_size: int = 100_000
    max_queries_per_cluster: int = 200
    max_records_per_query: int = 5
    near_duplicate_threshold: float = 0.98

    def validate(self, allow_small_batch: bool = False) -> None:
        for name in ("similarity_threshold", "near_duplicate_threshold"):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise InvalidInputError(f"{name} must be in (0, 1], got {value}")
        if not allow_small_batch and not (80_000 <= self.batch_size <= 100_000):
            raise InvalidInputError(
                f"batch_size {self.batch_size} outside [80000, 100000];"
                " pass allow_small_batch for desk-scale runs"
            )
        if self.max_queries_per_cluster < 1 or self.max_records_per_query < 1:
            raise InvalidInputError("cluster size caps must be >= 1")


@dataclass(frozen=True, eq=False)
class ClusterMember:
    group: QueryGroup
    embedding: np.ndarray
    template: str  # placeholder pattern of the member query


@dataclass(frozen=True, eq=False)
class QueryCluster:
    cluster_id: str
    members: tuple[ClusterMember, ...]  # sorted by query text
    centroid: np.ndarray
    templates: tuple[str, ...]  # sorted, unique
    function_histogram: Mapping[str, int]
    label: str = LABEL_UNLABELED
    dominant_function: str | None = None

    @property
    def total_records(self) -> int:
        return sum(self.function_histogram.values())

    def min_query_text(self) -> str:
        return self.members[0].group.query_text


def compute_centroid(members: Sequence[ClusterMember]) -> np.ndarray:
    """Record-count-weighted mean of member embeddings, L2-normalized."""
    if not members:
        raise InvalidInputError("cannot compute centroid of empty member list")
    total = np.zeros_like(members[0].embedding)
    for member in members:
        total = total + member.group.record_count * member.embedding
    norm = float(np.linalg.norm(total))
    if norm < 1e-12:
        raise DegenerateCentroidError("weighted embedding sum is zero")
    return total / norm


def _cluster_id(members: Sequence[ClusterMember]) -> str:
    digest = hashlib.blake2b(digest_size=8)
    for member in members:
        digest.update(member.group.query_text.encode("utf-8"))
        digest.update(b"\x00")
    return "c" + digest.hexdigest()


def make_cluster(
    members: Iterable[ClusterMember],
    label: str = LABEL_UNLABELED,
    dominant_function: str | None = None,
) -> QueryCluster:
    ordered = tuple(sorted(members, key=lambda m: m.group.query_text))
    if not ordered:
        raise InvalidInputError("cluster needs at least one member")
    histogram: Counter[str] = Counter()
    for member in ordered:
        histogram.update(member.group.function_histogram)
    return QueryCluster(
        cluster_id=_cluster_id(ordered),
        members=ordered,
        centroid=compute_centroid(ordered),
        templates=tuple(sorted({m.template for m in ordered})),
        function_histogram=dict(sorted(histogram.items())),
        label=label,
        dominant_function=dominant_function,
    )


def _agglomerate(texts: Sequence[str], vectors: np.ndarray, tau: float) -> list[list[int]]:
    """Average-linkage merge loop; returns index groups sorted by min text.

    Among pairs tied for the best similarity, the pair whose
    lexicographically smallest member text is smallest wins, which makes
    the partition independent of input order.
    """
    if not (0.0 < tau <= 1.0):
        raise InvalidInputError(f"similarity threshold must be in (0, 1], got {tau}")
    n = len(texts)
    if n == 0:
        return []
    members: list[list[int]] = [[i] for i in range(n)]
    sums = vectors.astype(float).copy()
    counts = np.ones(n)
    min_text = list(texts)
    active = np.ones(n, dtype=bool)
    sims = vectors @ vectors.T
    np.fill_diagonal(sims, -np.inf)

    while active.sum() > 1:
        best = float(sims.max())
        if best < tau:
            break
        rows, cols = np.where(sims >= best - TIE_EPS)
        pairs = {(int(min(r, c)), int(max(r, c))) for r, c in zip(rows, cols)}
        # index pair as final tie-break: duplicate min texts can occur when
        # merging a batch with a copy of itself
        i, j = min(pairs, key=lambda p: (tuple(sorted((min_text[p[0]], min_text[p[1]]))), p))
        members[i] += members[j]
        sums[i] += sums[j]
        counts[i] += counts[j]
        min_text[i] = min(min_text[i], min_text[j])
        active[j] = False
        sims[j, :] = -np.inf
        sims[:, j] = -np.inf
        others = np.where(active)[0]
        others = others[others != i]
        if others.size:
            values = (sums[others] @ sums[i]) / (counts[others] * counts[i])
            sims[i, others] = values
            sims[others, i] = values

    kept = [sorted(members[k]) for k in np.where(active)[0]]
    kept.sort(key=lambda idx: min(texts[k] for k in idx))
    return kept


def cluster(
    pairs: Sequence[tuple[QueryGroup, np.ndarray]],
    tau: float,
    dictionary: EntityDictionary | None = None,
) -> list[QueryCluster]:
    """Cluster query groups by embedding similarity at threshold `tau`."""
    if not pairs:
        return []
    try:
        vectors = np.stack([np.asarray(e, dtype=float) for _g, e in pairs])
    except ValueError as exc:
        raise InvalidInputError(f"inconsistent embedding dimensions: {exc}") from exc
    texts = [g.query_text for g, _e in pairs]
    members = [
        ClusterMember(
            group=g,
            embedding=vectors[k],
            template=template_for(g.query_text, dictionary).pattern if dictionary else g.query_text,
        )
        for k, (g, _e) in enumerate(pairs)
    ]
    partition = _agglomerate(texts, vectors, tau)
    return [make_cluster([members[k] for k in part]) for part in partition]


def _rep_order_key(record: FunctionCallRecord) -> tuple[int, int, str]:
    # completeness desc, recency desc, record_id asc
    return (-record.completeness(), -record.timestamp_ms, record.record_id)


def _truncate_group(group: QueryGroup, cap: int) -> QueryGroup:
    if group.record_count <= cap:
        return group
    if not group.records:
        raise MissingRecordsError(
            f"group {group.query_text!r} needs record bodies to prune to {cap}"
        )
    kept = tuple(sorted(group.records, key=_rep_order_key)[:cap])
    histogram = dict(sorted(Counter(r.called_function for r in kept).items()))
    return QueryGroup(query_text=group.query_text, records=kept, function_histogram=histogram)


def prune(cluster_in: QueryCluster, config: ClusteringConfig) -> QueryCluster:
    """Shrink a cluster to its configured size caps.

    Near-duplicate member groups (pairwise similarity at or above the
    threshold) fold into the higher-record-count group; each group then
    keeps its most complete and most recent records; finally the group
    count itself is capped, preferring high record counts.
    """
    order = sorted(
        cluster_in.members, key=lambda m: (-m.group.record_count, m.group.query_text)
    )
    kept: list[ClusterMember] = []
    folded: dict[int, list[FunctionCallRecord]] = {}
    for member in order:
        best_k = None
        best_sim = config.near_duplicate_threshold
        for k, keeper in enumerate(kept):
            sim = float(np.dot(member.embedding, keeper.embedding))
            if sim >= best_sim:
                best_k, best_sim = k, sim
        if best_k is None:
            kept.append(member)
            folded[len(kept) - 1] = []
        else:
            if not member.group.records and member.group.record_count > 0:
                raise MissingRecordsError(
                    f"group {member.group.query_text!r} needs record bodies to fold"
                )
            folded[best_k].extend(member.group.records)

    merged: list[ClusterMember] = []
    for k, keeper in enumerate(kept):
        extra = folded[k]
        if extra:
            records = keeper.group.records + tuple(extra)
            histogram = dict(sorted(Counter(r.called_function for r in records).items()))
            group = QueryGroup(
                query_text=keeper.group.query_text,
                records=records,
                function_histogram=histogram,
            )
            keeper = ClusterMember(group=group, embedding=keeper.embedding, template=keeper.template)
        merged.append(
            ClusterMember(
                group=_truncate_group(keeper.group, config.max_records_per_query),
                embedding=keeper.embedding,
                template=keeper.template,
            )
        )

    merged.sort(key=lambda m: (-m.group.record_count, m.group.query_text))
    merged = merged[: config.max_queries_per_cluster]
    return make_cluster(
        merged, label=cluster_in.label, dominant_function=cluster_in.dominant_function
    )


def merge_batches(
    existing: Sequence[QueryCluster],
    incoming: Sequence[QueryCluster],
    config: ClusteringConfig,
) -> list[QueryCluster]:
    """Second-level clustering over centroids, then pruning.

    Clusters formed by combining two or more inputs lose their labels so a
    stale simple/complex call can never survive an incremental update;
    relabeling is the filtering stage's job.

    With one side empty there is nothing to reconcile: the other side is
    returned pruned, without re-running the threshold logic over a batch
    that was just clustered at the same threshold.
    """
    if not existing or not incoming:
        only = [prune(c, config) for c in (list(existing) + list(incoming))]
        only.sort(key=lambda c: c.min_query_text())
        return only
    inputs = list(existing) + list(incoming)
    if not inputs:
        return []
    dims = {c.centroid.shape for c in inputs}
    if len(dims) != 1:
        raise InvalidInputError(f"mixed centroid dimensions: {dims}")
    texts = [c.min_query_text() for c in inputs]
    centroids = np.stack([c.centroid for c in inputs])
    partition = _agglomerate(texts, centroids, config.similarity_threshold)

    merged: list[QueryCluster] = []
    for part in partition:
        if len(part) == 1:
            merged.append(inputs[part[0]])
        else:
            members: list[ClusterMember] = []
            for k in part:
                members.extend(inputs[k].members)
            merged.append(make_cluster(members, label=LABEL_UNLABELED))
    pruned = [prune(c, config) for c in merged]
    pruned.sort(key=lambda c: c.min_query_text())
    return pruned


def check_centroid(cluster_in: QueryCluster, tol: float = CENTROID_TOL) -> bool:
    """Re-derive the centroid from members and compare; used by tests."""
    return bool(np.linalg.norm(compute_centroid(cluster_in.members) - cluster_in.centroid) <= tol)


# Snapshot store: one JSON document per snapshot, append-only files. The
# gateway loads the newest file in its snapshot directory. Members carry
# record ids, not bodies; stages that need bodies rehydrate them from the
# validated record file.

def snapshot_doc(
    clusters: Sequence[QueryCluster], vectorizer_name: str, dimension: int
) -> dict[str, Any]:
    cluster_objs = []
    for c in sorted(clusters, key=lambda c: c.min_query_text()):
        members = [
            {
                "query": m.group.query_text,
                "embedding": [float(x) for x in m.embedding],
                "record_ids": [r.record_id for r in m.group.records],
                "function_histogram": dict(sorted(m.group.function_histogram.items())),
            }
            for m in c.members
        ]
        cluster_objs.append(
            {
                "cluster_id": c.cluster_id,
                "label": c.label,
                "dominant_function": c.dominant_function,
                "centroid": [float(x) for x in c.centroid],
                "templates": list(c.templates),
                "members": members,
            }
        )
    body = {"vectorizer_name": vectorizer_name, "dimension": dimension, "clusters": cluster_objs}
    canonical = json.dumps(body, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    snapshot_id = "s" + hashlib.blake2b(canonical.encode("utf-8"), digest_size=8).hexdigest()
    return {"snapshot_id": snapshot_id, **body}


def write_snapshot(path: str | Path, doc: Mapping[str, Any]) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_snapshot(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read snapshot {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"snapshot {path} is not valid JSON: {exc}") from exc
    for key in ("snapshot_id", "vectorizer_name", "dimension", "clusters"):
        if key not in doc:
            raise DataError(f"snapshot {path} missing field {key!r}")
    return doc


def latest_snapshot(directory: str | Path) -> Path:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise DataError(f"no snapshot files in {directory}")
    return paths[-1]


def clusters_from_snapshot(
    doc: Mapping[str, Any],
    dictionary: EntityDictionary | None = None,
    records_by_id: Mapping[str, FunctionCallRecord] | None = None,
) -> list[QueryCluster]:
    """Rebuild clusters from a snapshot document.

    With `records_by_id` the groups get full record bodies (missing ids are
    a DataError); without it they stay id-free skeletons good enough for
    routing-table construction and replay. With a dictionary the member
    templates are recomputed so they match serving-time templatization;
    otherwise the stored cluster-level templates are kept verbatim.
    """
    clusters: list[QueryCluster] = []
    for obj in doc["clusters"]:
        members: list[ClusterMember] = []
        for mobj in obj["members"]:
            text = mobj["query"]
            records: tuple[FunctionCallRecord, ...] = ()
            if records_by_id is not None:
                try:
                    records = tuple(records_by_id[rid] for rid in mobj["record_ids"])
                except KeyError as exc:
                    raise DataError(f"snapshot references unknown record {exc}") from exc
            group = QueryGroup(
                query_text=text,
                records=records,
                function_histogram=dict(mobj["function_histogram"]),
            )
            template = template_for(text, dictionary).pattern if dictionary else text
            members.append(
                ClusterMember(
                    group=group,
                    embedding=np.asarray(mobj["embedding"], dtype=float),
                    template=template,
                )
            )
        members.sort(key=lambda m: m.group.query_text)
        if dictionary is not None:
            templates = tuple(sorted({m.template for m in members}))
        else:
            templates = tuple(obj["templates"])
        histogram: Counter[str] = Counter()
        for member in members:
            histogram.update(member.group.function_histogram)
        clusters.append(
            QueryCluster(
                cluster_id=obj["cluster_id"],
                members=tuple(members),
                centroid=np.asarray(obj["centroid"], dtype=float),
                templates=templates,
                function_histogram=dict(sorted(histogram.items())),
                label=obj["label"],
                dominant_function=obj.get("dominant_function"),
            )
        )
    return clusters


def relabel(cluster_in: QueryCluster, label: str, dominant: str | None) -> QueryCluster:
    return replace(cluster_in, label=label, dominant_function=dominant)
