import itertools
import json
from collections import Counter

import numpy as np
import pytest

from fastcall import clustering
from fastcall.clustering import (
    ClusteringConfig,
    ClusterMember,
    cluster,
    clusters_from_snapshot,
    compute_centroid,
    make_cluster,
    merge_batches,
    prune,
    read_snapshot,
    snapshot_doc,
    write_snapshot,
)
from fastcall.corpus import QueryGroup, group_by_query
from fastcall.embedding import cosine_similarity
from fastcall.errors import DegenerateCentroidError, InvalidInputError
from tests import factories, oracles

LENIENT = ClusteringConfig(
    similarity_threshold=0.85,
    batch_size=100_000,
    max_queries_per_cluster=10_000,
    max_records_per_query=10_000,
    near_duplicate_threshold=1.1,  # >1 disables near-duplicate folding
)


def dummy_group(text, count=1):
    return QueryGroup(query_text=text, records=(), function_histogram={"f": count})


def random_pairs(rng, k, dim=8):
    vectors = rng.normal(size=(k, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    texts = [f"q{idx:02d}-{rng.integers(0, 999):03d}" for idx in range(k)]
    return [(dummy_group(t), v) for t, v in zip(texts, vectors)]


def partition_of(clusters_):
    return {frozenset(m.group.query_text for m in c.members) for c in clusters_}


def test_paper_recommendation_queries_form_one_cluster(vectorizer):
    queries = [
        "I want to listen to some jazz",
        "I'm into jazz lately, recommend more to me",
        "Recommend jazz songs",
        "Give me some jazz",
    ]
    vectors = [vectorizer.embed(q) for q in queries]
    sims = [
        cosine_similarity(a, b) for a, b in itertools.combinations(vectors, 2)
    ]
    tau = min(sims) - 0.02
    assert 0.0 < tau <= 1.0
    pairs = [(dummy_group(q), v) for q, v in zip(queries, vectors)]
    result = cluster(pairs, tau)
    assert len(result) == 1
    assert result[0].total_records == 4


def test_tau_above_max_similarity_gives_singletons():
    rng = np.random.default_rng(0)
    pairs = random_pairs(rng, 7)
    sims = [
        float(np.dot(pairs[i][1], pairs[j][1]))
        for i in range(7)
        for j in range(i + 1, 7)
    ]
    tau = (max(sims) + 1.0) / 2
    result = cluster(pairs, tau)
    assert len(result) == 7


def test_cluster_empty_input():
    assert cluster([], 0.9) == []


def test_cluster_rejects_bad_tau():
    rng = np.random.default_rng(1)
    with pytest.raises(InvalidInputError):
        cluster(random_pairs(rng, 3), 0.0)


def test_cluster_rejects_mixed_dimensions():
    g = dummy_group
    with pytest.raises(InvalidInputError):
        cluster([(g("a"), np.ones(4) / 2.0), (g("b"), np.ones(9) / 3.0)], 0.5)


def test_cluster_matches_bruteforce_oracle_randomized():
    rng = np.random.default_rng(42)
    for _ in range(40):
        k = int(rng.integers(1, 13))
        pairs = random_pairs(rng, k)
        tau = float(rng.uniform(0.2, 0.95))
        got = partition_of(cluster(pairs, tau))
        want = oracles.average_linkage_partition(
            [g.query_text for g, _ in pairs], np.stack([v for _, v in pairs]), tau
        )
        assert got == want


def test_cluster_permutation_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        k = int(rng.integers(2, 10))
        pairs = random_pairs(rng, k)
        tau = float(rng.uniform(0.3, 0.9))
        base = partition_of(cluster(pairs, tau))
        perm = [pairs[i] for i in rng.permutation(k)]
        assert partition_of(cluster(perm, tau)) == base


def test_cluster_deterministic_bytes(vectorizer):
    records = factories.parse_lines(factories.synth_corpus_lines(150, seed=8))
    groups = group_by_query(records)
    embeddings = vectorizer.embed_many([g.query_text for g in groups])
    docs = []
    for _ in range(2):
        result = cluster(list(zip(groups, embeddings)), 0.85)
        docs.append(json.dumps(snapshot_doc(result, "hashed-ngram", vectorizer.dimension)))
    assert docs[0] == docs[1]


def member(text, vector, count=1, records=()):
    if records:
        histogram = dict(sorted(Counter(r.called_function for r in records).items()))
    else:
        histogram = {"f": count}
    return ClusterMember(
        group=QueryGroup(
            query_text=text, records=tuple(records), function_histogram=histogram
        ),
        embedding=np.asarray(vector, dtype=float),
        template=text,
    )


def test_centroid_single_member_is_identity():
    v = np.array([0.6, 0.8, 0.0])
    assert np.allclose(compute_centroid([member("a", v)]), v, atol=1e-12)


def test_centroid_equal_weights():
    v1, v2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    expected = (v1 + v2) / np.linalg.norm(v1 + v2)
    assert np.allclose(compute_centroid([member("a", v1), member("b", v2)]), expected, atol=1e-12)


def test_centroid_weighted_hand_computed():
    # weights 3 and 1 on basis vectors: normalize(3*e1 + e2) = (3, 1, 0)/sqrt(10)
    v1, v2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    got = compute_centroid([member("a", v1, count=3), member("b", v2, count=1)])
    assert np.allclose(got, np.array([3.0, 1.0, 0.0]) / np.sqrt(10.0), atol=1e-12)


def test_centroid_degenerate_error():
    v = np.array([1.0, 0.0])
    with pytest.raises(DegenerateCentroidError):
        compute_centroid([member("a", v), member("b", -v)])


separated_clusters = factories.separated_clusters


def total_records(clusters_):
    return sum(c.total_records for c in clusters_)


def test_merge_empty_existing_is_identity_post_pruning():
    rng = np.random.default_rng(5)
    incoming = separated_clusters(rng, 4)
    pre_pruned = [prune(c, LENIENT) for c in incoming]
    merged = merge_batches([], incoming, LENIENT)
    assert snapshot_doc(merged, "v", 32) == snapshot_doc(pre_pruned, "v", 32)


def test_merge_similar_centroids_combine():
    rng = np.random.default_rng(6)
    base = rng.normal(size=16)
    base /= np.linalg.norm(base)
    a = make_cluster([member("query one", base, count=2)])
    nudged = base + rng.normal(size=16) * 0.01
    nudged /= np.linalg.norm(nudged)
    b = make_cluster([member("query two", nudged, count=3)])
    assert float(np.dot(a.centroid, b.centroid)) >= 0.9
    merged = merge_batches([a], [b], LENIENT)
    assert len(merged) == 1
    assert merged[0].function_histogram == {"f": 5}
    assert merged[0].label == clustering.LABEL_UNLABELED


def test_merge_with_copy_of_self_preserves_count():
    rng = np.random.default_rng(7)
    batch = separated_clusters(rng, 5)
    merged = merge_batches(batch, batch, LENIENT)
    assert len(merged) == len(batch)


def test_merge_conserves_records_with_lenient_pruning():
    rng = np.random.default_rng(8)
    a = separated_clusters(rng, 3)
    b = separated_clusters(rng, 4)
    merged = merge_batches(a, b, LENIENT)
    assert total_records(merged) == total_records(a) + total_records(b)
    assert len(merged) <= len(a) + len(b)


def test_merge_resets_labels_only_on_combined():
    rng = np.random.default_rng(9)
    a, b = separated_clusters(rng, 2)
    a = clustering.relabel(a, clustering.LABEL_SIMPLE, "control")
    b = clustering.relabel(b, clustering.LABEL_COMPLEX, None)
    merged = merge_batches([a], [b], LENIENT)
    by_text = {c.min_query_text(): c for c in merged}
    assert by_text[a.min_query_text()].label == clustering.LABEL_SIMPLE
    assert by_text[b.min_query_text()].label == clustering.LABEL_COMPLEX


def test_prune_noop_within_limits():
    rng = np.random.default_rng(10)
    cluster_ = separated_clusters(rng, 1)[0]
    pruned = prune(cluster_, LENIENT)
    assert snapshot_doc([pruned], "v", 32) == snapshot_doc([cluster_], "v", 32)


def test_prune_merges_identical_embeddings():
    v = np.zeros(8)
    v[0] = 1.0
    records_a = factories.parse_lines(
        [factories.record_line(f"a{i}", "play it", "control", {"command": "Pause"}, i) for i in range(3)]
    )
    records_b = factories.parse_lines(
        [factories.record_line(f"b{i}", "play it!", "control", {"command": "Pause"}, i) for i in range(2)]
    )
    cluster_ = make_cluster(
        [member("play it", v, records=records_a), member("play it!", v, records=records_b)]
    )
    config = ClusteringConfig(max_records_per_query=100, max_queries_per_cluster=100)
    pruned = prune(cluster_, config)
    assert len(pruned.members) == 1
    # higher-record-count group's text kept, records concatenated
    assert pruned.members[0].group.query_text == "play it"
    assert pruned.members[0].group.record_count == 5


def test_prune_caps_records_per_query_with_sort_oracle():
    lines = []
    # 8 records with varying completeness and recency
    specs = [
        ("r0", {"creator_name": "A", "media_name": "B"}, 50),
        ("r1", {"creator_name": "A"}, 99),
        ("r2", {"creator_name": "A", "media_name": "B", "media_type": "song"}, 10),
        ("r3", {}, 100),
        ("r4", {"creator_name": "A", "media_name": ""}, 75),
        ("r5", {"media_name": "B"}, 75),
        ("r6", {"creator_name": "A", "media_name": "B"}, 50),
        ("r7", {"creator_name": "X", "media_name": "Y", "media_type": "z"}, 9),
    ]
    for rid, arguments, ts in specs:
        lines.append(factories.record_line(rid, "play that song", "audioSearch", arguments, ts))
    records = factories.parse_lines(lines)
    group = group_by_query(records)[0]
    v = np.zeros(4)
    v[1] = 1.0
    cluster_ = make_cluster([ClusterMember(group=group, embedding=v, template=group.query_text)])
    config = ClusteringConfig(max_records_per_query=5, max_queries_per_cluster=10)
    pruned = prune(cluster_, config)
    kept_ids = {r.record_id for r in pruned.members[0].group.records}

    def oracle_key(r):
        return (-r.completeness(), -r.timestamp_ms, r.record_id)

    expected = {r.record_id for r in sorted(records, key=oracle_key)[:5]}
    assert kept_ids == expected
    assert pruned.members[0].group.record_count == 5


def test_prune_caps_group_count():
    rng = np.random.default_rng(12)
    cluster_ = separated_clusters(rng, 1, groups_per=3)[0]
    config = ClusteringConfig(
        max_queries_per_cluster=2, max_records_per_query=100, near_duplicate_threshold=1.1
    )
    pruned = prune(cluster_, config)
    assert len(pruned.members) == 2
    counts = [m.group.record_count for m in pruned.members]
    dropped = min(m.group.record_count for m in cluster_.members)
    assert min(counts) >= dropped


def test_centroid_invariant_after_operations():
    rng = np.random.default_rng(13)
    a = separated_clusters(rng, 3)
    b = separated_clusters(rng, 2)
    for c in merge_batches(a, b, LENIENT):
        assert clustering.check_centroid(c)
    for c in a:
        assert clustering.check_centroid(prune(c, LENIENT))


def test_snapshot_round_trip(tmp_path, vectorizer, music_dictionary):
    records = factories.parse_lines(factories.synth_corpus_lines(80, seed=21))
    groups = group_by_query(records)
    embeddings = vectorizer.embed_many([g.query_text for g in groups])
    clusters_ = cluster(list(zip(groups, embeddings)), 0.85, music_dictionary)
    doc = snapshot_doc(clusters_, vectorizer.name, vectorizer.dimension)
    path = tmp_path / "snap.json"
    write_snapshot(path, doc)
    loaded_doc = read_snapshot(path)
    assert loaded_doc == doc
    index = {r.record_id: r for r in records}
    loaded = clusters_from_snapshot(loaded_doc, dictionary=music_dictionary, records_by_id=index)
    assert snapshot_doc(loaded, vectorizer.name, vectorizer.dimension)["clusters"] == doc["clusters"]
    skeleton = clusters_from_snapshot(loaded_doc)
    assert [c.cluster_id for c in skeleton] == [c.cluster_id for c in loaded]
    assert all(m.group.records == () for c in skeleton for m in c.members)
    assert [c.total_records for c in skeleton] == [c.total_records for c in loaded]


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ClusteringConfig(similarity_threshold=1.5).validate(allow_small_batch=True)
    with pytest.raises(InvalidInputError):
        ClusteringConfig(batch_size=100).validate()
    ClusteringConfig(batch_size=100).validate(allow_small_batch=True)
    ClusteringConfig().validate()
