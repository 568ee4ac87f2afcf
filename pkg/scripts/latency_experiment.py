#!/usr/bin/env python3
"""Coverage/latency experiment: sweep the router thresholds over a synthetic
corpus and report how coverage moves the expected and median latency.

Runs the whole offline path in memory (ingest, group, embed, cluster, label,
clean, table build), then replays a held-out slice of the traffic under the
simulated latency model for each threshold setting.

Usage:
    python3 scripts/latency_experiment.py --records 4000 --seed 7
"""

import argparse
import io
import json
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from make_synthetic_corpus import make_record  # noqa: E402

from fastcall.clustering import cluster, snapshot_doc
from fastcall.corpus import group_by_query, ingest_records
from fastcall.embedding import HashedNgramVectorizer
from fastcall.filtering import FilterConfig, drop_nondominant, label_clusters
from fastcall.gateway import LatencyModel, expected_latency, replay
from fastcall.ner import EMPTY_DICTIONARY
from fastcall.router import RouterThresholds, build_routing_table


def build_corpus(n, seed):
    rng = random.Random(seed)
    buffer = io.BytesIO()
    for i in range(n):
        buffer.write(json.dumps(make_record(rng, i), ensure_ascii=False).encode("utf-8"))
        buffer.write(b"\n")
    buffer.seek(0)
    records, diagnostics = ingest_records(buffer)
    assert not [d for d in diagnostics if d.severity == "error"]
    return records


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--records", type=int, default=4000)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--holdout", type=float, default=0.2)
    args = parser.parse_args()

    records = build_corpus(args.records, args.seed)
    split = int(len(records) * (1.0 - args.holdout))
    train, evaluation = records[:split], records[split:]

    vectorizer = HashedNgramVectorizer()
    groups = group_by_query(train)
    embeddings = vectorizer.embed_many([g.query_text for g in groups])
    clusters = cluster(list(zip(groups, embeddings)), 0.85)
    labeled = label_clusters(clusters, FilterConfig())
    cleaned = [drop_nondominant(c) if c.label == "simple" else c for c in labeled]
    doc = snapshot_doc(cleaned, vectorizer.name, vectorizer.dimension)
    simple = sum(1 for c in cleaned if c.label == "simple")
    print(f"training: {len(train)} records, {len(groups)} distinct queries,")
    print(f"          {len(cleaned)} clusters ({simple} simple), snapshot {doc['snapshot_id']}")
    print(f"holdout:  {len(evaluation)} records\n")

    model = LatencyModel()
    baseline = model.large_ms
    header = f"{'exemplar/centroid':>18} {'coverage':>9} {'expected':>9} {'median':>8} {'p90':>7} {'disagree':>9}"
    print(header)
    print("-" * len(header))
    for exemplar_sim, centroid_sim in [(0.99, 0.99), (0.95, 0.92), (0.92, 0.88), (0.88, 0.82)]:
        thresholds = RouterThresholds(exemplar_sim=exemplar_sim, centroid_sim=centroid_sim)
        table, _ = build_routing_table(
            cleaned, thresholds, doc["snapshot_id"], vectorizer.name, vectorizer.dimension
        )
        report = replay(evaluation, table, vectorizer, EMPTY_DICTIONARY, model, seed=args.seed)
        rate = report.small_path_disagreement_rate
        print(
            f"{exemplar_sim:>9.2f}/{centroid_sim:<8.2f}"
            f" {report.coverage * 100:>8.1f}%"
            f" {report.expected_ms:>8.1f}ms"
            f" {report.median_ms:>7.1f}ms"
            f" {report.p90_ms:>6.1f}ms"
            f" {('%.2f%%' % (rate * 100)) if rate is not None else 'n/a':>9}"
        )
    print()
    print(
        "reference points: coverage 0%% -> %.0f ms, coverage 60%% -> %.0f ms, coverage 100%% -> %.0f ms"
        % (
            expected_latency(model, 0.0),
            expected_latency(model, 0.6),
            expected_latency(model, 1.0),
        )
    )
    print(f"large-only baseline {baseline} ms")


if __name__ == "__main__":
    main()
