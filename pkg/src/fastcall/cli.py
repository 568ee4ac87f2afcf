"""Command-line pipeline driver.

Commands communicate only through files (validated record JSONL, cluster
snapshots, training JSONL, report JSON), so every stage is re-runnable on
its own and the daily incremental job is just a cron-style `merge`. All
outputs are written atomically via temp file + rename.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import clustering, filtering, gateway as gw, ner, router
from .corpus import (
    Diagnostic,
    FunctionCallRecord,
    group_by_query,
    ingest_records,
    serialize_records,
)
from .embedding import Vectorizer, make_vectorizer
from .errors import (
    BackendUnavailableError,
    DataError,
    FastcallError,
    InvalidInputError,
    ServiceUnavailableError,
)
from .paramgen import DEFAULT_ELIDED_PREFIX, HttpGenerator, StubGenerator, TokenMapping


class UsageError(Exception):
    pass


THRESHOLD_NAMES = ("similarity", "dominance", "exemplar_sim", "centroid_sim", "margin")


@dataclass
class PipelineConfig:
    """Everything the pipeline and the gateway read from the config file."""

    corpus_path: str | None = None
    dictionaries: list[str] = field(default_factory=list)
    snapshot_dir: str | None = None
    training_out: str | None = None

    vectorizer_name: str = "hashed-ngram"
    dimension: int = 256
    vectorizer_url: str | None = None
    vectorizer_timeout_s: float = 0.2

    similarity: float = 0.85
    dominance: float = 0.9
    exemplar_sim: float = 0.92
    centroid_sim: float = 0.88
    margin: float = 0.05
    routing_deadline_ms: float = 50.0

    batch_size: int = 100_000
    max_queries_per_cluster: int = 200
    max_records_per_query: int = 5
    near_duplicate_threshold: float = 0.98

    per_function_target: int = 500
    min_cluster_records: int = 5

    routing_ms: int = 50
    small_ms: int = 300
    large_ms: int = 1600

    slot_map_path: str | None = None
    keyword_table_path: str | None = None
    prompt_style: str = "verbose"
    elided_prefix: str = DEFAULT_ELIDED_PREFIX
    paramgen_url: str | None = None
    paramgen_deadline_ms: int = 300
    token_mapping: dict[str, str] | None = None

    large_url: str | None = None
    large_deadline_ms: int = 3000

    decision_log: str | None = None
    seed: int = 0

    def clustering_config(self) -> clustering.ClusteringConfig:
        return clustering.ClusteringConfig(
            similarity_threshold=self.similarity,
            batch_size=self.batch_size,
            max_queries_per_cluster=self.max_queries_per_cluster,
            max_records_per_query=self.max_records_per_query,
            near_duplicate_threshold=self.near_duplicate_threshold,
        )

    def filter_config(self) -> filtering.FilterConfig:
        return filtering.FilterConfig(
            dominance_threshold=self.dominance,
            per_function_target=self.per_function_target,
            min_cluster_records=self.min_cluster_records,
        )

    def router_thresholds(self) -> router.RouterThresholds:
        return router.RouterThresholds(
            exemplar_sim=self.exemplar_sim,
            centroid_sim=self.centroid_sim,
            margin=self.margin,
            deadline_ms=self.routing_deadline_ms,
        )

    def latency_model(self) -> gw.LatencyModel:
        return gw.LatencyModel(
            routing_ms=self.routing_ms, small_ms=self.small_ms, large_ms=self.large_ms
        )

    def vectorizer(self) -> Vectorizer:
        return make_vectorizer(
            self.vectorizer_name,
            dimension=self.dimension,
            url=self.vectorizer_url,
            **({"timeout_s": self.vectorizer_timeout_s} if self.vectorizer_name == "external" else {}),
        )

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "PipelineConfig":
        cfg = cls()
        paths = obj.get("paths", {})
        cfg.corpus_path = paths.get("corpus", cfg.corpus_path)
        cfg.dictionaries = list(paths.get("dictionaries", cfg.dictionaries))
        cfg.snapshot_dir = paths.get("snapshot_dir", cfg.snapshot_dir)
        cfg.training_out = paths.get("training_out", cfg.training_out)
        vec = obj.get("vectorizer", {})
        cfg.vectorizer_name = vec.get("name", cfg.vectorizer_name)
        cfg.dimension = int(vec.get("dimension", cfg.dimension))
        cfg.vectorizer_url = vec.get("url", cfg.vectorizer_url)
        cfg.vectorizer_timeout_s = float(vec.get("timeout_s", cfg.vectorizer_timeout_s))
        thresholds = obj.get("thresholds", {})
        for name in THRESHOLD_NAMES:
            if name in thresholds:
                setattr(cfg, name, float(thresholds[name]))
        cfg.routing_deadline_ms = float(obj.get("routing_deadline_ms", cfg.routing_deadline_ms))
        cl = obj.get("clustering", {})
        cfg.batch_size = int(cl.get("batch_size", cfg.batch_size))
        cfg.max_queries_per_cluster = int(cl.get("max_queries_per_cluster", cfg.max_queries_per_cluster))
        cfg.max_records_per_query = int(cl.get("max_records_per_query", cfg.max_records_per_query))
        cfg.near_duplicate_threshold = float(
            cl.get("near_duplicate_threshold", cfg.near_duplicate_threshold)
        )
        fl = obj.get("filtering", {})
        cfg.per_function_target = int(fl.get("per_function_target", cfg.per_function_target))
        cfg.min_cluster_records = int(fl.get("min_cluster_records", cfg.min_cluster_records))
        lat = obj.get("latency", {})
        cfg.routing_ms = int(lat.get("routing_ms", cfg.routing_ms))
        cfg.small_ms = int(lat.get("small_ms", cfg.small_ms))
        cfg.large_ms = int(lat.get("large_ms", cfg.large_ms))
        pg = obj.get("paramgen", {})
        cfg.slot_map_path = pg.get("slot_map", cfg.slot_map_path)
        cfg.keyword_table_path = pg.get("keyword_table", cfg.keyword_table_path)
        cfg.prompt_style = pg.get("prompt_style", cfg.prompt_style)
        cfg.elided_prefix = pg.get("elided_prefix", cfg.elided_prefix)
        cfg.paramgen_url = pg.get("backend_url", cfg.paramgen_url)
        cfg.paramgen_deadline_ms = int(pg.get("deadline_ms", cfg.paramgen_deadline_ms))
        if pg.get("token_mapping") is not None:
            cfg.token_mapping = dict(pg["token_mapping"])
        lb = obj.get("large_backend", {})
        cfg.large_url = lb.get("url", cfg.large_url)
        cfg.large_deadline_ms = int(lb.get("deadline_ms", cfg.large_deadline_ms))
        cfg.decision_log = obj.get("decision_log", cfg.decision_log)
        cfg.seed = int(obj.get("seed", cfg.seed))
        return cfg


def load_config(args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "config", None):
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise DataError(f"config {args.config} is not valid JSON: {exc}") from exc
        cfg = PipelineConfig.from_obj(obj)
    else:
        cfg = PipelineConfig()
    for override in getattr(args, "threshold", None) or []:
        name, _, value = override.partition("=")
        if name not in THRESHOLD_NAMES or not value:
            raise UsageError(
                f"--threshold takes <name>=<value> with name in {THRESHOLD_NAMES}, got {override!r}"
            )
        try:
            setattr(cfg, name, float(value))
        except ValueError as exc:
            raise UsageError(f"bad threshold value {value!r}") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def read_record_file(path: str | Path) -> list[FunctionCallRecord]:
    try:
        with open(path, "rb") as fh:
            records, diagnostics = ingest_records(fh)
    except OSError as exc:
        raise DataError(f"cannot read records {path}: {exc}") from exc
    errors = [d for d in diagnostics if d.severity == "error"]
    if errors:
        raise DataError(f"{path}: {len(errors)} invalid lines, first: {errors[0].reason}")
    return records


def records_index(records: Sequence[FunctionCallRecord]) -> dict[str, FunctionCallRecord]:
    return {r.record_id: r for r in records}


def load_dictionary(cfg: PipelineConfig) -> ner.EntityDictionary:
    if not cfg.dictionaries:
        return ner.EMPTY_DICTIONARY
    dictionary, _diags = ner.load_dictionaries(cfg.dictionaries)
    return dictionary


def _diagnostics_text(diagnostics: Sequence[Diagnostic]) -> str:
    return "".join(json.dumps(d.to_obj(), ensure_ascii=False) + "\n" for d in diagnostics)


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    del cfg
    try:
        with open(args.input, "rb") as fh:
            records, diagnostics = ingest_records(fh)
    except OSError as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from exc
    atomic_write_text(args.out, serialize_records(records))
    if args.diagnostics:
        atomic_write_text(args.diagnostics, _diagnostics_text(diagnostics))
    errors = sum(1 for d in diagnostics if d.severity == "error")
    print(
        f"ingested {len(records)} records, rejected {errors} lines,"
        f" {len(diagnostics) - errors} warnings",
        file=sys.stderr,
    )
    return 0


def _cluster_records(
    records: Sequence[FunctionCallRecord],
    cfg: PipelineConfig,
    allow_small_batch: bool,
) -> list[clustering.QueryCluster]:
    ccfg = cfg.clustering_config()
    ccfg.validate(allow_small_batch=allow_small_batch)
    vectorizer = cfg.vectorizer()
    dictionary = load_dictionary(cfg)
    # The first batch is kept unpruned so dominance labeling sees unbiased
    # function frequencies; pruning belongs to the incremental merge path.
    clusters: list[clustering.QueryCluster] = []
    for start in range(0, len(records), cfg.batch_size):
        batch = records[start : start + cfg.batch_size]
        groups = group_by_query(batch)
        embeddings = vectorizer.embed_many([g.query_text for g in groups])
        batch_clusters = clustering.cluster(
            list(zip(groups, embeddings)), ccfg.similarity_threshold, dictionary
        )
        if not clusters:
            clusters = batch_clusters
        else:
            clusters = clustering.merge_batches(clusters, batch_clusters, ccfg)
    return clusters


def cmd_cluster(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    records = read_record_file(args.records)
    clusters = _cluster_records(records, cfg, args.allow_small_batch)
    doc = clustering.snapshot_doc(clusters, cfg.vectorizer_name, cfg.dimension)
    atomic_write_text(args.out, json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n")
    print(f"wrote {len(clusters)} clusters to {args.out} ({doc['snapshot_id']})", file=sys.stderr)
    return 0


def _load_clusters(
    snapshot_path: str,
    cfg: PipelineConfig,
    records_path: str | Sequence[str] | None,
) -> tuple[dict[str, Any], list[clustering.QueryCluster]]:
    doc = clustering.read_snapshot(snapshot_path)
    if doc["vectorizer_name"] != cfg.vectorizer_name:
        raise DataError(
            f"snapshot vectorizer {doc['vectorizer_name']!r} != config {cfg.vectorizer_name!r}"
        )
    index = None
    if records_path:
        paths = [records_path] if isinstance(records_path, str) else list(records_path)
        index = {}
        for p in paths:
            index.update(records_index(read_record_file(p)))
    clusters = clustering.clusters_from_snapshot(
        doc, dictionary=load_dictionary(cfg), records_by_id=index
    )
    return doc, clusters


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    _doc, clusters = _load_clusters(args.snapshot, cfg, args.records)
    labeled = filtering.label_clusters(clusters, cfg.filter_config())
    cleaned = [
        filtering.drop_nondominant(c) if c.label == clustering.LABEL_SIMPLE else c
        for c in labeled
    ]
    doc = clustering.snapshot_doc(cleaned, cfg.vectorizer_name, cfg.dimension)
    atomic_write_text(args.out, json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n")
    simple = sum(1 for c in cleaned if c.label == clustering.LABEL_SIMPLE)
    print(
        f"labeled {len(cleaned)} clusters ({simple} simple) into {args.out}", file=sys.stderr
    )
    return 0


def cmd_build_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    _doc, clusters = _load_clusters(args.snapshot, cfg, args.records)
    examples, diagnostics = filtering.balanced_sample(
        clusters, cfg.filter_config(), seed=cfg.seed, prompt_style=cfg.prompt_style
    )
    for diag in diagnostics:
        print(f"build-train: {diag.reason}", file=sys.stderr)

    def lines(items):
        return "".join(
            json.dumps(
                {
                    "prompt": e.prompt,
                    "completion": e.completion,
                    "function_name": e.function_name,
                    "source_record_id": e.source_record_id,
                },
                ensure_ascii=False,
            )
            + "\n"
            for e in items
        )

    if args.holdout:
        rng = random.Random(cfg.seed + 1)
        indices = set(rng.sample(range(len(examples)), round(args.holdout * len(examples))))
        train = [e for i, e in enumerate(examples) if i not in indices]
        held = [e for i, e in enumerate(examples) if i in indices]
        atomic_write_text(args.out, lines(train))
        atomic_write_text(args.holdout_out or args.out + ".holdout", lines(held))
        print(f"wrote {len(train)} train / {len(held)} holdout examples", file=sys.stderr)
    else:
        atomic_write_text(args.out, lines(examples))
        print(f"wrote {len(examples)} training examples to {args.out}", file=sys.stderr)
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    ccfg = cfg.clustering_config()
    ccfg.validate(allow_small_batch=args.allow_small_batch)
    _edoc, existing = _load_clusters(args.existing, cfg, args.records)
    _idoc, incoming = _load_clusters(args.incoming, cfg, args.records)
    merged = clustering.merge_batches(existing, incoming, ccfg)
    doc = clustering.snapshot_doc(merged, cfg.vectorizer_name, cfg.dimension)
    atomic_write_text(args.out, json.dumps(doc, ensure_ascii=False, separators=(",", ":")) + "\n")
    print(
        f"merged {len(existing)}+{len(incoming)} -> {len(merged)} clusters into {args.out}",
        file=sys.stderr,
    )
    return 0


def _build_table(snapshot_path: str, cfg: PipelineConfig) -> router.RoutingTable:
    return gw.table_from_snapshot_file(
        snapshot_path, cfg.router_thresholds(), load_dictionary(cfg)
    )


def cmd_route(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    table = _build_table(args.snapshot, cfg)
    decision = router.match_query(
        args.query, 0, table, cfg.vectorizer(), load_dictionary(cfg)
    )
    print(
        json.dumps(
            {
                "route": decision.route,
                "reason": decision.reason,
                "matched_cluster": decision.matched_cluster,
                "matched_function": decision.matched_function,
                "score": decision.score,
                "elapsed_us": decision.elapsed_us,
            },
            ensure_ascii=False,
        )
    )
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    table = _build_table(args.snapshot, cfg)
    records = read_record_file(args.records)
    report = gw.replay(
        records,
        table,
        cfg.vectorizer(),
        load_dictionary(cfg),
        cfg.latency_model(),
        seed=cfg.seed,
        jitter_ms=args.jitter,
    )
    text = json.dumps(report.to_obj(), ensure_ascii=False, indent=2) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote replay report to {args.out}", file=sys.stderr)
    else:
        print(text, end="")
    return 0


def _load_json_file(path: str | None) -> dict | None:
    if not path:
        return None
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def build_gateway(cfg: PipelineConfig, snapshot_path: str | Path) -> gw.Gateway:
    dictionary = load_dictionary(cfg)
    table = gw.table_from_snapshot_file(snapshot_path, cfg.router_thresholds(), dictionary)
    if cfg.paramgen_url:
        small: Any = HttpGenerator(
            cfg.paramgen_url,
            deadline_s=cfg.paramgen_deadline_ms / 1000.0,
            prompt_style=cfg.prompt_style,
            elided_prefix=cfg.elided_prefix,
        )
    else:
        small = StubGenerator(
            slot_map=_load_json_file(cfg.slot_map_path) or {},
            keyword_table=_load_json_file(cfg.keyword_table_path) or {},
        )
    large = (
        gw.LargeModelClient(cfg.large_url, deadline_s=cfg.large_deadline_ms / 1000.0)
        if cfg.large_url
        else None
    )
    mapping = TokenMapping(pairs=cfg.token_mapping) if cfg.token_mapping else None
    return gw.Gateway(
        table=table,
        vectorizer=cfg.vectorizer(),
        dictionary=dictionary,
        small_backend=small,
        large_backend=large,
        token_mapping=mapping,
        decision_log=cfg.decision_log,
    )


def cmd_serve(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    if args.snapshot:
        snapshot_path = Path(args.snapshot)
    elif cfg.snapshot_dir:
        snapshot_path = clustering.latest_snapshot(cfg.snapshot_dir)
    else:
        raise UsageError("serve needs --snapshot or a snapshot_dir in the config")
    gateway = build_gateway(cfg, snapshot_path)
    print(f"serving snapshot {gateway.table.snapshot_id} on {args.host}:{args.port}", file=sys.stderr)
    gw.serve(gateway, host=args.host, port=args.port)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    obj = _load_json_file(getattr(args, "in"))
    if obj is None:
        raise UsageError("report needs --in")
    model = obj.get("latency_model", {})
    large = model.get("large_ms", 1600)
    lines = [
        f"requests        {obj['total']}",
        f"routed small    {obj['routed_small']} ({obj['coverage'] * 100:.1f}% coverage)",
        f"expected        {obj['expected_ms']:.1f} ms"
        f" ({(large - obj['expected_ms']) / large * 100:.1f}% below large-only {large} ms)",
        f"mean            {obj['mean_ms']:.1f} ms",
        f"median          {obj['median_ms']:.1f} ms"
        f" ({(large - obj['median_ms']) / large * 100:.1f}% below large-only)",
        f"p90             {obj['p90_ms']:.1f} ms",
    ]
    rate = obj.get("small_path_disagreement_rate")
    lines.append(
        "disagreement    "
        + (f"{rate * 100:.2f}% of small-routed" if rate is not None else "n/a (nothing routed small)")
    )
    lines.append("decisions       " + json.dumps(obj.get("reason_counts", {}), sort_keys=True))
    print("\n".join(lines))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument(
        "--threshold",
        action="append",
        metavar="NAME=VALUE",
        help=f"threshold override, names: {', '.join(THRESHOLD_NAMES)}",
    )

    parser = _Parser(prog="fastcall", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate raw traffic into a record file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="write diagnostics JSONL here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cluster", parents=[common], help="cluster a record file into a snapshot")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-small-batch", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("filter", parents=[common], help="label clusters simple/complex and clean them")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("build-train", parents=[common], help="emit balanced training JSONL")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", type=float, default=0.0, help="held-out fraction, e.g. 0.05")
    p.add_argument("--holdout-out")
    p.set_defaults(func=cmd_build_train)

    p = sub.add_parser("merge", parents=[common], help="merge an incoming snapshot into an existing one")
    p.add_argument("--existing", required=True)
    p.add_argument("--incoming", required=True)
    p.add_argument("--records", action="append", required=True, help="record file(s) for rehydration")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-small-batch", action="store_true")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("route", parents=[common], help="print the routing decision for one query")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("replay", parents=[common], help="replay a labeled corpus and report latency")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.add_argument("--jitter", type=int, default=0, help="uniform jitter bound in ms")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", parents=[common], help="run the gateway service")
    p.add_argument("--snapshot", help="snapshot file; defaults to newest in snapshot_dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", parents=[common], help="summarize a replay report")
    p.add_argument("--in", dest="in", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (BackendUnavailableError, ServiceUnavailableError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except FastcallError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
