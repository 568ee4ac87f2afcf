"""Online serving and offline traffic replay.

The live service routes each request, answers on the small path when the
router allows it, and falls back to the large model on any small-path
failure. The replay simulator reruns a labeled corpus against a routing
table and reports coverage plus latency arithmetic under a configured
latency model, with the closed form computed in exact integer arithmetic
so the empirical mean and the expectation agree bit for bit when jitter
is off.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import httpx
import numpy as np

from .clustering import clusters_from_snapshot, read_snapshot
from .corpus import FunctionCallRecord, ToolSchema, tool_to_obj
from .embedding import Vectorizer
from .errors import (
    BackendUnavailableError,
    FastcallError,
    InvalidInputError,
    ServiceUnavailableError,
)
from .ner import EntityDictionary, extract_entities
from .paramgen import (
    FunctionCallResult,
    GenerationBackend,
    RoutingContext,
    TokenMapping,
    optimize_schema_tokens,
    restore_parameter_names,
    validate_result,
)
from .router import (
    ROUTE_LARGE,
    ROUTE_SMALL,
    RouterThresholds,
    RoutingTable,
    build_routing_table,
    match_query,
)

LATENCY_BUCKETS_MS = (1, 2, 5, 10, 25, 50, 100, 250, 500, 1000, 2500, 5000)


@dataclass(frozen=True)
class LatencyModel:
    routing_ms: int = 50
    small_ms: int = 300
    large_ms: int = 1600

    def validate(self) -> None:
        if min(self.routing_ms, self.small_ms, self.large_ms) < 0:
            raise InvalidInputError("latencies must be >= 0")
        if not self.small_ms < self.large_ms:
            raise InvalidInputError("small-path latency must be below large-path latency")


def expected_latency(model: LatencyModel, coverage: float) -> float:
    """Closed-form expected per-request latency at the given coverage."""
    if not (0.0 <= coverage <= 1.0):
        raise InvalidInputError(f"coverage must be in [0, 1], got {coverage}")
    return model.routing_ms + model.small_ms * coverage + model.large_ms * (1.0 - coverage)


@dataclass(frozen=True)
class TrafficReport:
    total: int
    routed_small: int
    coverage: float
    expected_ms: float
    mean_ms: float
    median_ms: float
    p90_ms: float
    small_path_disagreement_rate: float | None
    reason_counts: Mapping[str, int]
    snapshot_id: str
    latency_model: LatencyModel
    jitter_ms: int = 0
    seed: int = 0

    def to_obj(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "routed_small": self.routed_small,
            "coverage": self.coverage,
            "expected_ms": self.expected_ms,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p90_ms": self.p90_ms,
            "small_path_disagreement_rate": self.small_path_disagreement_rate,
            "reason_counts": dict(sorted(self.reason_counts.items())),
            "snapshot_id": self.snapshot_id,
            "latency_model": {
                "routing_ms": self.latency_model.routing_ms,
                "small_ms": self.latency_model.small_ms,
                "large_ms": self.latency_model.large_ms,
            },
            "jitter_ms": self.jitter_ms,
            "seed": self.seed,
        }


def replay(
    records: Sequence[FunctionCallRecord],
    table: RoutingTable,
    vectorizer: Vectorizer,
    dictionary: EntityDictionary,
    model: LatencyModel,
    seed: int = 0,
    jitter_ms: int = 0,
) -> TrafficReport:
    """Route a labeled corpus and simulate per-request latency.

    Small routes cost routing + small latency, large routes routing +
    large latency, plus an optional seeded uniform jitter. Disagreement is
    measured against each record's logged called_function.
    """
    if not records:
        raise InvalidInputError("replay needs a non-empty corpus")
    model.validate()
    rng = random.Random(seed)
    latencies: list[int] = []
    reason_counts: dict[str, int] = {}
    routed_small = 0
    disagreements = 0
    for record in records:
        decision = match_query(record.query, len(record.history), table, vectorizer, dictionary)
        reason_counts[decision.reason] = reason_counts.get(decision.reason, 0) + 1
        jitter = rng.randint(0, jitter_ms) if jitter_ms else 0
        if decision.route == ROUTE_SMALL:
            routed_small += 1
            latencies.append(model.routing_ms + model.small_ms + jitter)
            if decision.matched_function != record.called_function:
                disagreements += 1
        else:
            latencies.append(model.routing_ms + model.large_ms + jitter)
    total = len(records)
    large = total - routed_small
    expected_num = model.routing_ms * total + model.small_ms * routed_small + model.large_ms * large
    arr = np.asarray(latencies)
    return TrafficReport(
        total=total,
        routed_small=routed_small,
        coverage=routed_small / total,
        expected_ms=expected_num / total,
        mean_ms=sum(latencies) / total,
        median_ms=float(np.median(arr)),
        p90_ms=float(np.percentile(arr, 90, method="lower")),
        small_path_disagreement_rate=(disagreements / routed_small) if routed_small else None,
        reason_counts=dict(sorted(reason_counts.items())),
        snapshot_id=table.snapshot_id,
        latency_model=model,
        jitter_ms=jitter_ms,
        seed=seed,
    )


class LargeModelClient:
    """HTTP client for the large-model fallback backend."""

    def __init__(self, url: str, deadline_s: float = 3.0, client: httpx.Client | None = None):
        self.url = url
        self._client = client or httpx.Client(timeout=deadline_s)

    def call(
        self,
        query: str,
        history: Sequence[tuple[str, str]],
        tools: Sequence[ToolSchema],
    ) -> FunctionCallResult:
        body = {
            "query": query,
            "history": [{"role": r, "text": t} for r, t in history],
            "tools": [tool_to_obj(t) for t in tools],
        }
        try:
            response = self._client.post(self.url, json=body)
        except httpx.HTTPError as exc:
            raise BackendUnavailableError(f"large backend unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise BackendUnavailableError(f"large backend returned {response.status_code}")
        try:
            obj = response.json()
            result = FunctionCallResult(name=obj["name"], arguments=dict(obj["arguments"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendUnavailableError(f"malformed large-backend response: {exc}") from exc
        validate_result(result, tools)
        return result


@dataclass
class _Metrics:
    total: int = 0
    routed_small: int = 0
    routed_large: int = 0
    errors: int = 0
    small_path_fallbacks: int = 0
    reason_counts: dict[str, int] = field(default_factory=dict)
    latency_buckets: dict[str, int] = field(default_factory=dict)

    def observe_latency(self, elapsed_ms: float) -> None:
        for bound in LATENCY_BUCKETS_MS:
            if elapsed_ms <= bound:
                key = f"le_{bound}ms"
                break
        else:
            key = "gt_5000ms"
        self.latency_buckets[key] = self.latency_buckets.get(key, 0) + 1

    def to_obj(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "routed_small": self.routed_small,
            "routed_large": self.routed_large,
            "errors": self.errors,
            "small_path_fallbacks": self.small_path_fallbacks,
            "reason_counts": dict(sorted(self.reason_counts.items())),
            "latency_buckets": dict(sorted(self.latency_buckets.items())),
        }


@dataclass(frozen=True)
class GatewayResponse:
    result: FunctionCallResult
    route: str
    reason: str
    timings_ms: Mapping[str, float]
    snapshot_id: str


class Gateway:
    """Request handling around an immutable routing table snapshot.

    Reload builds the new table first and then swaps one reference, so an
    in-flight request keeps the snapshot it started with.
    """

    def __init__(
        self,
        table: RoutingTable,
        vectorizer: Vectorizer,
        dictionary: EntityDictionary,
        small_backend: GenerationBackend,
        large_backend: LargeModelClient | None = None,
        token_mapping: TokenMapping | None = None,
        decision_log: str | Path | None = None,
    ):
        if table.vectorizer_name != vectorizer.name:
            raise InvalidInputError(
                f"table built for vectorizer {table.vectorizer_name!r},"
                f" gateway runs {vectorizer.name!r}"
            )
        self._table = table
        self.vectorizer = vectorizer
        self.dictionary = dictionary
        self.small_backend = small_backend
        self.large_backend = large_backend
        self.token_mapping = token_mapping
        self.decision_log = Path(decision_log) if decision_log else None
        self._lock = threading.Lock()
        self._metrics = _Metrics()

    @property
    def table(self) -> RoutingTable:
        return self._table

    def reload_from_snapshot(self, snapshot_path: str | Path) -> str:
        doc = read_snapshot(snapshot_path)
        if doc["vectorizer_name"] != self.vectorizer.name:
            raise InvalidInputError(
                f"snapshot vectorizer {doc['vectorizer_name']!r} != {self.vectorizer.name!r}"
            )
        clusters = clusters_from_snapshot(doc, dictionary=self.dictionary)
        table, _diags = build_routing_table(
            clusters,
            self._table.thresholds,
            snapshot_id=doc["snapshot_id"],
            vectorizer_name=doc["vectorizer_name"],
            dimension=int(doc["dimension"]),
        )
        self._table = table  # atomic reference swap
        return table.snapshot_id

    def _log_decision(self, query: str, route: str, reason: str, score, elapsed_us: int) -> None:
        if self.decision_log is None:
            return
        line = json.dumps(
            {
                "query_hash": hashlib.sha256(query.encode("utf-8")).hexdigest()[:16],
                "route": route,
                "reason": reason,
                "score": score,
                "elapsed_us": elapsed_us,
            }
        )
        with self._lock:
            with self.decision_log.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def handle(
        self,
        query: str,
        history: Sequence[tuple[str, str]],
        tools: Sequence[ToolSchema],
    ) -> GatewayResponse:
        """Answer one request; always a full result or a service error."""
        table = self._table
        start = time.perf_counter()
        decision = match_query(query, len(history), table, self.vectorizer, self.dictionary)
        timings: dict[str, float] = {"routing": decision.elapsed_us / 1000.0}
        route, reason = decision.route, decision.reason
        result: FunctionCallResult | None = None

        if decision.route == ROUTE_SMALL:
            gen_start = time.perf_counter()
            try:
                gen_tools: Sequence[ToolSchema] = tools
                if self.token_mapping is not None:
                    gen_tools, _ = optimize_schema_tokens(tools, self.token_mapping)
                context = RoutingContext(
                    dominant_function=decision.matched_function or "",
                    spans=tuple(extract_entities(query, self.dictionary)),
                )
                raw = self.small_backend.generate(query, tuple(history), gen_tools, context)
                if self.token_mapping is not None:
                    raw = restore_parameter_names(raw, self.token_mapping)
                validate_result(raw, tools)
                result = raw
            except FastcallError:
                route, reason = ROUTE_LARGE, "small_path_failure"
                result = None
            timings["generate"] = (time.perf_counter() - gen_start) * 1000.0

        if result is None:
            large_start = time.perf_counter()
            try:
                if self.large_backend is None:
                    raise BackendUnavailableError("no large backend configured")
                result = self.large_backend.call(query, tuple(history), tools)
            except FastcallError as exc:
                with self._lock:
                    self._metrics.total += 1
                    self._metrics.errors += 1
                raise ServiceUnavailableError(str(exc)) from exc
            finally:
                timings["large"] = (time.perf_counter() - large_start) * 1000.0

        total_ms = (time.perf_counter() - start) * 1000.0
        timings["total"] = total_ms
        timings = {k: round(v, 3) for k, v in timings.items()}
        with self._lock:
            self._metrics.total += 1
            if route == ROUTE_SMALL:
                self._metrics.routed_small += 1
            else:
                self._metrics.routed_large += 1
                if reason == "small_path_failure":
                    self._metrics.small_path_fallbacks += 1
            self._metrics.reason_counts[reason] = self._metrics.reason_counts.get(reason, 0) + 1
            self._metrics.observe_latency(total_ms)
        self._log_decision(query, route, reason, decision.score, decision.elapsed_us)
        return GatewayResponse(
            result=result,
            route=route,
            reason=reason,
            timings_ms=timings,
            snapshot_id=table.snapshot_id,
        )

    def metrics_obj(self) -> dict[str, Any]:
        with self._lock:
            return self._metrics.to_obj()


def table_from_snapshot_file(
    snapshot_path: str | Path,
    thresholds: RouterThresholds,
    dictionary: EntityDictionary,
) -> RoutingTable:
    doc = read_snapshot(snapshot_path)
    clusters = clusters_from_snapshot(doc, dictionary=dictionary)
    table, _diags = build_routing_table(
        clusters,
        thresholds,
        snapshot_id=doc["snapshot_id"],
        vectorizer_name=doc["vectorizer_name"],
        dimension=int(doc["dimension"]),
    )
    return table


def create_app(gateway: Gateway):
    """FastAPI application exposing the serving endpoints."""
    from fastapi import Body, FastAPI
    from fastapi.responses import JSONResponse

    from .corpus import parse_tool_obj

    app = FastAPI(title="fastcall gateway")

    @app.post("/v1/function-call")
    def function_call(body: dict = Body(...)):
        query = body.get("query")
        if not isinstance(query, str) or not query.strip():
            return JSONResponse({"error": "query must be a non-empty string"}, status_code=400)
        history_obj = body.get("history", [])
        if not isinstance(history_obj, list):
            return JSONResponse({"error": "history must be an array"}, status_code=400)
        history: list[tuple[str, str]] = []
        for turn in history_obj:
            if (
                not isinstance(turn, dict)
                or turn.get("role") not in ("user", "assistant")
                or not isinstance(turn.get("text"), str)
            ):
                return JSONResponse({"error": "bad history turn"}, status_code=400)
            history.append((turn["role"], turn["text"]))
        tools_obj = body.get("tools")
        if not isinstance(tools_obj, list) or not tools_obj:
            return JSONResponse({"error": "tools must be a non-empty array"}, status_code=400)
        try:
            tools = [parse_tool_obj(t) for t in tools_obj]
        except ValueError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        try:
            response = gateway.handle(query, history, tools)
        except ServiceUnavailableError as exc:
            return JSONResponse(
                {"error": str(exc), "retry_after_s": exc.retry_after_s},
                status_code=503,
                headers={"Retry-After": str(int(exc.retry_after_s) or 1)},
            )
        return {
            "result": {
                "name": response.result.name,
                "arguments": dict(response.result.arguments),
            },
            "route": response.route,
            "reason": response.reason,
            "timings_ms": dict(response.timings_ms),
            "snapshot_id": response.snapshot_id,
        }

    @app.post("/v1/reload")
    def reload(body: dict = Body(...)):
        path = body.get("snapshot_path")
        if not isinstance(path, str) or not path:
            return JSONResponse({"error": "snapshot_path required"}, status_code=400)
        try:
            snapshot_id = gateway.reload_from_snapshot(path)
        except FastcallError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        return {"snapshot_id": snapshot_id}

    @app.get("/v1/metrics")
    def metrics():
        return gateway.metrics_obj()

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok", "snapshot_id": gateway.table.snapshot_id}

    return app


def serve(gateway: Gateway, host: str = "127.0.0.1", port: int = 8080) -> None:
    import uvicorn

    uvicorn.run(create_app(gateway), host=host, port=port, log_level="warning")
