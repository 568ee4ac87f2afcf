"""Traffic-mined routing and parameter generation for LLM function calling.

Offline, production traffic is grouped, embedded, clustered, and labeled
so that clusters with one dominant function become a routing table and a
distillation training set. Online, a gateway routes each query either to
a fast parameter-generation backend or to the large-model fallback.
"""

from .corpus import (
    Diagnostic,
    FunctionCallRecord,
    ParamSpec,
    QueryGroup,
    ToolSchema,
    canonicalize_query,
    group_by_query,
    ingest_records,
)
from .embedding import (
    ExternalVectorizer,
    HashedNgramVectorizer,
    Vectorizer,
    cosine_similarity,
    make_vectorizer,
)
from .ner import (
    EntityDictionary,
    EntitySpan,
    QueryTemplate,
    extract_entities,
    fill_template,
    load_dictionaries,
    templatize,
)
from .clustering import (
    ClusteringConfig,
    ClusterMember,
    QueryCluster,
    cluster,
    clusters_from_snapshot,
    compute_centroid,
    merge_batches,
    prune,
    read_snapshot,
    snapshot_doc,
    write_snapshot,
)
from .filtering import (
    FilterConfig,
    TrainingExample,
    balanced_sample,
    classify_cluster,
    drop_nondominant,
    label_clusters,
    select_representative,
)
from .router import (
    RouterThresholds,
    RoutingDecision,
    RoutingTable,
    build_routing_table,
    match_query,
)
from .paramgen import (
    FunctionCallResult,
    HttpGenerator,
    PromptBundle,
    RoutingContext,
    StubGenerator,
    TokenMapping,
    assemble_prompt,
    optimize_schema_tokens,
    parse_fc_output,
    restore_parameter_names,
)
from .gateway import (
    Gateway,
    LargeModelClient,
    LatencyModel,
    TrafficReport,
    create_app,
    expected_latency,
    replay,
    serve,
)

__version__ = "0.1.0"
