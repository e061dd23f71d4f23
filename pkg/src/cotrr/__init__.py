"""Training-free listwise re-ranking engine for image retrieval.

Initial candidates come from exact cosine top-K over embedding stores (or
precomputed lists); a multimodal LLM then deconstructs the query, evaluates
each candidate against the components, and re-orders the candidates with a
single listwise call. Metrics, task harness, deterministic mock backends,
and a CLI round out the engine.
"""

from .backend import (
    Backend,
    BackendError,
    ChatRequest,
    ChatResponse,
    HttpTransport,
    ImagePart,
    MalformedReplyError,
    Message,
    PermanentBackendError,
    RecordingTransport,
    ResponseCache,
    RetriesExhausted,
    RetryPolicy,
    TextPart,
    TransientBackendError,
    cache_key,
    encode_image_file,
    validate_request_conformance,
)
from .harness import (
    PROFILES,
    ManifestError,
    ManifestRecord,
    RunAborted,
    TaskProfile,
    chat_query_for_round,
    load_manifest,
    run,
    splice_ranking,
)
from .metrics import (
    EmptyGroundTruth,
    EmptySubset,
    MetricReport,
    hits_at_k,
    map_at_k,
    recall_at_k,
    recall_subset_at_k,
)
from .mocks import make_transport
from .parsing import ParseError
from .pipeline import (
    COMPONENT_NAMES,
    MODES,
    CandidateEvaluation,
    Component,
    ComponentNote,
    Judgment,
    Query,
    RankedItem,
    RankedList,
    RerankResult,
    SemanticDecomposition,
    StageParseError,
    TranscriptEntry,
    deconstruct,
    evaluate_candidate,
    rank_listwise,
    repair_permutation,
    rerank,
)
from .prompting import PromptLibrary
from .store import (
    Candidate,
    DimensionMismatch,
    EmbeddingStore,
    StoreFormatError,
    ZeroNormQuery,
    load_store,
    top_k,
    write_store,
)

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "BackendError",
    "COMPONENT_NAMES",
    "Candidate",
    "CandidateEvaluation",
    "ChatRequest",
    "ChatResponse",
    "Component",
    "ComponentNote",
    "DimensionMismatch",
    "EmbeddingStore",
    "EmptyGroundTruth",
    "EmptySubset",
    "HttpTransport",
    "ImagePart",
    "Judgment",
    "MODES",
    "MalformedReplyError",
    "ManifestError",
    "ManifestRecord",
    "Message",
    "MetricReport",
    "PROFILES",
    "ParseError",
    "PermanentBackendError",
    "PromptLibrary",
    "Query",
    "RankedItem",
    "RankedList",
    "RecordingTransport",
    "RerankResult",
    "ResponseCache",
    "RetriesExhausted",
    "RetryPolicy",
    "RunAborted",
    "SemanticDecomposition",
    "StageParseError",
    "StoreFormatError",
    "TaskProfile",
    "TextPart",
    "TranscriptEntry",
    "TransientBackendError",
    "ZeroNormQuery",
    "cache_key",
    "chat_query_for_round",
    "deconstruct",
    "encode_image_file",
    "evaluate_candidate",
    "hits_at_k",
    "load_manifest",
    "load_store",
    "make_transport",
    "map_at_k",
    "rank_listwise",
    "recall_at_k",
    "recall_subset_at_k",
    "repair_permutation",
    "rerank",
    "run",
    "splice_ranking",
    "top_k",
    "validate_request_conformance",
    "write_store",
]
