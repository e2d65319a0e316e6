"""Privacy-preserving recommendation pipeline and evaluation harness."""

__version__ = "0.1.0"

from .catalog import (
    Catalog,
    Product,
    PurchaseHistory,
    build_histories,
    canonical_text,
    ingest_metadata,
    load_archive,
    save_archive,
)
from .errors import (
    BackendError,
    ConfigError,
    DegenerateClassError,
    IngestError,
    MetricError,
    ParseError,
    PrivRecError,
    RunFailure,
    SimilarityError,
    TemplateError,
)
from .evaluation import write_report
from .gateway import make_backend, parse_numbered_list, render_prompt
from .pipeline import (
    SCHEMES,
    Experiment,
    ExperimentConfig,
    allocate,
    load_run,
    timing_extra,
    write_run_archive,
)
from .retrieval import (
    HashEmbeddingProvider,
    RemoteEmbeddingProvider,
    VectorIndex,
    build_index,
    cosine,
    load_index,
    nearest,
    save_index,
)
from .sensitivity import (
    CategoricalScorer,
    RemoteScorer,
    TrainedClassifier,
    TrainedScorer,
    build_scorer,
    class_weights,
    focal_loss,
    split_history,
    train_classifier,
)

__all__ = [
    "__version__",
    "BackendError",
    "Catalog",
    "CategoricalScorer",
    "ConfigError",
    "DegenerateClassError",
    "Experiment",
    "ExperimentConfig",
    "HashEmbeddingProvider",
    "IngestError",
    "MetricError",
    "ParseError",
    "PrivRecError",
    "Product",
    "PurchaseHistory",
    "RemoteEmbeddingProvider",
    "RemoteScorer",
    "RunFailure",
    "SCHEMES",
    "SimilarityError",
    "TemplateError",
    "TrainedClassifier",
    "TrainedScorer",
    "VectorIndex",
    "allocate",
    "build_histories",
    "build_index",
    "build_scorer",
    "canonical_text",
    "class_weights",
    "cosine",
    "focal_loss",
    "ingest_metadata",
    "load_archive",
    "load_index",
    "load_run",
    "make_backend",
    "nearest",
    "parse_numbered_list",
    "render_prompt",
    "save_archive",
    "save_index",
    "split_history",
    "timing_extra",
    "train_classifier",
    "write_report",
    "write_run_archive",
]
