"""Metrics, statistical tests and model-comparison reports."""

from fmtk.evaluation.metrics import (
    ZERO_DIVISION_NOTE,
    BinaryMetrics,
    ConfusionMatrix,
    MetricsReport,
    binary_metrics,
    classification_metrics,
    confusion_matrix,
    detail_metrics,
)
from fmtk.evaluation.report import (
    Evaluation,
    compare_models,
    evaluate,
    export_embeddings,
    format_comparison,
    write_confusion_csv,
    write_json,
)
from fmtk.evaluation.stats import (
    InsufficientPairs,
    StatTestResult,
    bootstrap_ci,
    bootstrap_indices,
    wilcoxon_signed_rank,
)

__all__ = [
    "ZERO_DIVISION_NOTE",
    "BinaryMetrics",
    "ConfusionMatrix",
    "Evaluation",
    "InsufficientPairs",
    "MetricsReport",
    "StatTestResult",
    "binary_metrics",
    "bootstrap_ci",
    "bootstrap_indices",
    "classification_metrics",
    "compare_models",
    "confusion_matrix",
    "detail_metrics",
    "evaluate",
    "export_embeddings",
    "format_comparison",
    "wilcoxon_signed_rank",
    "write_confusion_csv",
    "write_json",
]
