"""Accuracy evaluation, forgetting/gain metrics and report files."""

from .metrics import (
    SequenceResult,
    average_accuracy,
    avg_forgetting,
    derived_metrics,
    drop_vs_reference,
    evaluate,
    new_task_gain,
)
from .report import (
    comparison_table,
    emit_report,
    format_cell,
    format_delta,
    plot_data,
    results_document,
    results_from_document,
    validate_results_document,
    write_plot_data,
)

__all__ = [
    "SequenceResult",
    "average_accuracy",
    "avg_forgetting",
    "derived_metrics",
    "drop_vs_reference",
    "evaluate",
    "new_task_gain",
    "comparison_table",
    "emit_report",
    "format_cell",
    "format_delta",
    "plot_data",
    "results_document",
    "results_from_document",
    "validate_results_document",
    "write_plot_data",
]
