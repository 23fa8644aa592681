"""Training workflows, evaluation, interleaving and artifact persistence."""

from .interleave import InterleaveReport, run_interleaving
from .ranking import MetricReport, evaluate, ndcg_at_k, recall_at_precision

__all__ = [
    "InterleaveReport",
    "MetricReport",
    "evaluate",
    "ndcg_at_k",
    "recall_at_precision",
    "run_interleaving",
]
