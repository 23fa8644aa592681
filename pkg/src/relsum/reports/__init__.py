"""Charts and text tables for evaluation and training reports."""

from .presenter import GainPresenter, TrainingCurvePresenter, save_gain_chart, save_training_curves
from .tables import format_examples, format_gain_table

__all__ = [
    "GainPresenter",
    "TrainingCurvePresenter",
    "format_examples",
    "format_gain_table",
    "save_gain_chart",
    "save_training_curves",
]
