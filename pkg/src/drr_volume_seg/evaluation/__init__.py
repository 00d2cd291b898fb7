"""Metrics, Monte-Carlo evaluation and report validation."""

from .evaluator import evaluate, validate_report
from .metrics import (
    binarize_and_filter,
    dice,
    dice2d,
    summarize,
    uncertainty_bounds,
    volume_ratio,
)

__all__ = [
    "binarize_and_filter",
    "dice",
    "dice2d",
    "volume_ratio",
    "summarize",
    "uncertainty_bounds",
    "evaluate",
    "validate_report",
]
