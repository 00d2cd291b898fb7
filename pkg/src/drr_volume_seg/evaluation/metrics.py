"""
Segmentation metrics.

Probability volumes are in network layout ``[depth, height, width]`` where
height runs along z, so an axial slice is a fixed index on axis 1.
"""

from typing import Literal

import numpy as np
from scipy import ndimage

from ..errors import EvaluationError, ShapeError
from ..storage.schemas import MetricSummary

MedianMode = Literal["2d", "3d", "none"]

AXIAL_AXIS = 1


def binarize_and_filter(
    prob: np.ndarray,
    threshold: float = 0.5,
    median: MedianMode = "2d",
    axial_axis: int = AXIAL_AXIS,
) -> np.ndarray:
    """
    Threshold (strictly greater) and median-filter a probability volume.

    Args:
        prob: 3D probabilities.
        threshold: Voxels with ``prob > threshold`` are foreground.
        median: ``"2d"`` filters each axial slice with a 3x3 window,
            ``"3d"`` uses a 3x3x3 window, ``"none"`` skips filtering.
        axial_axis: Axis indexing axial slices.

    Returns:
        uint8 mask with the shape of ``prob``.
    """
    prob = np.asarray(prob)
    if prob.ndim != 3:
        raise ShapeError(f"Expected a 3D probability volume, got shape {prob.shape}")
    mask = (prob > threshold).astype(np.uint8)
    if median == "none":
        return mask
    if median == "3d":
        size = (3, 3, 3)
    else:
        size = [3, 3, 3]
        size[axial_axis] = 1
        size = tuple(size)
    return ndimage.median_filter(mask, size=size, mode="nearest").astype(np.uint8)


def _pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return pred, gt


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|P∩G| / (|P|+|G|)``; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def volume_ratio(pred: np.ndarray, gt: np.ndarray) -> float:
    """
    ``|P| / |G|``.

    Raises:
        EvaluationError: If the ground truth is empty.
    """
    pred, gt = _pair(pred, gt)
    gt_count = int(gt.sum())
    if gt_count == 0:
        raise EvaluationError("Volume ratio is undefined for an empty ground-truth mask")
    return int(pred.sum()) / gt_count


def dice2d(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice of two binary 2D projections."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise ShapeError(f"dice2d expects 2D masks, got shape {pred.shape}")
    return dice(pred, gt)


def summarize(values) -> MetricSummary:
    """Mean, population std and the sample extremes as lower and upper bounds."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EvaluationError("Cannot summarize an empty sample set")
    mean = float(values.mean())
    std = float(values.std())
    return MetricSummary(mean=mean, std=std, lower=float(values.min()), upper=float(values.max()))


def uncertainty_bounds(
    samples: np.ndarray,
    gt: np.ndarray,
    threshold: float = 0.5,
    median: MedianMode = "2d",
) -> dict[str, MetricSummary]:
    """
    Dice and volume ratio of every Monte-Carlo sample against ``gt``.

    Args:
        samples: ``[T, depth, height, width]`` probabilities.
        gt: Binary ``[depth, height, width]``.

    Returns:
        ``{"dice": ..., "volume_ratio": ...}`` summaries over the T samples.
    """
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ShapeError(f"Expected [T, D, H, W] samples, got shape {samples.shape}")
    masks = [binarize_and_filter(s, threshold, median) for s in samples]
    return {
        "dice": summarize([dice(m, gt) for m in masks]),
        "volume_ratio": summarize([volume_ratio(m, gt) for m in masks]),
    }
