"""
Volume and image containers.

Volumes are stored ``(z, y, x)`` with x varying fastest, matching the VOLB
file layout. Networks see targets in ``[depth, height, width]`` order where
depth is the projection axis; ``to_network_layout`` performs that transpose.
"""

from dataclasses import dataclass, replace
from typing import Optional, TypeVar

import numpy as np

from ..errors import ShapeError

HU_MIN = -1024.0
HU_MAX = 3000.0

# (z, y, x) -> (projection axis, z, in-plane axis)
_NETWORK_AXES = {"ap": (1, 0, 2), "lateral": (2, 0, 1)}


def _check_spacing(spacing: tuple[float, ...]) -> tuple[float, ...]:
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ShapeError(f"Spacing must be positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class VoxelVolume:
    """
    Scalar CT field in Hounsfield units.

    Attributes:
        values: float32 array ``(z, y, x)``.
        spacing: Voxel size in mm, same axis order.
    """

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ShapeError(f"VoxelVolume needs a 3D array, got shape {values.shape}")
        if len(self.spacing) != 3:
            raise ShapeError(f"VoxelVolume spacing needs 3 values, got {self.spacing}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def in_hu_bounds(self) -> bool:
        return bool(self.values.min() >= HU_MIN and self.values.max() <= HU_MAX)

    def density(self) -> np.ndarray:
        """Nonnegative density ``max(0, (HU + 1000) / 1000)``: air 0, water 1."""
        return hu_to_density(self.values)


@dataclass(frozen=True)
class MaskVolume:
    """Binary 3D mask (uint8 0/1) with the spacing of its source volume."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ShapeError(f"MaskVolume needs a 3D array, got shape {values.shape}")
        object.__setattr__(self, "values", (values > 0).astype(np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class DRRImage:
    """
    Projection image.

    ``norm_min``/``norm_max`` are set once the image has been normalized and
    allow the original intensities to be recovered.
    """

    values: np.ndarray
    pixel_spacing: float = 1.0
    norm_min: Optional[float] = None
    norm_max: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ShapeError(f"DRRImage needs a 2D array, got shape {values.shape}")
        if self.pixel_spacing <= 0:
            raise ShapeError(f"Pixel spacing must be positive, got {self.pixel_spacing}")
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def is_normalized(self) -> bool:
        return self.norm_min is not None and self.norm_max is not None


def hu_to_density(values: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, (np.asarray(values, dtype=np.float64) + 1000.0) / 1000.0)


VolumeT = TypeVar("VolumeT", VoxelVolume, MaskVolume)


def center_crop(volume: VolumeT, target_dims: tuple[int, int, int]) -> VolumeT:
    """
    Symmetric crop to ``target_dims``.

    The crop starts at ``(n - t) // 2`` on each axis, so an odd remainder
    removes the extra voxel from the high side.

    Raises:
        ShapeError: If a target extent exceeds the volume or is not positive.
    """
    dims = volume.dims
    if len(target_dims) != 3:
        raise ShapeError(f"center_crop needs 3 target extents, got {target_dims}")
    if any(t <= 0 or t > n for t, n in zip(target_dims, dims)):
        raise ShapeError(f"Cannot crop volume of dims {dims} to {tuple(target_dims)}")
    starts = [(n - t) // 2 for n, t in zip(dims, target_dims)]
    index = tuple(slice(s, s + t) for s, t in zip(starts, target_dims))
    return replace(volume, values=np.ascontiguousarray(volume.values[index]))


def to_network_layout(values: np.ndarray, view: str = "ap") -> np.ndarray:
    """``(z, y, x)`` array -> ``[depth, height, width]`` with depth along the view."""
    return np.ascontiguousarray(np.transpose(values, _NETWORK_AXES[view]))


def from_network_layout(values: np.ndarray, view: str = "ap") -> np.ndarray:
    """Inverse of ``to_network_layout``."""
    return np.ascontiguousarray(np.transpose(values, np.argsort(_NETWORK_AXES[view])))
