"""Image utilities: resampling, normalization and mask projection."""

from typing import Optional

import numpy as np

from ..config import ProjectionGeometry
from ..errors import ShapeError
from .siddon import RayWeights, extract_ray_weights, grid_geometry, siddon_raytrace
from .volumes import DRRImage, MaskVolume, VoxelVolume


def _area_weights(n_source: int, n_target: int) -> np.ndarray:
    """
    Row-stochastic ``(n_target, n_source)`` matrix of overlap fractions.

    Target pixel ``t`` covers source interval ``[t * r, (t + 1) * r)`` with
    ``r = n_source / n_target``; each source pixel contributes its overlap.
    """
    ratio = n_source / n_target
    edges = np.arange(n_target + 1) * ratio
    lo = edges[:-1, None]
    hi = edges[1:, None]
    src_lo = np.arange(n_source)[None, :]
    overlap = np.clip(np.minimum(hi, src_lo + 1) - np.maximum(lo, src_lo), 0.0, None)
    return overlap / ratio


def downsample_image(img: DRRImage, target_dims: tuple[int, int]) -> DRRImage:
    """
    Resample to ``target_dims`` by area averaging.

    Integer factors reduce to box averaging.

    Raises:
        ShapeError: If a target extent is not positive or exceeds the source.
    """
    rows, cols = img.dims
    t_rows, t_cols = target_dims
    if t_rows <= 0 or t_cols <= 0 or t_rows > rows or t_cols > cols:
        raise ShapeError(f"Cannot downsample {img.dims} to {tuple(target_dims)}")
    if (t_rows, t_cols) == (rows, cols):
        return img
    values = img.values.astype(np.float64)
    if rows % t_rows == 0 and cols % t_cols == 0:
        fr, fc = rows // t_rows, cols // t_cols
        out = values.reshape(t_rows, fr, t_cols, fc).mean(axis=(1, 3))
    else:
        out = _area_weights(rows, t_rows) @ values @ _area_weights(cols, t_cols).T
    return DRRImage(
        out.astype(np.float32),
        pixel_spacing=img.pixel_spacing * rows / t_rows,
        norm_min=img.norm_min,
        norm_max=img.norm_max,
    )


def normalize_image(img: DRRImage) -> DRRImage:
    """Map to ``[0, 1]`` by ``(v - min) / (max - min)``; a constant image maps to zeros."""
    lo = float(img.values.min())
    hi = float(img.values.max())
    if hi > lo:
        values = (img.values.astype(np.float64) - lo) / (hi - lo)
    else:
        values = np.zeros_like(img.values, dtype=np.float64)
    return DRRImage(values.astype(np.float32), img.pixel_spacing, norm_min=lo, norm_max=hi)


def denormalize_image(img: DRRImage) -> DRRImage:
    """Undo ``normalize_image`` using the recorded min/max."""
    if not img.is_normalized:
        raise ValueError("Image carries no normalization metadata")
    values = img.values.astype(np.float64) * (img.norm_max - img.norm_min) + img.norm_min
    return DRRImage(values.astype(np.float32), img.pixel_spacing)


def render_network_input(
    volume: VoxelVolume,
    geom: ProjectionGeometry,
    image_dims: tuple[int, int],
    weights: Optional[RayWeights] = None,
) -> DRRImage:
    """Raytrace, downsample to the network grid and normalize to ``[0, 1]``."""
    drr = siddon_raytrace(volume, geom, weights)
    return normalize_image(downsample_image(drr, image_dims))


def project_mask(
    mask: MaskVolume,
    geom: Optional[ProjectionGeometry] = None,
    weights: Optional[RayWeights] = None,
) -> np.ndarray:
    """
    Deterministic 2D projection of a binary volume.

    The mask is raytraced as a density field and a pixel is set where the
    path length exceeds half the smallest voxel spacing.

    Args:
        mask: Binary volume ``(z, y, x)``.
        geom: Geometry; defaults to ``grid_geometry`` (one parallel ray per
            voxel column along y), which aligns with the network grid.
        weights: Precomputed matrix for ``geom``.

    Returns:
        uint8 array ``(rows, cols)``.
    """
    if weights is None:
        geom = geom or grid_geometry(mask.dims, mask.spacing)
        weights = extract_ray_weights(geom, mask.dims, mask.spacing)
    path = weights.apply(mask.values.astype(np.float64))
    return (path > 0.5 * min(mask.spacing)).astype(np.uint8)


def depth_mean_projection(prob: np.ndarray) -> np.ndarray:
    """Mean of a ``[depth, height, width]`` probability volume along depth."""
    if prob.ndim != 3:
        raise ShapeError(f"depth_mean_projection expects a 3D volume, got {prob.shape}")
    return prob.mean(axis=0)
