"""
Siddon-Jacob raytracing.

A DRR is the product ``p = M f`` of a sparse projection matrix ``M`` with the
voxel density vector ``f``. Entry ``M[pixel, voxel]`` is the length (mm) of
the pixel's ray inside that voxel. Rays are traced in chunks: for every ray
the parametric crossings of all x, y and z planes are merged and sorted, and
consecutive crossings delimit the voxel segments.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from ..config import ProjectionGeometry
from ..errors import GeometryError
from .volumes import DRRImage, VoxelVolume

logger = logging.getLogger(__name__)

RAYS_PER_CHUNK = 2048

# View -> (index of the beam axis, index of the detector column axis) in (x, y, z).
_VIEW_AXES = {"ap": (1, 0), "lateral": (0, 1)}


@dataclass(frozen=True)
class RayWeights:
    """
    Explicit projection matrix for one geometry and volume grid.

    Attributes:
        matrix: CSR matrix ``(rows * cols, D * H * W)``; voxel columns follow
            the C order of a ``(z, y, x)`` array.
        detector_shape: (rows, cols).
        volume_dims: (z, y, x) voxel counts.
        spacing: (z, y, x) voxel size in mm.
    """

    matrix: sparse.csr_matrix
    detector_shape: tuple[int, int]
    volume_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def apply(self, density: np.ndarray) -> np.ndarray:
        """Project a ``(z, y, x)`` field to a ``(rows, cols)`` image."""
        if density.shape != self.volume_dims:
            raise GeometryError(f"Density dims {density.shape} do not match weights built for {self.volume_dims}")
        flat = np.asarray(density, dtype=np.float64).reshape(-1)
        return (self.matrix @ flat).reshape(self.detector_shape)

    def ray(self, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
        """Flat voxel indices and intersection lengths for one detector pixel."""
        start, stop = self.matrix.indptr[row * self.detector_shape[1] + col : row * self.detector_shape[1] + col + 2]
        return self.matrix.indices[start:stop].copy(), self.matrix.data[start:stop].copy()

    def chord_lengths(self) -> np.ndarray:
        """Total in-volume path length per pixel."""
        return np.asarray(self.matrix.sum(axis=1)).reshape(self.detector_shape)


def validate_geometry(
    geom: ProjectionGeometry, dims: tuple[int, int, int], spacing: tuple[float, float, float]
) -> None:
    """
    Check that the source and detector lie outside the volume.

    Raises:
        GeometryError: If the source (cone mode) or the detector plane falls
            inside the volume's extent along the beam axis.
    """
    beam_axis, _ = _VIEW_AXES[geom.view]
    # (x, y, z) half extents
    half = [dims[2] * spacing[2] / 2.0, dims[1] * spacing[1] / 2.0, dims[0] * spacing[0] / 2.0]
    if geom.mode == "cone" and geom.source_distance_mm <= half[beam_axis]:
        raise GeometryError(
            f"Source at {geom.source_distance_mm} mm lies inside the volume "
            f"(half extent {half[beam_axis]} mm along the beam)"
        )
    if geom.detector_distance_mm <= half[beam_axis]:
        raise GeometryError(
            f"Detector plane at {geom.detector_distance_mm} mm intersects the volume "
            f"(half extent {half[beam_axis]} mm along the beam)"
        )


def _ray_endpoints(geom: ProjectionGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points ``(n_rays, 3)`` in (x, y, z) mm, row-major over the detector."""
    rows, cols = geom.detector_shape
    beam_axis, col_axis = _VIEW_AXES[geom.view]
    r = (np.arange(rows) - (rows - 1) / 2.0) * geom.pixel_spacing_mm
    c = (np.arange(cols) - (cols - 1) / 2.0) * geom.pixel_spacing_mm
    rr, cc = np.meshgrid(r, c, indexing="ij")
    n = rows * cols

    end = np.zeros((n, 3))
    end[:, beam_axis] = geom.detector_distance_mm
    end[:, col_axis] = cc.reshape(-1)
    end[:, 2] = rr.reshape(-1)

    start = np.zeros((n, 3))
    start[:, beam_axis] = -geom.source_distance_mm
    if geom.mode == "parallel":
        start[:, col_axis] = end[:, col_axis]
        start[:, 2] = end[:, 2]
    return start, end


def _trace_chunk(
    start: np.ndarray,
    end: np.ndarray,
    planes: list[np.ndarray],
    spacing_xyz: np.ndarray,
    counts_xyz: tuple[int, int, int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Trace a chunk of rays.

    Returns:
        (ray index within chunk, voxel (x, y, z) index triples, segment length)
    """
    direction = end - start
    length = np.linalg.norm(direction, axis=1)
    n_rays = start.shape[0]

    alpha_min = np.zeros(n_rays)
    alpha_max = np.ones(n_rays)
    crossings = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, coords in enumerate(planes):
            d = direction[:, axis : axis + 1]
            alphas = (coords[None, :] - start[:, axis : axis + 1]) / d
            parallel = d[:, 0] == 0
            alphas[parallel] = np.nan
            first, last = alphas[:, 0], alphas[:, -1]
            lo = np.where(parallel, -np.inf, np.minimum(first, last))
            hi = np.where(parallel, np.inf, np.maximum(first, last))
            alpha_min = np.maximum(alpha_min, lo)
            alpha_max = np.minimum(alpha_max, hi)
            # A ray parallel to this axis hits the volume only if it lies between the outer planes.
            outside = parallel & ((start[:, axis] < coords[0]) | (start[:, axis] > coords[-1]))
            alpha_max = np.where(outside, -np.inf, alpha_max)
            crossings.append(alphas)

    hits = alpha_min < alpha_max
    # Misses collapse to an empty interval.
    alpha_min = np.where(hits, alpha_min, 0.0)
    alpha_max = np.where(hits, alpha_max, 0.0)
    merged = np.concatenate([alpha_min[:, None], alpha_max[:, None]] + crossings, axis=1)
    inside = (merged >= alpha_min[:, None]) & (merged <= alpha_max[:, None]) & ~np.isnan(merged)
    merged = np.where(inside, merged, alpha_max[:, None])
    merged.sort(axis=1)

    segments = np.diff(merged, axis=1)
    keep = (segments > 0) & hits[:, None]
    ray_index, seg_index = np.nonzero(keep)
    mid = 0.5 * (merged[ray_index, seg_index] + merged[ray_index, seg_index + 1])
    points = start[ray_index] + mid[:, None] * direction[ray_index]
    voxel = np.floor((points - np.array([p[0] for p in planes])) / spacing_xyz).astype(np.int64)
    voxel = np.clip(voxel, 0, np.array(counts_xyz) - 1)
    lengths = segments[ray_index, seg_index] * length[ray_index]
    return ray_index, voxel, lengths


def extract_ray_weights(
    geom: ProjectionGeometry,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> RayWeights:
    """
    Build the projection matrix ``M`` for a geometry and a ``(z, y, x)`` grid.

    The volume centre is the isocenter. Rays that miss the volume yield empty
    matrix rows.

    Raises:
        GeometryError: On an invalid source or detector placement.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    validate_geometry(geom, dims, spacing)

    counts_xyz = (dims[2], dims[1], dims[0])
    spacing_xyz = np.array([spacing[2], spacing[1], spacing[0]])
    planes = [(np.arange(n + 1) - n / 2.0) * s for n, s in zip(counts_xyz, spacing_xyz)]
    start, end = _ray_endpoints(geom)

    rows, cols, data = [], [], []
    for lo in range(0, start.shape[0], RAYS_PER_CHUNK):
        hi = min(lo + RAYS_PER_CHUNK, start.shape[0])
        ray_index, voxel, lengths = _trace_chunk(start[lo:hi], end[lo:hi], planes, spacing_xyz, counts_xyz)
        rows.append(ray_index + lo)
        # (z, y, x) C order
        cols.append((voxel[:, 2] * dims[1] + voxel[:, 1]) * dims[2] + voxel[:, 0])
        data.append(lengths)

    n_pixels = geom.detector_shape[0] * geom.detector_shape[1]
    matrix = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_pixels, int(np.prod(dims))),
    ).tocsr()
    matrix.sort_indices()
    logger.debug("traced %d rays, %d nonzero weights", n_pixels, matrix.nnz)
    return RayWeights(matrix=matrix, detector_shape=tuple(geom.detector_shape), volume_dims=dims, spacing=spacing)


def siddon_raytrace(
    volume: VoxelVolume,
    geom: ProjectionGeometry,
    weights: Optional[RayWeights] = None,
) -> DRRImage:
    """
    Render a DRR: per pixel, the sum over voxels of intersection length x density.

    Args:
        volume: CT volume in HU; mapped to density ``max(0, (HU + 1000) / 1000)``.
        geom: Acquisition geometry.
        weights: Precomputed matrix for this geometry and grid (see ``RayWeightCache``).
    """
    if weights is None:
        weights = extract_ray_weights(geom, volume.dims, volume.spacing)
    elif weights.volume_dims != volume.dims or weights.detector_shape != tuple(geom.detector_shape):
        raise GeometryError(
            f"Weights for dims {weights.volume_dims} / detector {weights.detector_shape} "
            f"do not match volume {volume.dims} / detector {geom.detector_shape}"
        )
    image = weights.apply(volume.density())
    return DRRImage(image.astype(np.float32), pixel_spacing=geom.pixel_spacing_mm)


def aligned_geometry(
    target_dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    detector_pixels: int = 128,
    source_distance_mm: float = 2000.0,
    detector_distance_mm: float = 150.0,
    view: str = "ap",
    mode: str = "cone",
) -> ProjectionGeometry:
    """
    Geometry whose detector covers the target crop at isocenter magnification.

    The longer of the two in-plane target extents maps onto ``detector_pixels``
    pixels, so that downsampling the DRR to the target grid aligns image
    pixels with target voxels.
    """
    col_axis = 2 if view == "ap" else 1
    extent_rows = target_dims[0] * spacing[0]
    extent_cols = target_dims[col_axis] * spacing[col_axis]
    magnification = 1.0 if mode == "parallel" else (source_distance_mm + detector_distance_mm) / source_distance_mm
    pixel = max(extent_rows, extent_cols) * magnification / detector_pixels
    shape = (
        max(1, int(round(extent_rows * magnification / pixel))),
        max(1, int(round(extent_cols * magnification / pixel))),
    )
    return ProjectionGeometry(
        mode=mode,
        source_distance_mm=source_distance_mm,
        detector_distance_mm=detector_distance_mm,
        detector_shape=shape,
        pixel_spacing_mm=pixel,
        view=view,
    )


def grid_geometry(
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    view: str = "ap",
) -> ProjectionGeometry:
    """Parallel geometry with one ray through every voxel column along the view axis."""
    col_axis = 2 if view == "ap" else 1
    beam_axis = 1 if view == "ap" else 2
    if spacing[0] != spacing[col_axis]:
        raise GeometryError(f"grid_geometry needs equal row/column spacing, got {spacing}")
    clearance = dims[beam_axis] * spacing[beam_axis]
    return ProjectionGeometry(
        mode="parallel",
        source_distance_mm=clearance,
        detector_distance_mm=clearance,
        detector_shape=(dims[0], dims[col_axis]),
        pixel_spacing_mm=spacing[0],
        view=view,
    )
