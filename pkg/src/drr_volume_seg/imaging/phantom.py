"""
Synthetic CT phantoms.

Two families stand in for real scans: a thorax with two air-filled lungs
(large connected targets) and a ribcage of thin bone tubes (fine targets).
Every generator is a pure function of ``(spec, seed)``.
"""

import logging
import math

import numpy as np
from scipy import ndimage

from ..config import DomainShiftSpec, PhantomSpec
from ..core.rng import RngState
from ..errors import PhantomError
from .volumes import HU_MAX, HU_MIN, MaskVolume, VoxelVolume

logger = logging.getLogger(__name__)

# Body and organ proportions as fractions of the physical box extent (z, y, x).
BODY_SEMI_AXES = (0.46, 0.36, 0.44)
LUNG_SEMI_AXES = (0.26, 0.19, 0.10)
LUNG_OFFSET_X = 0.2
SPINE_OFFSET_Y = 0.24
SPINE_RADIUS = 0.06
RIB_ARC = (0.25 * math.pi, 0.65 * math.pi)
RIB_LEVELS = (-0.22, 0.24)
RIB_DESCENT = 0.04


class _Jitter:
    """Seeded draws for one phantom."""

    def __init__(self, rng: RngState):
        self.generator = rng.generator

    def symmetric(self, amount: float) -> float:
        return amount * (2.0 * float(self.generator.random()) - 1.0)

    def between(self, bounds: tuple[float, float]) -> float:
        lo, hi = bounds
        return lo + (hi - lo) * float(self.generator.random())

    def integer(self, bounds: tuple[int, int]) -> int:
        return int(self.generator.integers(bounds[0], bounds[1] + 1))

    def fill(self, count: int, bounds: tuple[float, float]) -> np.ndarray:
        lo, hi = bounds
        return (lo + (hi - lo) * self.generator.random(count)).astype(np.float32)


def _grid(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple[float, float, float]]:
    """Voxel-centre coordinates in mm relative to the volume centre, plus physical extents."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * s for n, s in zip(spec.dims, spec.spacing)]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    extents = tuple(n * s for n, s in zip(spec.dims, spec.spacing))
    return z, y, x, extents


def _ellipsoid(grid, centre, semi, angle_deg: float = 0.0) -> np.ndarray:
    z, y, x = grid
    theta = math.radians(angle_deg)
    dy = y - centre[1]
    dx = x - centre[2]
    xr = math.cos(theta) * dx + math.sin(theta) * dy
    yr = -math.sin(theta) * dx + math.cos(theta) * dy
    return ((z - centre[0]) / semi[0]) ** 2 + (yr / semi[1]) ** 2 + (xr / semi[2]) ** 2 <= 1.0


def _body_and_spine(spec: PhantomSpec, grid, extents, jitter: _Jitter) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    values = np.full(spec.dims, spec.air_hu, dtype=np.float32)
    body = _ellipsoid(grid, (0.0, 0.0, 0.0), [f * e for f, e in zip(BODY_SEMI_AXES, extents)])
    values[body] = jitter.fill(int(body.sum()), spec.soft_tissue_hu)

    _, y, x = grid
    radius = SPINE_RADIUS * min(extents[1], extents[2])
    spine = ((y - SPINE_OFFSET_Y * extents[1]) ** 2 + x**2 <= radius**2) & body
    values[spine] = jitter.fill(int(spine.sum()), spec.spine_hu)
    return values, body, spine


def generate_thorax(spec: PhantomSpec, seed: int) -> tuple[VoxelVolume, MaskVolume]:
    """
    Water-equivalent body ellipsoid with two lung ellipsoids.

    Args:
        spec: Phantom description; ``spec.kind`` is ignored.
        seed: Phantom seed; identical seeds give bitwise-identical volumes.

    Returns:
        (volume, lung mask)

    Raises:
        PhantomError: If a jittered lung leaves the body, overlaps the other
            lung, or the lung fraction falls outside ``spec.lung_fraction_range``.
    """
    jitter = _Jitter(RngState(seed).derive("phantom/thorax"))
    z, y, x, extents = _grid(spec)
    grid = (z, y, x)
    values, body, _ = _body_and_spine(spec, grid, extents, jitter)

    lungs = []
    for side in (-1.0, 1.0):
        centre = (
            jitter.symmetric(spec.position_jitter) * extents[0],
            (-0.02 + jitter.symmetric(spec.position_jitter)) * extents[1],
            (side * LUNG_OFFSET_X + jitter.symmetric(spec.position_jitter)) * extents[2],
        )
        semi = [f * e * (1.0 + jitter.symmetric(spec.size_jitter)) for f, e in zip(LUNG_SEMI_AXES, extents)]
        angle = side * jitter.symmetric(spec.rotation_jitter_deg)
        lungs.append(_ellipsoid(grid, centre, semi, angle))

    lung = lungs[0] | lungs[1]
    if (lungs[0] & lungs[1]).any():
        raise PhantomError(f"Lungs overlap for seed {seed}")
    if (lung & ~body).any():
        raise PhantomError(f"Lung leaves the body envelope for seed {seed} ({int((lung & ~body).sum())} voxels)")

    fraction = lung.sum() / body.sum()
    lo, hi = spec.lung_fraction_range
    if not lo <= fraction <= hi:
        raise PhantomError(f"Lung fraction {fraction:.3f} outside [{lo}, {hi}] for seed {seed}")

    values[lung] = jitter.fill(int(lung.sum()), spec.lung_hu)
    logger.debug("thorax seed=%d lung_fraction=%.3f", seed, fraction)
    return VoxelVolume(values, spec.spacing), MaskVolume(lung, spec.spacing)


def _rib_semi_axes(
    spec: PhantomSpec, z_mm: float, radius: float, extents: tuple[float, float, float]
) -> tuple[float, float]:
    """
    (y, x) semi-axes of a rib arc starting at ``z_mm``.

    The arc follows the body cross-section at the rib's most extreme height,
    shrunk by the tube radius plus one voxel of rounding.
    """
    step = max(spec.spacing)
    descent = RIB_DESCENT * extents[0] * (RIB_ARC[1] - RIB_ARC[0])
    reach = max(abs(z_mm), abs(z_mm - descent)) + radius * step + 0.5 * spec.spacing[0]
    body_z = BODY_SEMI_AXES[0] * extents[0]
    if reach >= body_z:
        return 0.0, 0.0
    factor = math.sqrt(1.0 - (reach / body_z) ** 2)
    margin = (radius + 1.0) * step
    return (
        BODY_SEMI_AXES[1] * extents[1] * factor - margin,
        BODY_SEMI_AXES[2] * extents[2] * factor - margin,
    )


def _rib_centreline(spec: PhantomSpec, z_mm: float, side: float, semi_y: float, semi_x: float) -> np.ndarray:
    """Boolean volume marking the voxels on one rib's curved centreline."""
    phi = np.linspace(RIB_ARC[0], RIB_ARC[1], 400)
    # Ribs descend slightly towards the front.
    z = z_mm - RIB_DESCENT * spec.dims[0] * spec.spacing[0] * (phi - RIB_ARC[0])
    y = semi_y * np.cos(phi)
    x = side * semi_x * np.sin(phi)
    centreline = np.zeros(spec.dims, dtype=bool)
    index = []
    for coord, n, s in zip((z, y, x), spec.dims, spec.spacing):
        index.append(np.clip(np.rint(coord / s + (n - 1) / 2.0).astype(int), 0, n - 1))
    centreline[tuple(index)] = True
    return centreline


def generate_ribcage(spec: PhantomSpec, seed: int) -> tuple[VoxelVolume, MaskVolume]:
    """
    Paired curved rib tubes over soft tissue with liver- and stomach-like blobs.

    The mask is derived from the volume by ``threshold_mask`` over the bone
    range, so it can always be reproduced from the volume alone.

    Raises:
        PhantomError: If a rib leaves the body envelope.
    """
    jitter = _Jitter(RngState(seed).derive("phantom/ribcage"))
    z, y, x, extents = _grid(spec)
    grid = (z, y, x)
    values, body, _ = _body_and_spine(spec, grid, extents, jitter)

    liver = _ellipsoid(
        grid,
        (
            (-0.12 + jitter.symmetric(spec.position_jitter)) * extents[0],
            jitter.symmetric(spec.position_jitter) * extents[1],
            (-0.15 + jitter.symmetric(spec.position_jitter)) * extents[2],
        ),
        [f * e * (1.0 + jitter.symmetric(spec.size_jitter)) for f, e in zip((0.20, 0.18, 0.16), extents)],
    ) & body
    values[liver] = jitter.fill(int(liver.sum()), spec.organ_hu)

    stomach = _ellipsoid(
        grid,
        (
            (-0.10 + jitter.symmetric(spec.position_jitter)) * extents[0],
            (-0.05 + jitter.symmetric(spec.position_jitter)) * extents[1],
            (0.18 + jitter.symmetric(spec.position_jitter)) * extents[2],
        ),
        [f * e * (1.0 + jitter.symmetric(spec.size_jitter)) for f, e in zip((0.12, 0.10, 0.10), extents)],
    ) & body
    values[stomach] = jitter.fill(int(stomach.sum()), spec.gas_hu)

    n_pairs = jitter.integer(spec.rib_pairs)
    levels = np.linspace(RIB_LEVELS[0], RIB_LEVELS[1], n_pairs) * extents[0]
    ribs = np.zeros(spec.dims, dtype=bool)
    for level in levels:
        for side in (-1.0, 1.0):
            z_mm = float(level) + jitter.symmetric(0.01) * extents[0]
            radius = jitter.between(spec.rib_radius)
            semi_y, semi_x = _rib_semi_axes(spec, z_mm, radius, extents)
            if semi_y <= 0 or semi_x <= 0:
                raise PhantomError(f"Rib at z={z_mm:.1f} mm does not fit inside the body for seed {seed}")
            centreline = _rib_centreline(spec, z_mm, side, semi_y, semi_x)
            distance = ndimage.distance_transform_edt(~centreline)
            ribs |= distance <= radius

    if (ribs & ~body).any():
        raise PhantomError(f"Rib leaves the body envelope for seed {seed}")
    values[ribs] = jitter.fill(int(ribs.sum()), spec.bone_hu)

    volume = VoxelVolume(values, spec.spacing)
    mask = threshold_mask(volume, *spec.bone_hu)
    logger.debug("ribcage seed=%d pairs=%d rib_fraction=%.4f", seed, n_pairs, mask.values.mean())
    return volume, mask


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[VoxelVolume, MaskVolume]:
    """Dispatch on ``spec.kind``."""
    if spec.kind == "thorax":
        return generate_thorax(spec, seed)
    return generate_ribcage(spec, seed)


def threshold_mask(volume: VoxelVolume, lo: float, hi: float) -> MaskVolume:
    """Mask of voxels with ``lo <= value <= hi``."""
    if lo > hi:
        raise PhantomError(f"Threshold lower bound {lo} exceeds upper bound {hi}")
    return MaskVolume((volume.values >= lo) & (volume.values <= hi), volume.spacing)


def apply_domain_shift(volume: VoxelVolume, spec: DomainShiftSpec, seed: int) -> VoxelVolume:
    """
    Intensity remap, additive Gaussian noise and an optional occluder slab.

    Applied in that order, then clipped to the HU bounds. The identity spec
    returns an unchanged copy.
    """
    values = volume.values.astype(np.float64)
    if spec.gain != 1.0 or spec.offset != 0.0:
        values = values * spec.gain + spec.offset
    if spec.noise_sigma > 0:
        noise = RngState(seed).derive("domain_shift/noise").normal(values.shape)
        values = values + spec.noise_sigma * noise
    if spec.occluder is not None:
        slab = tuple(
            slice(min(start, n), min(start + size, n))
            for start, size, n in zip(spec.occluder.start, spec.occluder.size, volume.dims)
        )
        values[slab] += spec.occluder.added_hu
    values = np.clip(values, HU_MIN, HU_MAX)
    return VoxelVolume(values.astype(np.float32), volume.spacing)
