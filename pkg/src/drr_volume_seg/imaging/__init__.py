"""Phantoms, DRR rendering and image utilities."""

from .image_ops import (
    denormalize_image,
    depth_mean_projection,
    downsample_image,
    normalize_image,
    project_mask,
    render_network_input,
)
from .phantom import (
    apply_domain_shift,
    generate_phantom,
    generate_ribcage,
    generate_thorax,
    threshold_mask,
)
from .siddon import (
    RayWeights,
    aligned_geometry,
    extract_ray_weights,
    grid_geometry,
    siddon_raytrace,
    validate_geometry,
)
from .volumes import (
    DRRImage,
    MaskVolume,
    VoxelVolume,
    center_crop,
    from_network_layout,
    hu_to_density,
    to_network_layout,
)
from .weight_cache import RayWeightCache

__all__ = [
    "VoxelVolume",
    "MaskVolume",
    "DRRImage",
    "center_crop",
    "hu_to_density",
    "to_network_layout",
    "from_network_layout",
    "generate_thorax",
    "generate_ribcage",
    "generate_phantom",
    "threshold_mask",
    "apply_domain_shift",
    "RayWeights",
    "extract_ray_weights",
    "siddon_raytrace",
    "validate_geometry",
    "aligned_geometry",
    "grid_geometry",
    "downsample_image",
    "normalize_image",
    "denormalize_image",
    "render_network_input",
    "project_mask",
    "depth_mean_projection",
    "RayWeightCache",
]
