"""
Pydantic configuration models.

Every run is described by one of these models; they validate on construction
and echo into JSON artifacts via ``model_dump(mode="json")``.
"""

import math
from typing import Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

HU_MIN = -1024.0
HU_MAX = 3000.0

ModelFamily = Literal[
    "unet-det",
    "unet-dropout",
    "unet-dropblock",
    "phiseg",
    "phiseg-nofusion",
    "phiseg-uda",
]


def _check_range(value: tuple[float, float], label: str) -> tuple[float, float]:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{label} lower bound {lo} exceeds upper bound {hi}")
    return value


# ----------------------------------------------------------------- phantoms


class PhantomSpec(BaseModel):
    """Synthetic CT phantom description (thorax with lungs, or ribcage)."""

    kind: Literal["thorax", "ribcage"] = Field("thorax", description="Phantom family")
    dims: tuple[int, int, int] = Field((32, 32, 32), description="Volume extents (z, y, x) in voxels")
    spacing: tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Voxel size in mm")

    # Jitter applied per seed
    position_jitter: float = Field(0.03, ge=0.0, le=0.1, description="Organ centre jitter (fraction of extent)")
    size_jitter: float = Field(0.08, ge=0.0, le=0.2, description="Relative organ size jitter")
    rotation_jitter_deg: float = Field(10.0, ge=0.0, le=30.0, description="Organ rotation jitter about z")

    # HU palette
    air_hu: float = Field(-1000.0, description="Background air")
    lung_hu: tuple[float, float] = Field((-810.0, -790.0), description="Lung parenchyma range")
    soft_tissue_hu: tuple[float, float] = Field((0.0, 60.0), description="Soft tissue range")
    bone_hu: tuple[float, float] = Field((1800.0, 1900.0), description="Bone range")
    spine_hu: tuple[float, float] = Field((650.0, 750.0), description="Vertebral body range")
    organ_hu: tuple[float, float] = Field((60.0, 75.0), description="Liver-like blob range (ribcage)")
    gas_hu: tuple[float, float] = Field((-250.0, -150.0), description="Stomach-like blob range (ribcage)")

    lung_fraction_range: tuple[float, float] = Field(
        (0.08, 0.20), description="Accepted lung volume as a fraction of the body"
    )
    rib_pairs: tuple[int, int] = Field((4, 6), description="Inclusive range of rib pairs")
    rib_radius: tuple[float, float] = Field((1.0, 1.4), description="Rib tube radius in voxels")

    @field_validator("dims")
    @classmethod
    def dims_at_least_16(cls, v):
        if any(d < 16 for d in v):
            raise ValueError(f"Phantom dims must be >= 16 per axis, got {v}")
        if any(d > 256 for d in v):
            raise ValueError(f"Phantom dims must be <= 256 per axis, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def spacing_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"Spacing must be positive, got {v}")
        return v

    @field_validator("lung_hu", "soft_tissue_hu", "bone_hu", "spine_hu", "organ_hu", "gas_hu")
    @classmethod
    def hu_range(cls, v, info):
        _check_range(v, info.field_name)
        if v[0] < HU_MIN or v[1] > HU_MAX:
            raise ValueError(f"{info.field_name} {v} outside [{HU_MIN}, {HU_MAX}] HU")
        return v

    @field_validator("lung_fraction_range", "rib_radius")
    @classmethod
    def ordered(cls, v, info):
        return _check_range(v, info.field_name)

    @field_validator("rib_pairs")
    @classmethod
    def rib_pair_range(cls, v):
        _check_range(v, "rib_pairs")
        if v[0] < 1:
            raise ValueError("rib_pairs must be >= 1")
        return v


class Occluder(BaseModel):
    """Rectangular attenuating slab added to a volume."""

    start: tuple[int, int, int] = Field(..., description="First voxel (z, y, x)")
    size: tuple[int, int, int] = Field(..., description="Extent (z, y, x) in voxels")
    added_hu: float = Field(800.0, description="HU added inside the slab")

    @field_validator("size")
    @classmethod
    def size_positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"Occluder size must be positive, got {v}")
        return v

    @field_validator("start")
    @classmethod
    def start_nonnegative(cls, v):
        if any(s < 0 for s in v):
            raise ValueError(f"Occluder start must be non-negative, got {v}")
        return v


class DomainShiftSpec(BaseModel):
    """Intensity remap, noise and occlusion applied before rendering."""

    gain: float = Field(1.0, gt=0.0, description="Multiplicative HU gain")
    offset: float = Field(0.0, description="Additive HU offset")
    noise_sigma: float = Field(0.0, ge=0.0, description="Gaussian noise std in HU")
    occluder: Optional[Occluder] = Field(None, description="Optional attenuating slab")

    @property
    def is_identity(self) -> bool:
        return self.gain == 1.0 and self.offset == 0.0 and self.noise_sigma == 0.0 and self.occluder is None


# ----------------------------------------------------------------- geometry


class ProjectionGeometry(BaseModel):
    """
    DRR acquisition geometry.

    The isocenter is the volume centre. In cone mode the point source sits at
    ``source_distance_mm`` in front of the isocenter and the detector plane at
    ``detector_distance_mm`` behind it. Detector rows follow z, columns follow
    the in-plane axis orthogonal to the view.
    """

    mode: Literal["cone", "parallel"] = Field("cone", description="Beam geometry")
    source_distance_mm: float = Field(2000.0, gt=0.0, description="Source to isocenter distance")
    detector_distance_mm: float = Field(150.0, gt=0.0, description="Isocenter to detector distance")
    detector_shape: tuple[int, int] = Field((128, 128), description="Detector (rows, cols)")
    pixel_spacing_mm: float = Field(0.51, gt=0.0, description="Detector pixel pitch")
    view: Literal["ap", "lateral"] = Field("ap", description="Projection direction")

    @field_validator("detector_shape")
    @classmethod
    def detector_positive(cls, v):
        if any(n <= 0 for n in v):
            raise ValueError(f"Detector shape must be positive, got {v}")
        return v

    @property
    def magnification(self) -> float:
        """Detector-plane magnification of an object at the isocenter."""
        if self.mode == "parallel":
            return 1.0
        return (self.source_distance_mm + self.detector_distance_mm) / self.source_distance_mm

    @classmethod
    def thorax(cls, **overrides) -> "ProjectionGeometry":
        return cls(**{"source_distance_mm": 2000.0, **overrides})

    @classmethod
    def abdomen(cls, **overrides) -> "ProjectionGeometry":
        return cls(**{"source_distance_mm": 1000.0, **overrides})


# ------------------------------------------------------------------- models


class SrmConfig(BaseModel):
    """Structural Reconstruction Module: five transposed 3D convolutions."""

    z_strides: tuple[int, int, int, int, int] = Field((2, 2, 2, 2, 2), description="Depth stride per layer")
    channels: tuple[int, int, int, int, int] = Field((8, 8, 8, 8, 8), description="Output channels per layer")
    padding: int = Field(1, ge=0, description="Padding on every axis")

    @field_validator("z_strides")
    @classmethod
    def strides_positive(cls, v):
        if any(s < 1 for s in v):
            raise ValueError(f"z_strides must be >= 1, got {v}")
        return v

    @property
    def depth(self) -> int:
        return math.prod(self.z_strides)

    def kernel_for(self, z_stride: int) -> tuple[int, int, int]:
        """Depth kernel grows with the stride so depth scales exactly by ``z_stride``."""
        return (z_stride + 2 * self.padding, 1 + 2 * self.padding, 1 + 2 * self.padding)

    @classmethod
    def for_depth(cls, depth: int, channels: int = 8) -> "SrmConfig":
        """
        Five z-strides whose product is ``depth``.

        Strides of 2 are used from the first layer; remaining layers use 1,
        except that depths beyond 32 put the excess factor on the last layer
        (64 -> 2,2,2,2,4).
        """
        if depth < 1 or depth & (depth - 1):
            raise ValueError(f"SRM depth must be a power of two, got {depth}")
        exponent = depth.bit_length() - 1
        if exponent > 10:
            raise ValueError(f"SRM depth {depth} exceeds 4^5")
        strides = [2 if i < exponent else 1 for i in range(5)]
        remaining = exponent - 5
        index = 4
        while remaining > 0:
            strides[index] *= 2
            remaining -= 1
            if strides[index] == 4:
                index -= 1
        return cls(z_strides=tuple(strides), channels=(channels,) * 5)


class UNet3DConfig(BaseModel):
    """3D U-Net: four levels, two 3x3x3 conv+relu per level, 2x2x2 max pooling."""

    levels: int = Field(4, ge=2, le=6)
    base_channels: int = Field(8, ge=1)
    max_channels: int = Field(64, ge=1)
    dropout_mode: Literal["none", "dropout", "dropblock"] = Field("dropout")
    dropout_p: float = Field(0.6, ge=0.0, lt=1.0, description="Decoder-end dropout probability")
    block_size: int = Field(2, ge=1, description="DropBlock cube edge")
    drop_rate: float = Field(0.1, ge=0.0, lt=1.0, description="DropBlock target drop fraction")

    @property
    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.levels)]


class PhiSegConfig(BaseModel):
    """2D-encoder / 3D-likelihood hierarchical conditional VAE."""

    levels: int = Field(4, ge=2, le=6)
    latent_levels: int = Field(3, ge=1)
    latent_channels: int = Field(4, ge=1)
    base_channels: int = Field(8, ge=1)
    max_channels: int = Field(64, ge=1)
    distill_channels: int = Field(4, ge=1)
    fusion: bool = Field(True, description="Enable the fusion module")
    fusion_channels: int = Field(4, ge=1)
    lift_mode: Literal["scaled", "tile"] = Field("scaled", description="Latent lifting: 1/sqrt(d) or plain tile")
    recon_head: bool = Field(False, description="Add the 2D reconstruction head (domain adaptation)")

    @model_validator(mode="after")
    def latent_levels_fit(self):
        if self.latent_levels >= self.levels:
            raise ValueError(
                f"latent_levels ({self.latent_levels}) must be smaller than levels ({self.levels})"
            )
        return self

    @property
    def channels(self) -> list[int]:
        return [min(self.base_channels * 2**level, self.max_channels) for level in range(self.levels)]


# ---------------------------------------------------------------- pipelines


class DatasetSpec(BaseModel):
    """Phantoms rendered to (DRR, target mask) pairs."""

    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    geometry: Optional[ProjectionGeometry] = Field(
        None, description="Render geometry; None derives the aligned default"
    )
    n_train: int = Field(50, ge=0)
    n_test: int = Field(10, ge=0)
    target_dims: tuple[int, int, int] = Field((32, 32, 32), description="Centre-crop extents (z, y, x)")
    detector_pixels: int = Field(128, ge=1, description="Detector side for the aligned default geometry")
    seed: int = Field(0)
    shift: Optional[DomainShiftSpec] = Field(None, description="Optional domain shift before rendering")

    @model_validator(mode="after")
    def crop_fits(self):
        if any(t > d for t, d in zip(self.target_dims, self.phantom.dims)):
            raise ValueError(f"target_dims {self.target_dims} exceed phantom dims {self.phantom.dims}")
        if self.n_train + self.n_test == 0:
            raise ValueError("Dataset must contain at least one item")
        return self

    @property
    def image_dims(self) -> tuple[int, int]:
        """Network input (rows, cols) = target (z, x)."""
        return (self.target_dims[0], self.target_dims[2])


class TrainConfig(BaseModel):
    """One training run."""

    model: ModelFamily = Field("unet-dropout", description="Model family")
    dataset_dir: str = Field(..., description="Dataset produced by build_dataset")
    target_dataset_dir: Optional[str] = Field(None, description="Unlabelled target domain (UDA)")
    output_dir: str = Field("./runs/train", description="Where checkpoints and logs go")
    lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(40, ge=1)
    seed: int = Field(0)
    beta: float = Field(1.0, ge=0.0, description="KL weight (PhiSeg)")
    kl_warmup_fraction: float = Field(0.1, ge=0.0, le=1.0)
    early_stop_patience: int = Field(10, ge=1)
    recon_weight: float = Field(1.0, ge=0.0, description="Reconstruction loss weight (UDA)")
    use_target_stream: bool = Field(True, description="UDA: feed target minibatches")
    n_train: Optional[int] = Field(None, ge=1, description="Use only the first n training items")
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many optimiser steps")

    base_channels: int = Field(8, ge=1)
    dropout_p: float = Field(0.6, ge=0.0, lt=1.0)
    block_size: int = Field(2, ge=1)
    drop_rate: float = Field(0.1, ge=0.0, lt=1.0)
    latent_channels: int = Field(4, ge=1)
    lift_mode: Literal["scaled", "tile"] = Field("scaled")

    @model_validator(mode="after")
    def uda_needs_target(self):
        if self.model == "phiseg-uda" and self.use_target_stream and not self.target_dataset_dir:
            raise ValueError("phiseg-uda requires target_dataset_dir (or use_target_stream=False)")
        return self


class EvalConfig(BaseModel):
    """Evaluation protocol."""

    mc_samples: int = Field(20, ge=1, description="Monte-Carlo samples per case")
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    median_mode: Literal["2d", "3d", "none"] = Field("2d", description="Post-processing median filter")
    split: Literal["train", "test"] = Field("test")
    seed: int = Field(0)
    projected: bool = Field(True, description="Also compute 2D projected Dice")


class ModelSpec(BaseModel):
    """Everything needed to rebuild a model; echoed into checkpoint sidecars."""

    architecture: ModelFamily = Field(..., description="Model family")
    target_shape: tuple[int, int, int] = Field(..., description="Network target [depth, height, width]")
    srm: SrmConfig
    unet: Optional[UNet3DConfig] = None
    phiseg: Optional[PhiSegConfig] = None
    init_seed: int = Field(0, description="Seed of the initialisation stream")

    @model_validator(mode="after")
    def family_config_present(self):
        if self.architecture.startswith("unet") and self.unet is None:
            raise ValueError(f"{self.architecture} needs a unet config")
        if self.architecture.startswith("phiseg") and self.phiseg is None:
            raise ValueError(f"{self.architecture} needs a phiseg config")
        return self
