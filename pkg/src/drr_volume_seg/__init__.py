"""
drr-volume-seg - 3D probabilistic segmentation from single 2D projections.

Synthetic CT phantoms are rendered to digitally reconstructed radiographs
(DRRs) by Siddon raytracing; 2D-3D U-Net and 2D-3D PhiSeg models trained on
(DRR, 3D mask) pairs predict volumetric segmentations with Monte-Carlo
uncertainty bounds.
"""

__version__ = "0.1.0"

from .config import (
    DatasetSpec,
    DomainShiftSpec,
    EvalConfig,
    PhantomSpec,
    ProjectionGeometry,
    TrainConfig,
)
from .errors import DrrSegError

__all__ = [
    "__version__",
    "DrrSegError",
    "PhantomSpec",
    "DomainShiftSpec",
    "ProjectionGeometry",
    "DatasetSpec",
    "TrainConfig",
    "EvalConfig",
]
