"""On-disk formats, JSON schemas and run manifests."""

from .formats import (
    load_checkpoint,
    read_imgf,
    read_volb,
    save_checkpoint,
    write_imgf,
    write_pgm16,
    write_volb,
)
from .output_manager import OutputManager, OutputType
from .schemas import DatasetManifest, MetricsReport, RunManifest, TrainLog

__all__ = [
    "read_volb",
    "write_volb",
    "read_imgf",
    "write_imgf",
    "save_checkpoint",
    "load_checkpoint",
    "write_pgm16",
    "OutputManager",
    "OutputType",
    "DatasetManifest",
    "TrainLog",
    "MetricsReport",
    "RunManifest",
]
