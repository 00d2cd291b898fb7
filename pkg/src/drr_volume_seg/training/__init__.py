"""Dataset assembly, training loops and experiment recipes."""

from .dataset import PairedSplit, build_dataset, load_manifest, load_split
from .trainer import TrainResult, kl_weight, train, train_uda, validation_dice

__all__ = [
    "build_dataset",
    "load_split",
    "load_manifest",
    "PairedSplit",
    "train",
    "train_uda",
    "kl_weight",
    "validation_dice",
    "TrainResult",
]
