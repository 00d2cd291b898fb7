"""Shared fixtures: tiny phantoms, datasets and model specs that keep the suite fast."""

from pathlib import Path

import numpy as np
import pytest

from drr_volume_seg.config import (
    DatasetSpec,
    ModelSpec,
    PhantomSpec,
    PhiSegConfig,
    SrmConfig,
    TrainConfig,
    UNet3DConfig,
)
from drr_volume_seg.core.rng import RngState
from drr_volume_seg.training import build_dataset

TINY = 16


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def thorax_spec():
    return PhantomSpec(kind="thorax", dims=(32, 32, 32))


@pytest.fixture
def ribcage_spec():
    return PhantomSpec(kind="ribcage", dims=(32, 32, 32))


@pytest.fixture
def tiny_dataset_spec():
    """16^3 thorax phantoms rendered on a 32-pixel detector (16x16 network input)."""
    return DatasetSpec(
        phantom=PhantomSpec(kind="thorax", dims=(TINY,) * 3),
        n_train=4,
        n_test=2,
        target_dims=(TINY,) * 3,
        detector_pixels=32,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """A rendered dataset shared by the training, evaluation and CLI tests."""
    spec = DatasetSpec(
        phantom=PhantomSpec(kind="thorax", dims=(TINY,) * 3),
        n_train=4,
        n_test=2,
        target_dims=(TINY,) * 3,
        detector_pixels=32,
        seed=7,
    )
    out = tmp_path_factory.mktemp("dataset")
    build_dataset(spec, str(out))
    return out


def tiny_train_config(dataset_dir, output_dir, **overrides) -> TrainConfig:
    values = dict(
        model="unet-dropout",
        dataset_dir=str(dataset_dir),
        output_dir=str(output_dir),
        epochs=2,
        batch_size=2,
        base_channels=2,
        latent_channels=2,
        lr=1e-3,
        seed=3,
    )
    values.update(overrides)
    return TrainConfig(**values)


def tiny_unet_spec(mode: str = "dropout", architecture: str = "unet-dropout") -> ModelSpec:
    return ModelSpec(
        architecture=architecture,
        target_shape=(TINY,) * 3,
        srm=SrmConfig.for_depth(TINY, channels=2),
        unet=UNet3DConfig(base_channels=2, dropout_mode=mode, dropout_p=0.5),
        init_seed=11,
    )


def tiny_phiseg_spec(architecture: str = "phiseg", fusion: bool = True, recon_head: bool = False) -> ModelSpec:
    return ModelSpec(
        architecture=architecture,
        target_shape=(TINY,) * 3,
        srm=SrmConfig.for_depth(TINY, channels=2),
        phiseg=PhiSegConfig(
            base_channels=2,
            latent_channels=2,
            distill_channels=2,
            fusion_channels=2,
            fusion=fusion,
            recon_head=recon_head,
        ),
        init_seed=11,
    )


def box_mask(shape=(TINY,) * 3, lo=4, hi=12) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    mask[lo:hi, lo:hi, lo:hi] = 1
    return mask
