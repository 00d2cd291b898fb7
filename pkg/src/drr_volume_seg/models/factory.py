"""Model construction and family-agnostic inference."""

import logging
from typing import Optional, Union

import numpy as np

from ..config import ModelSpec, PhiSegConfig, SrmConfig, TrainConfig, UNet3DConfig
from ..core.rng import RngState
from ..core.tensor import Tensor
from ..errors import ConfigError
from ..storage.formats import load_checkpoint
from .phiseg import PhiSeg2D3D, phiseg_predict_mean, phiseg_sample
from .unet import UNet2D3D, mc_sample_unet, predict_unet

logger = logging.getLogger(__name__)

Model = Union[UNet2D3D, PhiSeg2D3D]

_UNET_MODES = {"unet-det": "none", "unet-dropout": "dropout", "unet-dropblock": "dropblock"}


def model_spec_from_train(config: TrainConfig, target_shape: tuple[int, int, int]) -> ModelSpec:
    """Resolve a training configuration into a full model specification."""
    arch = config.model
    srm = SrmConfig.for_depth(target_shape[0], channels=config.base_channels)
    unet = phiseg = None
    if arch.startswith("unet"):
        mode = _UNET_MODES[arch]
        unet = UNet3DConfig(
            base_channels=config.base_channels,
            dropout_mode=mode,
            dropout_p=config.dropout_p,
            block_size=config.block_size,
            drop_rate=config.drop_rate,
        )
    else:
        phiseg = PhiSegConfig(
            base_channels=config.base_channels,
            latent_channels=config.latent_channels,
            fusion=arch != "phiseg-nofusion",
            lift_mode=config.lift_mode,
            recon_head=arch == "phiseg-uda",
        )
    return ModelSpec(
        architecture=arch,
        target_shape=target_shape,
        srm=srm,
        unet=unet,
        phiseg=phiseg,
        init_seed=RngState(config.seed).child_seed("init"),
    )


def build_model(spec: ModelSpec) -> Model:
    rng = RngState(spec.init_seed).derive("init")
    if spec.architecture.startswith("unet"):
        return UNet2D3D(spec.srm, spec.unet, spec.target_shape, rng)
    return PhiSeg2D3D(spec.phiseg, spec.srm, spec.target_shape, rng)


def is_stochastic(model: Model) -> bool:
    return isinstance(model, PhiSeg2D3D) or model.stochastic


def sample_probabilities(model: Model, x: Tensor, samples: int, rng: RngState) -> np.ndarray:
    """``[T, B, D, H, W]`` probabilities: MC dropout for U-Nets, prior draws for PhiSeg."""
    if isinstance(model, PhiSeg2D3D):
        return phiseg_sample(model, x, samples, rng)
    return mc_sample_unet(model, x, samples, rng)


def predict_probabilities(model: Model, x: Tensor) -> np.ndarray:
    """Deterministic ``[B, D, H, W]`` probabilities (validation)."""
    if isinstance(model, PhiSeg2D3D):
        return phiseg_predict_mean(model, x)
    return predict_unet(model, x)


def checkpoint_meta(spec: ModelSpec, **extra) -> dict:
    """Sidecar content for a checkpoint of ``spec``."""
    return {"architecture": spec.architecture, "model_spec": spec.model_dump(mode="json"), **extra}


def load_model(path, architecture: Optional[str] = None) -> tuple[Model, ModelSpec]:
    """
    Rebuild a model from a checkpoint and its JSON sidecar.

    Args:
        path: ``.ckpt`` file.
        architecture: Load as another member of the same family; parameters
            the target architecture lacks (e.g. the reconstruction head of a
            ``phiseg-uda`` checkpoint loaded as ``phiseg``) are skipped.

    Raises:
        ConfigError: Missing sidecar or an incompatible architecture.
    """
    tensors, meta = load_checkpoint(path)
    if "model_spec" not in meta:
        raise ConfigError(f"Checkpoint {path} has no model sidecar")
    spec = ModelSpec.model_validate(meta["model_spec"])
    strict = True
    if architecture and architecture != spec.architecture:
        if architecture.split("-")[0] != spec.architecture.split("-")[0]:
            raise ConfigError(f"Cannot load a {spec.architecture} checkpoint as {architecture}")
        update: dict = {"architecture": architecture}
        if spec.phiseg is not None:
            update["phiseg"] = spec.phiseg.model_copy(
                update={"recon_head": architecture == "phiseg-uda", "fusion": architecture != "phiseg-nofusion"}
            )
        if spec.unet is not None:
            mode = _UNET_MODES[architecture]
            update["unet"] = spec.unet.model_copy(update={"dropout_mode": mode})
        spec = spec.model_copy(update=update)
        strict = False
    model = build_model(spec)
    skipped = model.load_state_dict(tensors, strict=strict)
    if skipped:
        logger.info("Skipped %d checkpoint entries not used by %s", len(skipped), spec.architecture)
    return model, spec
