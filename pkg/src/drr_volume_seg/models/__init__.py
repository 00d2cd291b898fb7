"""2D-3D U-Net and 2D-3D PhiSeg."""

from .factory import (
    Model,
    build_model,
    checkpoint_meta,
    is_stochastic,
    load_model,
    model_spec_from_train,
    predict_probabilities,
    sample_probabilities,
)
from .layers import Module
from .phiseg import (
    LatentStack,
    PhiSeg2D3D,
    distill_forward,
    fusion_forward,
    lift_latent,
    phiseg_encode,
    phiseg_forward,
    phiseg_likelihood,
    phiseg_loss,
    phiseg_predict_mean,
    phiseg_reconstruct,
    phiseg_sample,
    uda_forward,
)
from .unet import UNet2D3D, mc_sample_unet, predict_unet, srm_forward, unet3d_forward

__all__ = [
    "Model",
    "Module",
    "UNet2D3D",
    "PhiSeg2D3D",
    "LatentStack",
    "build_model",
    "load_model",
    "checkpoint_meta",
    "model_spec_from_train",
    "is_stochastic",
    "sample_probabilities",
    "predict_probabilities",
    "srm_forward",
    "unet3d_forward",
    "mc_sample_unet",
    "predict_unet",
    "distill_forward",
    "phiseg_encode",
    "lift_latent",
    "phiseg_likelihood",
    "fusion_forward",
    "phiseg_forward",
    "phiseg_loss",
    "phiseg_sample",
    "phiseg_predict_mean",
    "phiseg_reconstruct",
    "uda_forward",
]
