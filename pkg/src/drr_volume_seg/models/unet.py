"""
2D-3D U-Net.

A Structural Reconstruction Module (SRM) inflates the depth-1 input image
into a full-depth feature volume; a four-level 3D U-Net segments it.
Stochasticity comes from one dropout (or DropBlock) layer after the last
decoder block, kept active at inference for Monte-Carlo sampling.
"""

from typing import Optional

import numpy as np

from ..config import SrmConfig, UNet3DConfig
from ..core import functional as F
from ..core.rng import RngState
from ..core.tensor import Tensor, no_grad
from ..errors import ConfigError, ShapeError
from .layers import ConvBlock, Conv3d, ConvTranspose3d, Module


class StructuralReconstruction(Module):
    """Five transposed 3D convolutions, stride ``(s_z, 1, 1)``, each followed by ReLU."""

    def __init__(self, config: SrmConfig, rng: RngState):
        super().__init__()
        self.config = config
        self.layers = []
        in_channels = 1
        for i, (s, c) in enumerate(zip(config.z_strides, config.channels)):
            layer = ConvTranspose3d(
                in_channels,
                c,
                rng.derive(f"layer{i}"),
                kernel=config.kernel_for(s),
                stride=(s, 1, 1),
                padding=config.padding,
            )
            self.layers.append(self.add_module(f"layer{i}", layer))
            in_channels = c

    @property
    def out_channels(self) -> int:
        return self.config.channels[-1]


class UNet3D(Module):
    """Encoder/decoder with skip connections by channel concatenation."""

    def __init__(self, config: UNet3DConfig, in_channels: int, rng: RngState):
        super().__init__()
        self.config = config
        widths = config.channels
        self.encoder = []
        previous = in_channels
        for level, width in enumerate(widths):
            self.encoder.append(self.add_module(f"enc{level}", ConvBlock(previous, width, rng.derive(f"enc{level}"))))
            previous = width
        self.up = {}
        self.decoder = {}
        for level in reversed(range(len(widths) - 1)):
            self.up[level] = self.add_module(
                f"up{level}", ConvTranspose3d(widths[level + 1], widths[level], rng.derive(f"up{level}"))
            )
            self.decoder[level] = self.add_module(
                f"dec{level}", ConvBlock(2 * widths[level], widths[level], rng.derive(f"dec{level}"))
            )
        self.head = self.add_module("head", Conv3d(widths[0], 1, rng.derive("head"), kernel=1, padding=0))

    @property
    def min_extent_divisor(self) -> int:
        return 2 ** (self.config.levels - 1)


class UNet2D3D(Module):
    """SRM followed by the 3D U-Net."""

    def __init__(
        self,
        srm: SrmConfig,
        unet: UNet3DConfig,
        target_shape: tuple[int, int, int],
        rng: RngState,
    ):
        super().__init__()
        if srm.depth != target_shape[0]:
            raise ConfigError(f"SRM stride product {srm.depth} != target depth {target_shape[0]}")
        divisor = 2 ** (unet.levels - 1)
        if any(extent % divisor for extent in target_shape):
            raise ConfigError(f"Target shape {target_shape} must be divisible by {divisor} for {unet.levels} levels")
        self.target_shape = tuple(target_shape)
        self.srm = self.add_module("srm", StructuralReconstruction(srm, rng.derive("srm")))
        self.unet = self.add_module("unet", UNet3D(unet, self.srm.out_channels, rng.derive("unet")))

    @property
    def stochastic(self) -> bool:
        cfg = self.unet.config
        if cfg.dropout_mode == "dropout":
            return cfg.dropout_p > 0
        if cfg.dropout_mode == "dropblock":
            return cfg.drop_rate > 0
        return False

    def __call__(self, x: Tensor, dropout_active: bool = False, rng: Optional[RngState] = None) -> Tensor:
        return unet3d_forward(self.unet, srm_forward(self.srm, x), dropout_active, rng)


def srm_forward(srm: StructuralReconstruction, x: Tensor) -> Tensor:
    """
    Inflate a batch of images ``[B, 1, H, W]`` (or ``[B, H, W]``) into ``[B, C, D, H, W]``.

    The image is treated as a volume of depth one.
    """
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"srm_forward expects [B, 1, H, W], got {x.shape}")
    h = x.reshape(x.shape[0], 1, 1, x.shape[2], x.shape[3])
    for layer in srm.layers:
        h = F.relu(layer(h))
    return h


def unet3d_forward(
    unet: UNet3D,
    features: Tensor,
    dropout_active: bool = False,
    rng: Optional[RngState] = None,
) -> Tensor:
    """
    Voxelwise logits ``[B, 1, D, H, W]``.

    Args:
        unet: Network.
        features: SRM output.
        dropout_active: Apply the decoder-end dropout / DropBlock.
        rng: Stream for the dropout mask (required when active).
    """
    divisor = unet.min_extent_divisor
    if any(extent % divisor for extent in features.shape[2:]):
        raise ShapeError(f"unet3d_forward: spatial extents {features.shape[2:]} not divisible by {divisor}")
    skips = []
    h = features
    last = len(unet.encoder) - 1
    for level, block in enumerate(unet.encoder):
        h = block(h)
        if level < last:
            skips.append(h)
            h = F.maxpool3d(h)
    for level in reversed(range(last)):
        h = unet.up[level](h)
        h = unet.decoder[level](F.concat([skips[level], h]))

    cfg = unet.config
    if cfg.dropout_mode == "dropout":
        h = F.dropout(h, cfg.dropout_p, rng, dropout_active)
    elif cfg.dropout_mode == "dropblock":
        h = F.dropblock3d(h, cfg.block_size, cfg.drop_rate, rng, dropout_active)
    return unet.head(h)


def mc_sample_unet(model: UNet2D3D, x: Tensor, samples: int, rng: RngState) -> np.ndarray:
    """
    Monte-Carlo dropout sampling.

    Runs ``samples`` forward passes with dropout active, sample ``t`` drawing
    from ``rng.spawn(t)``.

    Returns:
        Probabilities ``[T, B, D, H, W]``.
    """
    if samples < 1:
        raise ValueError(f"Sample count must be >= 1, got {samples}")
    out = []
    with no_grad():
        for t in range(samples):
            logits = model(x, dropout_active=True, rng=rng.spawn(t))
            out.append(F.sigmoid(logits).data[:, 0])
    return np.stack(out)


def predict_unet(model: UNet2D3D, x: Tensor) -> np.ndarray:
    """Deterministic probabilities ``[B, D, H, W]`` (dropout inactive)."""
    with no_grad():
        return F.sigmoid(model(x, dropout_active=False)).data[:, 0]
