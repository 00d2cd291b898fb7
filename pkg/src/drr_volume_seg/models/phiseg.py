"""
2D-3D PhiSeg.

Prior and posterior networks are 2D encoders that emit diagonal-Gaussian
latents at the coarsest resolution levels, finer levels conditioned on the
upsampled coarser sample. The posterior additionally sees the ground truth,
distilled from 3D to a 2D map. Latents are lifted to 3D by replication along
depth and decoded by a 3D likelihood network mirroring the U-Net decoder.
An optional fusion stage mixes input-image features back into the logits.

For domain adaptation a 1x1 reconstruction head regresses the input image
from the depth-averaged likelihood features, sharing every other weight.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..config import PhiSegConfig, SrmConfig
from ..core import functional as F
from ..core.losses import bce_loss, kl_diag_gauss, mse_loss, reparam_sample
from ..core.rng import RngState
from ..core.tensor import Tensor, no_grad
from ..errors import ConfigError, ShapeError
from .layers import Conv2d, Conv3d, ConvBlock, ConvTranspose2d, ConvTranspose3d, Module


@dataclass
class LatentLevel:
    level: int
    mu: Tensor
    logvar: Tensor
    z: Tensor
    lifted: Optional[Tensor] = None


@dataclass
class LatentStack:
    """Per-level latent parameters, coarsest level first."""

    levels: dict[int, LatentLevel] = field(default_factory=dict)

    def samples(self) -> dict[int, Tensor]:
        return {level: entry.z for level, entry in self.levels.items()}

    def __iter__(self):
        return iter(self.levels.values())

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class PhiSegOutput:
    logits: Tensor
    prior: LatentStack
    posterior: Optional[LatentStack] = None


# ----------------------------------------------------------------- modules


class LatentEncoder2D(Module):
    """Prior (input image) or posterior (image + distilled ground truth) network."""

    def __init__(self, config: PhiSegConfig, in_channels: int, rng: RngState):
        super().__init__()
        self.config = config
        widths = config.channels
        self.latent_levels = list(range(config.levels - config.latent_levels, config.levels))
        self.blocks = []
        previous = in_channels
        for level, width in enumerate(widths):
            block = ConvBlock(previous, width, rng.derive(f"block{level}"), spatial_dims=2)
            self.blocks.append(self.add_module(f"block{level}", block))
            previous = width
        top = config.levels - 1
        self.up, self.merge, self.heads = {}, {}, {}
        for level in reversed(self.latent_levels):
            if level != top:
                self.up[level] = self.add_module(
                    f"up{level}", ConvTranspose2d(config.latent_channels, widths[level], rng.derive(f"up{level}"))
                )
                self.merge[level] = self.add_module(
                    f"merge{level}",
                    ConvBlock(2 * widths[level], widths[level], rng.derive(f"merge{level}"), spatial_dims=2),
                )
            self.heads[level] = self.add_module(
                f"head{level}",
                Conv2d(widths[level], 2 * config.latent_channels, rng.derive(f"head{level}"), kernel=1, padding=0),
            )


class Distillation(Module):
    """Strided 3D convolutions collapsing the ground-truth depth to one (inverse of the SRM)."""

    def __init__(self, srm: SrmConfig, channels: int, rng: RngState):
        super().__init__()
        self.layers = []
        in_channels = 1
        for i, s in enumerate(reversed(srm.z_strides)):
            layer = Conv3d(
                in_channels,
                channels,
                rng.derive(f"layer{i}"),
                kernel=srm.kernel_for(s),
                stride=(s, 1, 1),
                padding=srm.padding,
            )
            self.layers.append(self.add_module(f"layer{i}", layer))
            in_channels = channels


class Likelihood3D(Module):
    """U-Net-style 3D decoder with a lifted latent injected at every latent level."""

    def __init__(self, config: PhiSegConfig, rng: RngState):
        super().__init__()
        self.config = config
        widths = config.channels
        lc = config.latent_channels
        self.latent_levels = set(range(config.levels - config.latent_levels, config.levels))
        top = config.levels - 1
        self.bottom = self.add_module("bottom", ConvBlock(lc, widths[top], rng.derive("bottom")))
        self.up, self.decoder = {}, {}
        for level in reversed(range(top)):
            self.up[level] = self.add_module(
                f"up{level}", ConvTranspose3d(widths[level + 1], widths[level], rng.derive(f"up{level}"))
            )
            extra = lc if level in self.latent_levels else 0
            self.decoder[level] = self.add_module(
                f"dec{level}", ConvBlock(widths[level] + extra, widths[level], rng.derive(f"dec{level}"))
            )
        self.head = self.add_module("head", Conv3d(widths[0], 1, rng.derive("head"), kernel=1, padding=0))


class Fusion(Module):
    """
    Image features broadcast along depth, concatenated with the logits, one 3^3 convolution.

    The mixing convolution starts as the identity on the logit channel and
    zero on the image-feature channels.
    """

    def __init__(self, channels: int, rng: RngState):
        super().__init__()
        self.image_conv = self.add_module("image_conv", Conv2d(1, channels, rng.derive("image_conv")))
        self.mix = self.add_module("mix", Conv3d(1 + channels, 1, rng.derive("mix")))
        self.mix.weight.data[...] = 0.0
        self.mix.weight.data[0, 0, 1, 1, 1] = 1.0


class PhiSeg2D3D(Module):
    """Prior, posterior, distillation and likelihood networks, plus optional fusion and reconstruction head."""

    def __init__(
        self,
        config: PhiSegConfig,
        srm: SrmConfig,
        target_shape: tuple[int, int, int],
        rng: RngState,
    ):
        super().__init__()
        if srm.depth != target_shape[0]:
            raise ConfigError(f"Distillation stride product {srm.depth} != target depth {target_shape[0]}")
        divisor = 2 ** (config.levels - 1)
        if any(extent % divisor for extent in target_shape):
            raise ConfigError(f"Target shape {target_shape} must be divisible by {divisor} for {config.levels} levels")
        self.config = config
        self.target_shape = tuple(target_shape)
        self.prior = self.add_module("prior", LatentEncoder2D(config, 1, rng.derive("prior")))
        self.posterior = self.add_module(
            "posterior", LatentEncoder2D(config, 1 + config.distill_channels, rng.derive("posterior"))
        )
        self.distill = self.add_module("distill", Distillation(srm, config.distill_channels, rng.derive("distill")))
        self.likelihood = self.add_module("likelihood", Likelihood3D(config, rng.derive("likelihood")))
        self.fusion = self.add_module(
            "fusion", Fusion(config.fusion_channels, rng.derive("fusion")) if config.fusion else None
        )
        self.recon_head = self.add_module(
            "recon_head",
            Conv2d(config.channels[0], 1, rng.derive("recon_head"), kernel=1, padding=0) if config.recon_head else None,
        )


# -------------------------------------------------------------- operations


def _as_image_batch(x: Tensor) -> Tensor:
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"Expected images [B, 1, H, W], got {x.shape}")
    return x


def _as_mask_batch(gt) -> Tensor:
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=np.float32))
    if gt.ndim == 4:
        gt = gt.reshape(gt.shape[0], 1, *gt.shape[1:])
    if gt.ndim != 5 or gt.shape[1] != 1:
        raise ShapeError(f"Expected masks [B, 1, D, H, W], got {gt.shape}")
    return gt


def distill_forward(distill: Distillation, gt: Tensor) -> Tensor:
    """Ground truth ``[B, 1, D, H, W]`` -> 2D features ``[B, C, H, W]``."""
    h = _as_mask_batch(gt)
    for i, layer in enumerate(distill.layers):
        h = layer(h)
        if i < len(distill.layers) - 1:
            h = F.relu(h)
    if h.shape[2] != 1:
        raise ShapeError(f"Distillation left depth {h.shape[2]}, expected 1")
    return h.reshape(h.shape[0], h.shape[1], h.shape[3], h.shape[4])


def _encoder_latents(
    encoder: LatentEncoder2D,
    inp: Tensor,
    rng: Optional[RngState],
    z_given: Optional[dict[int, Tensor]],
    use_mean: bool,
) -> LatentStack:
    features = []
    h = inp
    last = len(encoder.blocks) - 1
    for level, block in enumerate(encoder.blocks):
        h = block(h)
        features.append(h)
        if level < last:
            h = F.maxpool2d(h)

    lc = encoder.config.latent_channels
    stack = LatentStack()
    previous: Optional[Tensor] = None
    for level in reversed(encoder.latent_levels):
        if previous is None:
            h = features[level]
        else:
            up = F.relu(encoder.up[level](previous))
            h = encoder.merge[level](F.concat([features[level], up]))
        mu, logvar = F.split_channels(encoder.heads[level](h), [lc, lc])
        if z_given is not None:
            z = z_given[level]
        elif use_mean:
            z = mu
        else:
            if rng is None:
                raise ValueError("Sampling latents requires an RngState")
            z = reparam_sample(mu, logvar, rng.derive(f"z{level}"))
        stack.levels[level] = LatentLevel(level=level, mu=mu, logvar=logvar, z=z)
        previous = z
    return stack


def phiseg_encode(
    model: PhiSeg2D3D,
    x: Tensor,
    distilled: Optional[Tensor] = None,
    rng: Optional[RngState] = None,
    z_given: Optional[dict[int, Tensor]] = None,
    use_mean: bool = False,
) -> LatentStack:
    """
    Latent stack from the prior (``distilled is None``) or the posterior.

    Args:
        model: PhiSeg model.
        x: Images ``[B, 1, H, W]``.
        distilled: ``distill_forward`` output; selects the posterior network.
        rng: Stream for the reparameterised samples.
        z_given: Per-level samples to condition finer levels on instead of
            drawing (the prior during training uses the posterior's samples).
        use_mean: Use ``mu`` as the sample (MAP decoding).
    """
    x = _as_image_batch(x)
    if distilled is None:
        return _encoder_latents(model.prior, x, rng, z_given, use_mean)
    return _encoder_latents(model.posterior, F.concat([x, distilled]), rng, z_given, use_mean)


def lift_latent(z: Tensor, depth: int, mode: str = "scaled", expected_depth: Optional[int] = None) -> Tensor:
    """
    Replicate a 2D latent ``[B, C, H, W]`` along a new depth axis.

    ``mode="scaled"`` multiplies by ``1/sqrt(depth)`` so the L2 norm is
    preserved; ``mode="tile"`` replicates unscaled.

    Raises:
        ShapeError: If ``expected_depth`` is given and differs from ``depth``.
    """
    if expected_depth is not None and depth != expected_depth:
        raise ShapeError(f"lift_latent: depth {depth} does not match decoder level depth {expected_depth}")
    if mode not in ("scaled", "tile"):
        raise ValueError(f"Unknown lift mode {mode!r}")
    scale = 1.0 / math.sqrt(depth) if mode == "scaled" else 1.0
    return F.expand_depth(z, depth, scale)


def _decode(model: PhiSeg2D3D, stack: LatentStack) -> tuple[Tensor, Tensor]:
    """Run the likelihood network; returns (logits, level-0 features)."""
    lik = model.likelihood
    config = model.config
    depth = model.target_shape[0]
    top = config.levels - 1

    def lifted(level: int) -> Tensor:
        entry = stack.levels[level]
        level_depth = depth // 2**level
        entry.lifted = lift_latent(entry.z, level_depth, config.lift_mode, expected_depth=level_depth)
        return entry.lifted

    if len(stack) != len(lik.latent_levels) or set(stack.levels) != lik.latent_levels:
        raise ShapeError(
            f"Latent levels {sorted(stack.levels)} do not match decoder levels {sorted(lik.latent_levels)}"
        )
    h = lik.bottom(lifted(top))
    for level in reversed(range(top)):
        h = lik.up[level](h)
        if level in lik.latent_levels:
            h = F.concat([h, lifted(level)])
        h = lik.decoder[level](h)
    return lik.head(h), h


def phiseg_likelihood(model: PhiSeg2D3D, stack: LatentStack) -> Tensor:
    """Decode a latent stack to 3D logits ``s`` of the target shape."""
    return _decode(model, stack)[0]


def fusion_forward(fusion: Fusion, x: Tensor, s: Tensor) -> Tensor:
    """``s' = conv3d(concat(s, expand_depth(relu(conv2d(x)))))``."""
    x = _as_image_batch(x)
    if s.ndim != 5 or s.shape[3:] != x.shape[2:]:
        raise ShapeError(f"fusion_forward: logits {s.shape} do not match image {x.shape}")
    features = F.expand_depth(F.relu(fusion.image_conv(x)), s.shape[2])
    return fusion.mix(F.concat([s, features]))


def _finish(model: PhiSeg2D3D, x: Tensor, s: Tensor) -> Tensor:
    return fusion_forward(model.fusion, x, s) if model.fusion is not None else s


def phiseg_forward(model: PhiSeg2D3D, x: Tensor, gt: Tensor, rng: RngState) -> PhiSegOutput:
    """
    Training pass: posterior samples decode the logits, the prior is conditioned on them.
    """
    x = _as_image_batch(x)
    posterior = phiseg_encode(model, x, distill_forward(model.distill, gt), rng=rng.derive("posterior"))
    prior = phiseg_encode(model, x, z_given=posterior.samples())
    s = phiseg_likelihood(model, posterior)
    return PhiSegOutput(logits=_finish(model, x, s), prior=prior, posterior=posterior)


def phiseg_loss(
    logits: Tensor,
    gt,
    prior: LatentStack,
    posterior: LatentStack,
    beta: float = 1.0,
) -> tuple[Tensor, dict[str, float]]:
    """
    ``bce(s', gt) + beta * sum_levels KL(posterior || prior)``.

    Returns:
        (loss, breakdown) where breakdown holds ``bce``, ``kl`` and one
        ``kl_level{l}`` entry per latent level.
    """
    gt = _as_mask_batch(gt)
    bce = bce_loss(logits, gt)
    breakdown = {"bce": bce.item()}
    kl_total: Optional[Tensor] = None
    for level, post in posterior.levels.items():
        pri = prior.levels[level]
        kl = kl_diag_gauss(post.mu, post.logvar, pri.mu, pri.logvar)
        breakdown[f"kl_level{level}"] = kl.item()
        kl_total = kl if kl_total is None else kl_total + kl
    breakdown["kl"] = kl_total.item() if kl_total is not None else 0.0
    loss = bce if kl_total is None or beta == 0.0 else bce + kl_total * beta
    breakdown["loss"] = loss.item()
    return loss, breakdown


def phiseg_sample(model: PhiSeg2D3D, x: Tensor, samples: int, rng: RngState) -> np.ndarray:
    """
    Draw ``samples`` segmentations from the prior.

    Returns:
        Probabilities ``[T, B, D, H, W]``.
    """
    if samples < 1:
        raise ValueError(f"Sample count must be >= 1, got {samples}")
    x = _as_image_batch(x)
    out = []
    with no_grad():
        for t in range(samples):
            stack = phiseg_encode(model, x, rng=rng.spawn(t))
            logits = _finish(model, x, phiseg_likelihood(model, stack))
            out.append(F.sigmoid(logits).data[:, 0])
    return np.stack(out)


def phiseg_predict_mean(model: PhiSeg2D3D, x: Tensor) -> np.ndarray:
    """Probabilities ``[B, D, H, W]`` decoded from the prior means."""
    x = _as_image_batch(x)
    with no_grad():
        stack = phiseg_encode(model, x, use_mean=True)
        return F.sigmoid(_finish(model, x, phiseg_likelihood(model, stack))).data[:, 0]


def phiseg_reconstruct(model: PhiSeg2D3D, x: Tensor, rng: RngState) -> Tensor:
    """
    Reconstruct the input image through the shared prior and likelihood networks.

    Depth-averaged level-0 likelihood features pass the 1x1 reconstruction
    head and a sigmoid, giving ``[B, 1, H, W]`` in ``[0, 1]``.
    """
    if model.recon_head is None:
        raise ConfigError("Model was built without a reconstruction head")
    x = _as_image_batch(x)
    stack = phiseg_encode(model, x, rng=rng)
    _, features = _decode(model, stack)
    return F.sigmoid(model.recon_head(F.mean_depth(features)))


def uda_forward(
    model: PhiSeg2D3D,
    x_src: Tensor,
    gt_src: Tensor,
    x_tgt: Tensor,
    rng: RngState,
    beta: float = 1.0,
) -> tuple[Tensor, Tensor, dict[str, float]]:
    """
    Segmentation loss on the source batch and reconstruction loss on the target batch.

    Returns:
        (segmentation loss, reconstruction loss, breakdown)
    """
    out = phiseg_forward(model, x_src, gt_src, rng.derive("source"))
    seg_loss, breakdown = phiseg_loss(out.logits, gt_src, out.prior, out.posterior, beta)
    x_tgt = _as_image_batch(x_tgt)
    recon = phiseg_reconstruct(model, x_tgt, rng.derive("target"))
    recon_loss = mse_loss(recon, x_tgt)
    breakdown["recon"] = recon_loss.item()
    return seg_loss, recon_loss, breakdown
