"""
Optimisation loops.

All randomness flows from ``TrainConfig.seed`` through named streams:

    init      model initialisation (see ``model_spec_from_train``)
    shuffle   per-epoch minibatch order
    dropout   U-Net dropout masks, one child per step
    latent    PhiSeg reparameterisation, one child per step
    target    UDA target-domain minibatch order

so a run is fully determined by its configuration.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import __version__
from ..config import ModelSpec, TrainConfig
from ..core.losses import bce_loss, mse_loss
from ..core.optim import Adam
from ..core.rng import RngState
from ..core.tensor import Tensor
from ..errors import ConfigError, TrainingDivergedError
from ..evaluation.metrics import binarize_and_filter, dice
from ..models import (
    Model,
    PhiSeg2D3D,
    build_model,
    checkpoint_meta,
    model_spec_from_train,
    phiseg_forward,
    phiseg_loss,
    phiseg_reconstruct,
    predict_probabilities,
)
from ..storage.formats import save_checkpoint
from ..storage.output_manager import OutputManager, OutputType
from ..storage.schemas import EpochRecord, StepRecord, TrainLog
from .dataset import PairedSplit, load_split

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.json"
VALIDATION_BATCH = 4

Progress = Optional[Callable[[dict], None]]


@dataclass
class TrainResult:
    """Outcome of a run; ``model`` holds the best-validation parameters."""

    model: Model
    spec: ModelSpec
    log: TrainLog
    checkpoint: Path


def kl_weight(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup of ``beta`` over the first ``kl_warmup_fraction`` of steps."""
    warmup = int(round(config.kl_warmup_fraction * total_steps))
    if warmup <= 0:
        return config.beta
    return config.beta * min(1.0, step / warmup)


def validation_dice(model: Model, split: PairedSplit, threshold: float = 0.5) -> float:
    """Mean Dice of deterministic predictions (inactive dropout, prior means) over ``split``."""
    scores = []
    for start in range(0, len(split), VALIDATION_BATCH):
        images = split.images[start : start + VALIDATION_BATCH]
        probs = predict_probabilities(model, Tensor(images))
        for prob, gt in zip(probs, split.masks[start : start + VALIDATION_BATCH]):
            scores.append(dice(binarize_and_filter(prob, threshold), gt[0]))
    return float(np.mean(scores)) if scores else 0.0


def _check_finite(step: int, terms: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in terms.values()):
        raise TrainingDivergedError(step, terms)


def _reconstruction_step(
    model: PhiSeg2D3D, optimizer: Adam, x_tgt: Tensor, rng: RngState, weight: float, step: int
) -> float:
    """One update of the shared networks from the target reconstruction loss; returns the unweighted loss."""
    loss = mse_loss(phiseg_reconstruct(model, x_tgt, rng), x_tgt)
    value = loss.item()
    _check_finite(step, {"recon": value})
    optimizer.zero_grad()
    (loss * weight).backward()
    optimizer.step()
    return value


def _load_splits(config: TrainConfig) -> tuple[PairedSplit, PairedSplit]:
    train_split = load_split(config.dataset_dir, "train")
    if config.n_train is not None:
        train_split = train_split.subset(config.n_train)
    if len(train_split) == 0:
        raise ConfigError(f"Dataset {config.dataset_dir} has no training items")
    val_split = load_split(config.dataset_dir, "test")
    if len(val_split) == 0:
        logger.warning("No test split in %s; validating on the training items", config.dataset_dir)
        val_split = train_split
    return train_split, val_split


def train(config: TrainConfig, progress: Progress = None, manager: Optional[OutputManager] = None) -> TrainResult:
    """
    Train the configured model family and keep the best-by-validation checkpoint.

    U-Nets minimise BCE; PhiSeg variants add the warmed-up, beta-weighted KL
    term. ``phiseg-uda`` is delegated to ``train_uda``.

    Args:
        config: Training configuration.
        progress: Called with ``{"event": "step" | "epoch", ...}``.
        manager: Registers the checkpoint and log when given.

    Returns:
        TrainResult with the best model loaded.

    Raises:
        ConfigError: Missing dataset or requested sizes exceed it.
        TrainingDivergedError: A loss term became NaN or infinite.
    """
    if config.model == "phiseg-uda":
        return train_uda(config, progress, manager)
    return _fit(config, None, progress, manager)


def train_uda(
    config: TrainConfig, progress: Progress = None, manager: Optional[OutputManager] = None
) -> TrainResult:
    """
    Joint segmentation (source) and reconstruction (target) training.

    Minibatches alternate: every source segmentation update is followed by one
    target reconstruction update of the shared networks, each with its own
    backward pass and optimiser step. The reconstruction update is skipped when
    ``recon_weight`` is 0. With ``use_target_stream=False`` the run consumes
    exactly the random streams of plain PhiSeg training.
    """
    if config.model != "phiseg-uda":
        raise ConfigError(f"train_uda needs model phiseg-uda, got {config.model}")
    target = None
    if config.use_target_stream:
        target = load_split(config.target_dataset_dir, "train")
        if len(target) == 0:
            raise ConfigError(f"Target dataset {config.target_dataset_dir} has no training items")
    return _fit(config, target, progress, manager)


def _fit(
    config: TrainConfig,
    target: Optional[PairedSplit],
    progress: Progress,
    manager: Optional[OutputManager],
) -> TrainResult:
    train_split, val_split = _load_splits(config)
    spec = model_spec_from_train(config, train_split.target_shape)
    model = build_model(spec)
    optimizer = Adam(model.parameters(), lr=config.lr)

    root = RngState(config.seed)
    shuffle_rng = root.derive("shuffle")
    dropout_rng = root.derive("dropout")
    latent_rng = root.derive("latent")
    target_rng = root.derive("target")

    n = len(train_split)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / CHECKPOINT_NAME
    log = TrainLog(
        config=config.model_dump(mode="json"),
        model=spec.model_dump(mode="json"),
        rng={"root": root.provenance(), "init_seed": spec.init_seed},
    )
    logger.info(
        "Training %s: %d items, %d steps/epoch, %d parameters",
        spec.architecture,
        n,
        steps_per_epoch,
        model.num_parameters(),
    )

    target_order: Optional[np.ndarray] = None
    step = 0
    since_best = 0
    best_state = model.state_dict()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.spawn(epoch).permutation(n)
        if target is not None:
            target_order = target_rng.spawn(epoch).permutation(len(target))
        epoch_losses = []
        for batch_index, idx in enumerate(train_split.batches(config.batch_size, order)):
            if step >= total_steps:
                break
            step += 1
            x = Tensor(train_split.images[idx])
            gt = Tensor(train_split.masks[idx])
            beta = kl_weight(config, step, total_steps)

            if isinstance(model, PhiSeg2D3D):
                step_rng = latent_rng.spawn(step)
                out = phiseg_forward(model, x, gt, step_rng.derive("source"))
                loss, terms = phiseg_loss(out.logits, gt, out.prior, out.posterior, beta)
                terms["beta"] = beta
            else:
                logits = model(x, dropout_active=model.stochastic, rng=dropout_rng.spawn(step))
                loss = bce_loss(logits, gt)
                terms = {"bce": loss.item(), "loss": loss.item()}

            _check_finite(step, terms)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            if target is not None and config.recon_weight > 0:
                t_idx = np.take(target_order, np.arange(len(idx)) + batch_index * config.batch_size, mode="wrap")
                terms["recon"] = _reconstruction_step(
                    model, optimizer, Tensor(target.images[t_idx]), step_rng.derive("target"), config.recon_weight, step
                )

            log.steps.append(StepRecord(step=step, epoch=epoch, terms=terms))
            epoch_losses.append(terms["loss"])
            if progress:
                progress({"event": "step", "step": step, "epoch": epoch, **terms})

        if not epoch_losses:
            break
        val = validation_dice(model, val_split)
        improved = log.best_dice is None or val > log.best_dice
        if improved:
            log.best_dice = val
            log.best_epoch = epoch
            best_state = model.state_dict()
            save_checkpoint(
                checkpoint_path,
                best_state,
                checkpoint_meta(spec, epoch=epoch, val_dice=val, tool_version=__version__),
            )
            since_best = 0
        else:
            since_best += 1
        mean_loss = float(np.mean(epoch_losses))
        log.epochs.append(EpochRecord(epoch=epoch, val_dice=val, mean_loss=mean_loss, best=improved))
        logger.info("Epoch %d: loss %.4f, val Dice %.4f%s", epoch, mean_loss, val, " (best)" if improved else "")
        if progress:
            progress({"event": "epoch", "epoch": epoch, "val_dice": val, "mean_loss": mean_loss, "best": improved})

        if step >= total_steps:
            break
        if since_best >= config.early_stop_patience:
            log.stopped_early = True
            logger.info("Early stop after %d epochs without improvement", since_best)
            break

    model.load_state_dict(best_state)
    log.checkpoint = CHECKPOINT_NAME
    log_path = out_dir / LOG_NAME
    log.to_json(str(log_path))
    if manager is not None:
        manager.register_file(checkpoint_path, OutputType.FINAL, "ckpt", {"architecture": spec.architecture})
        manager.register_file(log_path, OutputType.FINAL, "json", {"kind": "train_log"})
    return TrainResult(model=model, spec=spec, log=log, checkpoint=checkpoint_path)
