"""
Monte-Carlo evaluation of a checkpoint on a dataset split.

Per case the T sampled probability volumes are averaged into the headline
prediction; per-sample metrics give the uncertainty bounds.
"""

import logging
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from ..config import EvalConfig
from ..core.rng import RngState
from ..core.tensor import Tensor
from ..imaging import (
    MaskVolume,
    RayWeights,
    depth_mean_projection,
    extract_ray_weights,
    from_network_layout,
    grid_geometry,
    project_mask,
)
from ..models import is_stochastic, load_model, sample_probabilities
from ..storage.formats import write_pgm16
from ..storage.output_manager import OutputManager, OutputType
from ..storage.schemas import CaseMetrics, MetricsReport
from ..training.dataset import load_manifest, load_split
from .metrics import binarize_and_filter, dice, dice2d, summarize, uncertainty_bounds, volume_ratio

logger = logging.getLogger(__name__)

PROJECTION_NOTE = (
    "2D Dice compares deterministic parallel projections of the predicted and true masks "
    "(path length > 0.5 voxel); no learned 3D-to-2D projection is used."
)
VALIDATION_NOTE = "Checkpoint selection used the test split; test metrics are optimistic."

Progress = Optional[Callable[[dict], None]]


class _Projector:
    """Project network-layout masks to the detector-aligned 2D grid."""

    def __init__(self, dims: tuple[int, int, int], spacing: tuple[float, float, float], view: str):
        self.view = view
        self.spacing = spacing
        self.weights: RayWeights = extract_ray_weights(grid_geometry(dims, spacing, view), dims, spacing)

    def __call__(self, mask: np.ndarray) -> np.ndarray:
        volume = MaskVolume(from_network_layout(mask, self.view), self.spacing)
        return project_mask(volume, weights=self.weights)


def evaluate(
    checkpoint: str,
    dataset_dir: str,
    config: Optional[EvalConfig] = None,
    architecture: Optional[str] = None,
    previews_dir: Optional[str] = None,
    progress: Progress = None,
    manager: Optional[OutputManager] = None,
) -> MetricsReport:
    """
    Evaluate ``checkpoint`` on one split of ``dataset_dir``.

    Args:
        checkpoint: ``.ckpt`` file with sidecar.
        dataset_dir: Dataset written by ``build_dataset``.
        config: Evaluation protocol; defaults to ``EvalConfig()``.
        architecture: Evaluate as another member of the checkpoint's family.
        previews_dir: Write 16-bit PGM previews per case when given.
        progress: Called with ``{"event": "case", ...}``.
        manager: Registers preview files when given.

    Returns:
        MetricsReport with one entry per case.

    Raises:
        EvaluationError: A case has an empty ground-truth mask.
    """
    config = config or EvalConfig()
    model, spec = load_model(checkpoint, architecture)
    manifest = load_manifest(dataset_dir)
    split = load_split(dataset_dir, config.split)
    spacing = tuple(manifest.spec.get("phantom", {}).get("spacing", (1.0, 1.0, 1.0)))
    project = _Projector(tuple(manifest.target_dims), spacing, manifest.view) if config.projected else None
    rng = RngState(config.seed).derive("eval")
    samples_count = config.mc_samples if is_stochastic(model) else 1
    if samples_count != config.mc_samples:
        logger.info("%s is deterministic; drawing a single sample per case", spec.architecture)

    preview_root = Path(previews_dir) if previews_dir else None
    if preview_root is not None:
        preview_root.mkdir(parents=True, exist_ok=True)

    cases = []
    for i, item in enumerate(split.items):
        x = Tensor(split.images[i : i + 1])
        samples = sample_probabilities(model, x, samples_count, rng.spawn(item.index))[:, 0]
        gt = split.masks[i, 0]
        mean_prob = samples.mean(axis=0)
        headline = binarize_and_filter(mean_prob, config.threshold, config.median_mode)
        bounds = uncertainty_bounds(samples, gt, config.threshold, config.median_mode)

        case = CaseMetrics(
            index=item.index,
            seed=item.seed,
            dice=dice(headline, gt),
            volume_ratio=volume_ratio(headline, gt),
            dice_samples=bounds["dice"],
            volume_ratio_samples=bounds["volume_ratio"],
        )
        if project is not None:
            gt2d = project(gt)
            case.dice2d = dice2d(project(headline), gt2d)
            case.dice2d_samples = summarize(
                [dice2d(project(binarize_and_filter(s, config.threshold, config.median_mode)), gt2d) for s in samples]
            )
        cases.append(case)

        if preview_root is not None:
            _write_previews(preview_root, item.index, mean_prob, gt, manager)
        if progress:
            progress({"event": "case", "index": item.index, "dice": case.dice, "total": len(split)})

    notes = [VALIDATION_NOTE] if config.split == "test" else []
    if project is not None:
        notes.append(PROJECTION_NOTE)
    return MetricsReport(
        architecture=spec.architecture,
        checkpoint=str(checkpoint),
        split=config.split,
        config={**config.model_dump(mode="json"), "samples_drawn": samples_count},
        cases=cases,
        aggregate=_aggregate(cases),
        notes=notes,
    )


def _aggregate(cases: list[CaseMetrics]) -> dict[str, dict[str, float]]:
    if not cases:
        return {}
    table = {
        "dice": [c.dice for c in cases],
        "volume_ratio": [c.volume_ratio for c in cases],
        "dice_sample_std": [c.dice_samples.std for c in cases],
        "volume_ratio_sample_std": [c.volume_ratio_samples.std for c in cases],
    }
    if all(c.dice2d is not None for c in cases):
        table["dice2d"] = [c.dice2d for c in cases]
    out = {}
    for name, values in table.items():
        s = summarize(values)
        out[name] = {"mean": s.mean, "std": s.std}
    return out


def _write_previews(
    root: Path, index: int, mean_prob: np.ndarray, gt: np.ndarray, manager: Optional[OutputManager]
) -> None:
    mid = mean_prob.shape[0] // 2
    images = {
        f"case_{index:04d}_mid.pgm": mean_prob[mid],
        f"case_{index:04d}_proj.pgm": depth_mean_projection(mean_prob),
        f"case_{index:04d}_gt_proj.pgm": depth_mean_projection(gt.astype(np.float64)),
    }
    for name, values in images.items():
        path = write_pgm16(root / name, values, lo=0.0, hi=1.0)
        if manager is not None:
            manager.register_file(path, OutputType.INTERIM, "pgm", {"case": index})


def validate_report(report: MetricsReport) -> list[dict[str, Any]]:
    """
    Sanity checks over a report.

    Returns:
        One ``{"check", "status", "message"}`` dict per check, status
        PASSED, WARNING or FAILED.
    """
    checks = []
    if not report.cases:
        checks.append({"check": "cases", "status": "WARNING", "message": "Report holds no cases"})
        return checks
    checks.append({"check": "cases", "status": "PASSED", "message": f"{len(report.cases)} cases"})

    bad_bounds = []
    bad_dice = []
    bad_ratio = []
    for case in report.cases:
        summaries = {"dice": case.dice_samples, "volume_ratio": case.volume_ratio_samples}
        if case.dice2d_samples is not None:
            summaries["dice2d"] = case.dice2d_samples
        for name, s in summaries.items():
            if not (s.lower <= s.mean <= s.upper):
                bad_bounds.append(f"{case.index}:{name}")
        dice_values = [case.dice] + ([case.dice2d] if case.dice2d is not None else [])
        if any(not (0.0 <= d <= 1.0) for d in dice_values):
            bad_dice.append(case.index)
        if case.volume_ratio < 0 or case.volume_ratio_samples.mean < 0:
            bad_ratio.append(case.index)

    for name, failures, ok in [
        ("bounds_ordered", bad_bounds, "lower <= mean <= upper for every metric"),
        ("dice_range", bad_dice, "Dice within [0, 1]"),
        ("ratio_nonnegative", bad_ratio, "Volume ratios >= 0"),
    ]:
        if failures:
            checks.append({"check": name, "status": "FAILED", "message": f"Violations: {failures}"})
        else:
            checks.append({"check": name, "status": "PASSED", "message": ok})

    stds = [c.dice_samples.std for c in report.cases]
    if report.architecture != "unet-det" and all(s == 0 for s in stds):
        checks.append(
            {"check": "sample_spread", "status": "WARNING", "message": "Stochastic model produced zero Dice spread"}
        )
    return checks
