"""Command-line interface for drr-volume-seg."""

import json
import logging
import os
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .. import __version__
from ..config import (
    DatasetSpec,
    DomainShiftSpec,
    EvalConfig,
    PhantomSpec,
    ProjectionGeometry,
    TrainConfig,
)
from ..core.rng import RngState
from ..errors import DrrSegError
from ..evaluation import evaluate, validate_report
from ..imaging import MaskVolume, downsample_image, generate_phantom, normalize_image, siddon_raytrace
from ..storage import OutputManager, OutputType, read_volb, write_imgf, write_pgm16, write_volb
from ..training import build_dataset, train, train_uda
from ..training.recipes import RecipeConfig, default_shift, run_exp1, run_exp2, run_exp3

console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger("drr_volume_seg")

MODEL_CHOICES = ["unet-det", "unet-dropout", "unet-dropblock", "phiseg", "phiseg-nofusion", "phiseg-uda"]


@dataclass
class CliState:
    seed: int
    workers: int
    json_mode: bool
    verbose: bool


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _build(model_cls: type[BaseModel], **kwargs) -> BaseModel:
    """Construct a config model; validation failures are usage errors (exit 2)."""
    try:
        return model_cls(**kwargs)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise click.UsageError(f"Invalid {model_cls.__name__}: {details}")


def _progress(state: CliState):
    def report(event: dict) -> None:
        if state.json_mode:
            click.echo(json.dumps(event, sort_keys=True))
        elif event["event"] == "epoch":
            marker = " [green]best[/green]" if event.get("best") else ""
            console.print(
                f"  epoch {event['epoch']:>3}  loss {event['mean_loss']:.4f}  val Dice {event['val_dice']:.4f}{marker}"
            )
        elif event["event"] == "case":
            console.print(f"  case {event['index']:>4}  Dice {event['dice']:.4f}")
        else:
            logger.debug("%s", event)

    return report


def _fail(e: Exception) -> None:
    err_console.print(f"[bold red]❌ Error:[/bold red] {e}")
    raise click.Abort()


def _emit_result(state: CliState, payload: dict) -> None:
    if state.json_mode:
        click.echo(json.dumps({"event": "result", **payload}, sort_keys=True))


@click.group()
@click.version_option(version=__version__)
@click.option("--seed", type=int, default=0, show_default=True, help="Root seed for every random stream")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Worker processes (default: all cores)")
@click.option("--json", "json_mode", is_flag=True, help="Machine-readable progress, one JSON object per line")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, seed, workers, json_mode, verbose):
    """
    drr-seg - 3D probabilistic segmentation from single DRRs.

    Generate phantoms, render DRRs, build datasets, train U-Net and PhiSeg
    models and evaluate them with Monte-Carlo uncertainty bounds.
    """
    _configure_logging(verbose)
    ctx.obj = CliState(seed=seed, workers=workers or os.cpu_count() or 1, json_mode=json_mode, verbose=verbose)


# ------------------------------------------------------------------ phantom


@cli.command()
@click.argument("kind", type=click.Choice(["thorax", "ribcage"]))
@click.option("--dims", type=int, default=32, show_default=True, help="Cubic volume extent in voxels")
@click.option("--count", type=click.IntRange(min=1), default=1, show_default=True, help="Number of phantoms")
@click.option("--out", "-o", default="./runs/phantoms", show_default=True, help="Output directory")
@click.pass_obj
def phantom(state: CliState, kind, dims, count, out):
    """
    Generate phantom volumes and their masks as VOLB files.

    Example:
        drr-seg --seed 3 phantom thorax --dims 32 --count 3 --out ./runs/phantoms
    """
    spec = _build(PhantomSpec, kind=kind, dims=(dims, dims, dims))
    try:
        manager = OutputManager(out, "phantom", spec.model_dump(mode="json"), state.seed)
        root = RngState(state.seed)
        for i in range(count):
            seed = root.child_seed(f"phantom{i}")
            volume, mask = generate_phantom(spec, seed)
            for name, vol in ((f"phantom_{i:03d}.volb", volume), (f"mask_{i:03d}.volb", mask)):
                path = write_volb(manager.path(name), vol)
                manager.register_file(path, OutputType.FINAL, "volb", {"seed": seed, "index": i})
            if not state.json_mode:
                console.print(f"🧪 {kind} #{i}: seed {seed}, mask fraction {mask.values.mean():.3f}")
        manifest = manager.finalize()
        _emit_result(state, {"files": len(manager.list_files()), "manifest": str(manifest)})
        if not state.json_mode:
            _display_output_summary(manager)
    except DrrSegError as e:
        _fail(e)


# ------------------------------------------------------------------- render


@cli.command()
@click.option("--vol", required=True, type=click.Path(exists=True, dir_okay=False), help="Input VOLB volume")
@click.option("--mode", type=click.Choice(["cone", "parallel"]), default="cone", show_default=True)
@click.option("--preset", type=click.Choice(["thorax", "abdomen"]), default="thorax", show_default=True)
@click.option("--dist-mm", type=float, default=None, help="Source to isocenter distance (default from preset)")
@click.option("--detector-dist-mm", type=float, default=150.0, show_default=True)
@click.option("--pixel-mm", type=float, default=0.51, show_default=True, help="Detector pixel pitch")
@click.option("--detector", type=int, default=128, show_default=True, help="Detector side in pixels")
@click.option("--down", type=int, default=None, help="Downsample to N x N and normalize")
@click.option("--view", type=click.Choice(["ap", "lateral"]), default="ap", show_default=True)
@click.option("--out", "-o", required=True, help="Output IMGF path")
@click.pass_obj
def render(state: CliState, vol, mode, preset, dist_mm, detector_dist_mm, pixel_mm, detector, down, view, out):
    """
    Render a DRR from a VOLB volume, with a 16-bit PGM preview.

    Example:
        drr-seg render --vol runs/phantoms/phantom_000.volb --down 32 --out runs/drr/p0.imgf
    """
    overrides = dict(
        mode=mode,
        detector_distance_mm=detector_dist_mm,
        detector_shape=(detector, detector),
        pixel_spacing_mm=pixel_mm,
        view=view,
    )
    if dist_mm is not None:
        overrides["source_distance_mm"] = dist_mm
    try:
        geom = getattr(ProjectionGeometry, preset)(**overrides)
    except ValidationError as e:
        raise click.UsageError(f"Invalid geometry: {e}")
    try:
        volume = read_volb(vol)
        if isinstance(volume, MaskVolume):
            raise DrrSegError(f"{vol} holds a mask, not an HU volume")
        out_path = Path(out)
        manager = OutputManager(str(out_path.parent), "render", geom.model_dump(mode="json"), state.seed)
        manager.register_input(vol)
        image = siddon_raytrace(volume, geom)
        if down is not None:
            image = normalize_image(downsample_image(image, (down, down)))
        write_imgf(out_path, image)
        manager.register_file(out_path, OutputType.FINAL, "imgf", {"dims": list(image.values.shape)})
        preview = write_pgm16(out_path.with_suffix(".pgm"), image.values)
        manager.register_file(preview, OutputType.INTERIM, "pgm")
        manager.finalize()
        lo, hi = float(image.values.min()), float(image.values.max())
        _emit_result(state, {"image": str(out_path), "min": lo, "max": hi})
        if not state.json_mode:
            console.print(
                f"🩻 Rendered {image.values.shape} ({geom.mode}, {geom.source_distance_mm:g} mm): "
                f"[cyan]{out_path}[/cyan]"
            )
    except DrrSegError as e:
        _fail(e)


# ------------------------------------------------------------------ dataset


@cli.command()
@click.option("--kind", type=click.Choice(["thorax", "ribcage"]), default="thorax", show_default=True)
@click.option("--dims", type=int, default=32, show_default=True, help="Cubic phantom extent")
@click.option("--target", type=int, default=None, help="Cubic crop extent (default: --dims)")
@click.option("--n-train", type=int, default=50, show_default=True)
@click.option("--n-test", type=int, default=10, show_default=True)
@click.option("--detector", type=int, default=128, show_default=True, help="Detector side in pixels")
@click.option("--gain", type=float, default=1.0, show_default=True, help="Domain shift: HU gain")
@click.option("--offset", type=float, default=0.0, show_default=True, help="Domain shift: HU offset")
@click.option("--noise", type=float, default=0.0, show_default=True, help="Domain shift: noise sigma in HU")
@click.option("--occluder/--no-occluder", default=False, help="Domain shift: add the default occluder slab")
@click.option("--cache-dir", default=None, help="Projection matrix cache directory")
@click.option("--out", "-o", default="./runs/dataset", show_default=True, help="Output directory")
@click.pass_obj
def dataset(
    state: CliState, kind, dims, target, n_train, n_test, detector, gain, offset, noise, occluder, cache_dir, out
):
    """
    Render a (DRR, 3D mask) dataset.

    Example:
        drr-seg --workers 4 dataset --kind thorax --n-train 50 --n-test 10 --out ./runs/lungs
    """
    shift = None
    if gain != 1.0 or offset != 0.0 or noise > 0 or occluder:
        shift = _build(
            DomainShiftSpec,
            gain=gain,
            offset=offset,
            noise_sigma=noise,
            occluder=default_shift(dims).occluder if occluder else None,
        )
    target = target or dims
    spec = _build(
        DatasetSpec,
        phantom=_build(PhantomSpec, kind=kind, dims=(dims, dims, dims)),
        n_train=n_train,
        n_test=n_test,
        target_dims=(target, target, target),
        detector_pixels=detector,
        seed=state.seed,
        shift=shift,
    )
    try:
        manager = OutputManager(out, "dataset", spec.model_dump(mode="json"), state.seed)
        status = console.status("[bold green]Rendering dataset...") if not state.json_mode else nullcontext()
        with status:
            manifest = build_dataset(spec, out, workers=state.workers, cache_dir=cache_dir, progress=_progress(state))
        for item in manifest.items:
            manager.register_file(Path(out) / item.image_file, OutputType.FINAL, "imgf", {"index": item.index})
            manager.register_file(Path(out) / item.mask_file, OutputType.FINAL, "volb", {"index": item.index})
        manager.register_file(Path(out) / "dataset.json", OutputType.FINAL, "json", {"kind": "dataset_manifest"})
        manager.finalize(manifest.statistics)
        _emit_result(state, {"dataset": out, **manifest.statistics})
        if not state.json_mode:
            _display_dataset(manifest)
    except DrrSegError as e:
        _fail(e)


# -------------------------------------------------------------------- train


def _train_options(func):
    options = [
        click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, file_okay=False)),
        click.option("--out", "-o", "output_dir", default="./runs/train", show_default=True),
        click.option("--epochs", type=int, default=40, show_default=True),
        click.option("--batch-size", type=int, default=4, show_default=True),
        click.option("--lr", type=float, default=1e-4, show_default=True),
        click.option("--beta", type=float, default=1.0, show_default=True, help="KL weight (PhiSeg)"),
        click.option("--patience", type=int, default=10, show_default=True, help="Early-stop patience in epochs"),
        click.option("--n-train", type=int, default=None, help="Use only the first N training items"),
        click.option("--max-steps", type=int, default=None, help="Stop after N optimiser steps"),
        click.option("--base-channels", type=int, default=8, show_default=True),
        click.option("--lift-mode", type=click.Choice(["scaled", "tile"]), default="scaled", show_default=True),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run_training(state: CliState, subcommand: str, config: TrainConfig, runner) -> None:
    try:
        manager = OutputManager(config.output_dir, subcommand, config.model_dump(mode="json"), config.seed)
        manager.register_input(config.dataset_dir)
        if config.target_dataset_dir:
            manager.register_input(config.target_dataset_dir)
        if not state.json_mode:
            console.print(f"\n[bold blue]🏋 Training {config.model}[/bold blue]")
        result = runner(config, progress=_progress(state), manager=manager)
        manager.finalize({"best_epoch": result.log.best_epoch, "best_dice": result.log.best_dice})
        _emit_result(
            state,
            {
                "checkpoint": str(result.checkpoint),
                "best_epoch": result.log.best_epoch,
                "best_dice": result.log.best_dice,
            },
        )
        if not state.json_mode:
            console.print(
                f"✅ Best epoch {result.log.best_epoch} (val Dice {result.log.best_dice:.4f}): "
                f"[cyan]{result.checkpoint}[/cyan]"
            )
    except DrrSegError as e:
        _fail(e)


@cli.command("train")
@click.option("--model", type=click.Choice(MODEL_CHOICES), default="unet-dropout", show_default=True)
@click.option("--no-fusion", is_flag=True, help="PhiSeg without the fusion module")
@click.option("--dropout-p", type=float, default=0.6, show_default=True)
@_train_options
@click.pass_obj
def train_cmd(state: CliState, model, no_fusion, dropout_p, patience, **kwargs):
    """
    Train a segmentation model on a dataset.

    Example:
        drr-seg train --model phiseg --no-fusion --dataset ./runs/lungs --out ./runs/phiseg-nofusion
    """
    if no_fusion:
        if model != "phiseg":
            raise click.UsageError("--no-fusion applies to --model phiseg only")
        model = "phiseg-nofusion"
    if model == "phiseg-uda":
        raise click.UsageError("Use the 'uda' command for phiseg-uda")
    config = _build(
        TrainConfig, model=model, seed=state.seed, dropout_p=dropout_p, early_stop_patience=patience, **kwargs
    )
    _run_training(state, "train", config, train)


@cli.command("uda")
@click.option("--target-dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--recon-weight", type=float, default=1.0, show_default=True)
@click.option("--no-target-stream", is_flag=True, help="Skip target minibatches (plain PhiSeg updates)")
@_train_options
@click.pass_obj
def uda_cmd(state: CliState, target_dataset, recon_weight, no_target_stream, patience, **kwargs):
    """
    Train PhiSeg with the auxiliary reconstruction task on unlabelled target images.

    Example:
        drr-seg uda --dataset ./runs/source --target-dataset ./runs/shifted --out ./runs/uda
    """
    config = _build(
        TrainConfig,
        model="phiseg-uda",
        seed=state.seed,
        target_dataset_dir=target_dataset,
        recon_weight=recon_weight,
        use_target_stream=not no_target_stream,
        early_stop_patience=patience,
        **kwargs,
    )
    _run_training(state, "uda", config, train_uda)


# --------------------------------------------------------------------- eval


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mc", "mc_samples", type=int, default=20, show_default=True, help="Monte-Carlo samples per case")
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--median", "median_mode", type=click.Choice(["2d", "3d", "none"]), default="2d", show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--architecture", type=click.Choice(MODEL_CHOICES), default=None, help="Evaluate as a family member")
@click.option("--projected/--no-projected", default=True, help="Also compute projected 2D Dice")
@click.option("--previews", is_flag=True, help="Write PGM previews per case")
@click.option("--out", "-o", default="./runs/eval", show_default=True, help="Output directory")
@click.pass_obj
def eval_cmd(state: CliState, checkpoint, dataset_dir, architecture, previews, out, **kwargs):
    """
    Evaluate a checkpoint with Monte-Carlo uncertainty bounds.

    Example:
        drr-seg eval runs/phiseg/model.ckpt --dataset ./runs/lungs --mc 20 --out ./runs/eval-phiseg
    """
    config = _build(EvalConfig, seed=state.seed, **kwargs)
    try:
        manager = OutputManager(out, "eval", config.model_dump(mode="json"), state.seed)
        manager.register_input(checkpoint)
        manager.register_input(dataset_dir)
        report = evaluate(
            checkpoint,
            dataset_dir,
            config,
            architecture=architecture,
            previews_dir=str(Path(out) / "previews") if previews else None,
            progress=_progress(state),
            manager=manager,
        )
        report_path = manager.path("metrics.json")
        report.to_json(str(report_path))
        manager.register_file(report_path, OutputType.FINAL, "json", {"kind": "metrics_report"})
        checks = validate_report(report)
        manager.finalize({"cases": len(report.cases)})
        _emit_result(state, {"report": str(report_path), "aggregate": report.aggregate, "checks": checks})
        if not state.json_mode:
            _display_report(report, checks)
    except DrrSegError as e:
        _fail(e)


# --------------------------------------------------------------- experiment


@cli.command()
@click.argument("name", type=click.Choice(["exp1", "exp2", "exp3"]))
@click.option("--dims", type=int, default=32, show_default=True)
@click.option("--n-train", type=int, default=50, show_default=True)
@click.option("--n-test", type=int, default=10, show_default=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--mc", "mc_samples", type=int, default=20, show_default=True)
@click.option("--models", default=None, help="Comma-separated subset of models")
@click.option("--out", "-o", "out_dir", default="./runs/experiment", show_default=True)
@click.pass_obj
def experiment(state: CliState, name, models, **kwargs):
    """
    Run a full experiment recipe and write a summary table.

    Example:
        drr-seg --workers 4 experiment exp1 --epochs 40 --out ./runs/experiments
    """
    selected = [m.strip() for m in models.split(",")] if models else None
    if selected and any(m not in MODEL_CHOICES for m in selected):
        raise click.UsageError(f"Unknown model in --models; choose from {', '.join(MODEL_CHOICES)}")
    recipe = _build(RecipeConfig, seed=state.seed, workers=state.workers, models=selected, **kwargs)
    runner = {"exp1": run_exp1, "exp2": run_exp2, "exp3": run_exp3}[name]
    try:
        run_dir = Path(recipe.out_dir) / name
        manager = OutputManager(str(run_dir), "experiment", recipe.model_dump(mode="json"), state.seed)
        summary = runner(recipe, progress=_progress(state))
        manager.register_file(run_dir / "summary.json", OutputType.FINAL, "json", {"kind": "summary"})
        manager.finalize()
        _emit_result(state, summary)
        if not state.json_mode:
            _display_summary(summary)
    except DrrSegError as e:
        _fail(e)


# ------------------------------------------------------------------ display


def _display_output_summary(manager: OutputManager):
    """Display output file summary."""
    stats = manager.get_statistics()
    table = Table(title="📁 Output Summary")
    table.add_column("Type", style="cyan")
    table.add_column("Count", style="green")
    table.add_column("Size", style="yellow")
    table.add_row("Final Outputs", str(stats["total_final"]), f"{stats['final_size_mb']} MB")
    table.add_row("Interim Files", str(stats["total_interim"]), f"{stats['interim_size_mb']} MB")
    console.print(table)


def _display_dataset(manifest):
    stats = manifest.statistics
    table = Table(title="📊 Dataset")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Training items", str(stats["n_train"]))
    table.add_row("Test items", str(stats["n_test"]))
    table.add_row("Image dims", "×".join(map(str, manifest.image_dims)))
    table.add_row("Target dims", "×".join(map(str, manifest.target_dims)))
    table.add_row("Mean mask fraction", f"{stats['mean_mask_fraction']:.4f}")
    console.print(table)


def _display_report(report, checks):
    table = Table(title=f"📊 {report.architecture} on {report.split}")
    table.add_column("Case", style="cyan")
    table.add_column("Dice", style="green")
    table.add_column("Dice ± std (MC)", style="green")
    table.add_column("Dice min-max (MC)", style="green")
    table.add_column("Volume ratio", style="yellow")
    table.add_column("2D Dice", style="magenta")
    for case in report.cases:
        table.add_row(
            str(case.index),
            f"{case.dice:.4f}",
            f"{case.dice_samples.mean:.4f} ± {case.dice_samples.std:.4f}",
            f"{case.dice_samples.lower:.4f}-{case.dice_samples.upper:.4f}",
            f"{case.volume_ratio:.3f}",
            f"{case.dice2d:.4f}" if case.dice2d is not None else "-",
        )
    console.print(table)
    for name, agg in report.aggregate.items():
        console.print(f"  {name}: {agg['mean']:.4f} ± {agg['std']:.4f}")
    for check in checks:
        style = {"PASSED": "green", "WARNING": "yellow", "FAILED": "red"}[check["status"]]
        console.print(f"  [{style}]{check['status']}[/{style}] {check['check']}: {check['message']}")
    for note in report.notes:
        console.print(f"  [dim]{note}[/dim]")


def _display_summary(summary: dict):
    table = Table(title=f"📊 {summary['experiment']}")
    table.add_column("Model", style="cyan")
    table.add_column("Dice", style="green")
    table.add_column("Volume ratio", style="yellow")
    table.add_column("MC Dice std", style="green")
    table.add_column("2D Dice", style="magenta")
    for model, row in summary["models"].items():
        table.add_row(
            model,
            f"{row['dice']:.4f} ± {row['dice_std']:.4f}",
            f"{row['volume_ratio']:.3f} ± {row['volume_ratio_std']:.3f}",
            f"{row['dice_sample_std']:.4f}",
            f"{row['dice2d']:.4f}" if "dice2d" in row else "-",
        )
    console.print(table)
