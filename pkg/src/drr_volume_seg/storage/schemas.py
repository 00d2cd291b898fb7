"""
Pydantic schemas for the JSON artifacts.

Dataset manifests, training logs and metrics reports carry no timestamps so
reruns with identical flags produce identical bytes; wall-clock information
lives only in the run manifest.
"""

from datetime import datetime
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class JsonArtifact(BaseModel):
    """Shared JSON read/write helpers."""

    def to_json(self, filepath: Optional[str] = None, indent: int = 2) -> str:
        """Serialize; write to ``filepath`` when given."""
        json_str = self.model_dump_json(indent=indent)
        if filepath:
            with open(filepath, "w", encoding="utf-8") as f:
                f.write(json_str)
        return json_str

    @classmethod
    def from_json(cls, filepath: str):
        with open(filepath, "r", encoding="utf-8") as f:
            return cls.model_validate_json(f.read())


# ------------------------------------------------------------------ dataset


class DatasetItem(BaseModel):
    """One rendered phantom."""

    index: int = Field(..., ge=0, description="Position in the dataset")
    split: Literal["train", "test"] = Field(..., description="Split membership")
    seed: int = Field(..., description="Phantom seed")
    image_file: str = Field(..., description="Normalized network-input DRR (IMGF), relative path")
    mask_file: str = Field(..., description="Center-cropped target mask (VOLB), relative path")
    drr_min: float = Field(..., description="Raw DRR minimum before normalization")
    drr_max: float = Field(..., description="Raw DRR maximum before normalization")
    mask_fraction: float = Field(..., ge=0.0, le=1.0, description="Target voxels / crop voxels")


class DatasetManifest(JsonArtifact):
    """Everything needed to reload and reproduce a dataset."""

    spec: dict[str, Any] = Field(..., description="DatasetSpec echo")
    geometry: dict[str, Any] = Field(..., description="ProjectionGeometry used for rendering")
    image_dims: tuple[int, int] = Field(..., description="Network input (rows, cols)")
    target_dims: tuple[int, int, int] = Field(..., description="Mask crop (z, y, x)")
    view: Literal["ap", "lateral"] = Field("ap")
    items: list[DatasetItem] = Field(default_factory=list)
    statistics: dict[str, Any] = Field(default_factory=dict)

    def split(self, name: str) -> list[DatasetItem]:
        return [item for item in self.items if item.split == name]

    def update_statistics(self) -> None:
        train = self.split("train")
        test = self.split("test")
        fractions = [item.mask_fraction for item in self.items]
        self.statistics.update(
            {
                "n_train": len(train),
                "n_test": len(test),
                "mean_mask_fraction": sum(fractions) / len(fractions) if fractions else 0.0,
            }
        )


# ----------------------------------------------------------------- training


class StepRecord(BaseModel):
    step: int = Field(..., ge=1)
    epoch: int = Field(..., ge=1)
    terms: dict[str, float] = Field(default_factory=dict, description="Loss terms")


class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=1)
    val_dice: float = Field(..., ge=0.0, le=1.0)
    mean_loss: float
    best: bool = False


class TrainLog(JsonArtifact):
    """Per-step loss terms, per-epoch validation Dice and RNG provenance."""

    config: dict[str, Any] = Field(..., description="TrainConfig echo")
    model: dict[str, Any] = Field(..., description="ModelSpec echo")
    rng: dict[str, Any] = Field(default_factory=dict, description="Seed provenance")
    steps: list[StepRecord] = Field(default_factory=list)
    epochs: list[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_dice: Optional[float] = None
    stopped_early: bool = False
    checkpoint: Optional[str] = None

    @field_validator("steps")
    @classmethod
    def monotone_steps(cls, v):
        for previous, current in zip(v, v[1:]):
            if current.step <= previous.step:
                raise ValueError(f"Step counter not monotone: {previous.step} then {current.step}")
        return v

    def losses(self, term: str = "loss") -> list[float]:
        return [s.terms[term] for s in self.steps if term in s.terms]


# --------------------------------------------------------------- evaluation


class MetricSummary(BaseModel):
    """Across-sample statistics of one metric (population std)."""

    mean: float
    std: float = Field(..., ge=0.0)
    lower: float = Field(..., description="Smallest per-sample value")
    upper: float = Field(..., description="Largest per-sample value")


class CaseMetrics(BaseModel):
    index: int
    seed: int
    dice: float = Field(..., description="Dice of the mean-probability mask")
    volume_ratio: float = Field(..., description="Volume ratio of the mean-probability mask")
    dice_samples: MetricSummary
    volume_ratio_samples: MetricSummary
    dice2d: Optional[float] = None
    dice2d_samples: Optional[MetricSummary] = None


class MetricsReport(JsonArtifact):
    """Per-case metrics with Monte-Carlo bounds and aggregates."""

    architecture: str
    checkpoint: str
    split: str
    config: dict[str, Any] = Field(default_factory=dict, description="EvalConfig echo")
    cases: list[CaseMetrics] = Field(default_factory=list)
    aggregate: dict[str, dict[str, float]] = Field(default_factory=dict)
    notes: list[str] = Field(default_factory=list)


# --------------------------------------------------------------------- runs


class RunManifest(JsonArtifact):
    """One per artifact-producing command."""

    subcommand: str
    config: dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: list[str] = Field(default_factory=list)
    outputs: list[dict[str, Any]] = Field(default_factory=list)
    tool_version: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    wall_clock_s: Optional[float] = None
    statistics: dict[str, Any] = Field(default_factory=dict)
