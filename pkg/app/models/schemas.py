"""
Pydantic Schemas - Configuration, report and API models
"""
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.presets import (
    CATEGORIES,
    DEFAULT_BATCH_SIZE,
    DEFAULT_LR,
    EXEMPLARS_PER_CATEGORY,
    HF_CATEGORY,
    IO_CATEGORY,
    MILESTONE_START,
    MILESTONE_STEP,
    NUM_EXEMPLARS,
    TRAINING_DEFAULTS,
    VARIANT_SIZES,
)

VariantName = Literal["slim", "fit", "wide", "custom"]
TaskId = Literal["6cat", "72ex", "hf-io", "hf", "io"]
Precision = Literal["32", "64"]


# ============================================
# Montage
# ============================================

class ElectrodeMontage(BaseModel):
    """Named sensor positions, normalised onto the unit sphere"""
    labels: List[str] = Field(..., min_length=3, description="Unique channel identifiers")
    positions: List[Tuple[float, float, float]] = Field(..., description="3-D unit vectors, one per label")
    center_label: str = Field(..., description="Projection center (topmost scalp electrode)")

    @field_validator("positions")
    @classmethod
    def normalise_positions(cls, positions: List[Tuple[float, float, float]]) -> List[Tuple[float, float, float]]:
        normalised = []
        for p in positions:
            norm = float(np.linalg.norm(p))
            if norm == 0.0 or not np.isfinite(norm):
                raise ValueError(f"electrode coordinate {p} has zero or non-finite norm")
            normalised.append(tuple(float(c) / norm for c in p))
        return normalised

    @model_validator(mode="after")
    def check_consistency(self) -> "ElectrodeMontage":
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("electrode labels must be unique")
        if len(self.positions) != len(self.labels):
            raise ValueError(f"{len(self.positions)} positions for {len(self.labels)} labels")
        if self.center_label not in self.labels:
            raise ValueError(f"center electrode {self.center_label!r} is not in the montage")
        return self

    @property
    def size(self) -> int:
        return len(self.labels)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.float64)

    def center(self) -> np.ndarray:
        return self.as_array()[self.labels.index(self.center_label)]


# ============================================
# Model Variants
# ============================================

class VariantConfig(BaseModel):
    """Head count, channel widths and geometry of one network variant"""
    model_config = ConfigDict(frozen=True)

    name: VariantName = Field("custom", description="slim | fit | wide | custom")
    heads: int = Field(..., ge=1, description="H: attention heads per CT module")
    projections: int = Field(..., ge=1, description="D: channels per head")
    local_features: int = Field(..., ge=2, description="C: LFE output channels")
    expansions: int = Field(..., ge=2, description="E: CFE expanded channels")
    final_channels: int = Field(..., ge=2, description="F: encoder output channels")
    num_classes: int = Field(72, ge=2, description="K: classifier outputs")
    time_frames: int = Field(32, ge=1, description="T: samples per trial")
    mesh_size: int = Field(32, ge=1, description="M1 = M2 after border crop")
    spatial_kernel: int = Field(8, ge=1, description="km = km'")
    spatial_stride: int = Field(4, ge=1, description="s")
    temporal_kernels: Tuple[int, ...] = Field((3, 5), description="kt values, channels split evenly")
    hidden_sizes: Tuple[int, ...] = Field((500, 100), description="Classifier hidden widths")
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    precision: Precision = Field("32", description="32-bit training, 64-bit gradient checks")

    @model_validator(mode="after")
    def check_sizes(self) -> "VariantConfig":
        H, D, C, E, F = self.heads, self.projections, self.local_features, self.expansions, self.final_channels
        if C != H * D:
            raise ValueError(f"local_features must equal heads * projections ({H}*{D}), got {C}")
        splits = len(self.temporal_kernels)
        for label, value in (("C", C), ("E", E), ("F", F)):
            if value % splits:
                raise ValueError(f"{label}={value} cannot be split over temporal kernels {self.temporal_kernels}")
        if self.name != "custom":
            if (C * H) % 2 or E != C * H // 2 or F != 64 * H:
                raise ValueError(f"{self.name}: sizes violate E = C*H/2, F = 64*H")
            if (H, D, C, E, F) != VARIANT_SIZES[self.name]:
                raise ValueError(f"{self.name}: sizes {(H, D, C, E, F)} differ from preset {VARIANT_SIZES[self.name]}")
        if self.spatial_kernel > self.mesh_size:
            raise ValueError("spatial kernel larger than mesh")
        return self

    @classmethod
    def preset(cls, name: str, num_classes: int = 72, **overrides: Any) -> "VariantConfig":
        if name not in VARIANT_SIZES:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANT_SIZES)}")
        H, D, C, E, F = VARIANT_SIZES[name]
        return cls(
            name=name, heads=H, projections=D, local_features=C, expansions=E, final_channels=F,
            num_classes=num_classes, **overrides,
        )

    @property
    def patch_side(self) -> int:
        return (self.mesh_size - self.spatial_kernel) // self.spatial_stride + 1

    @property
    def patches(self) -> int:
        return self.patch_side ** 2

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == "64" else np.float32)

    @property
    def classifier_inputs(self) -> int:
        return self.final_channels * self.time_frames


# ============================================
# Tasks
# ============================================

class TaskSpec(BaseModel):
    """Label field and class subset for one classification task"""
    model_config = ConfigDict(frozen=True)

    task_id: TaskId
    label_field: Literal["category", "exemplar"]
    categories: Optional[Tuple[int, ...]] = Field(None, description="Category subset kept, None keeps all")
    num_classes: int

    @classmethod
    def from_id(cls, task_id: str) -> "TaskSpec":
        specs = {
            "6cat": cls(task_id="6cat", label_field="category", num_classes=len(CATEGORIES)),
            "72ex": cls(task_id="72ex", label_field="exemplar", num_classes=NUM_EXEMPLARS),
            "hf-io": cls(task_id="hf-io", label_field="category", categories=(HF_CATEGORY, IO_CATEGORY), num_classes=2),
            "hf": cls(task_id="hf", label_field="exemplar", categories=(HF_CATEGORY,), num_classes=EXEMPLARS_PER_CATEGORY),
            "io": cls(task_id="io", label_field="exemplar", categories=(IO_CATEGORY,), num_classes=EXEMPLARS_PER_CATEGORY),
        }
        if task_id not in specs:
            raise ValueError(f"unknown task {task_id!r}; choose from {sorted(specs)}")
        return specs[task_id]


# ============================================
# Training
# ============================================

class TrainConfig(BaseModel):
    """Optimiser, schedule and cross-validation settings"""
    lr: float = Field(DEFAULT_LR, gt=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=2, description="BatchNorm needs at least 2")
    epochs: int = Field(..., ge=1)
    weight_decay: float = Field(0.0, ge=0)
    gamma: float = Field(1.0, gt=0, le=1)
    milestone_start: int = Field(MILESTONE_START, ge=1)
    milestone_step: int = Field(MILESTONE_STEP, ge=1)
    seed: int = 0
    task: TaskId = "6cat"
    folds: int = Field(10, ge=2)
    decoupled_weight_decay: bool = False
    shuffle_labels: bool = Field(False, description="Permutation-null control run")
    max_subjects: Optional[int] = Field(None, ge=1)
    max_folds: Optional[int] = Field(None, ge=1, description="Train only the first N folds")

    @classmethod
    def for_task(cls, task: str, variant: str, **overrides: Any) -> "TrainConfig":
        """Per-task defaults (epochs, weight decay, gamma); custom variants take slim's. None-valued overrides are ignored."""
        table = TRAINING_DEFAULTS.get(task)
        if table is None:
            raise ValueError(f"unknown task {task!r}")
        if variant in table:
            epochs, weight_decay, gamma = table[variant]
        elif variant == "custom":
            epochs, weight_decay, gamma = table["slim"]
        else:
            raise ValueError(f"unknown variant {variant!r}")
        values: Dict[str, Any] = {"task": task, "epochs": epochs, "weight_decay": weight_decay, "gamma": gamma}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class EpochRecord(BaseModel):
    """One JSON-lines run log entry"""
    subject: int
    fold: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


class FoldResult(BaseModel):
    """Held-out accuracy for one (subject, fold)"""
    task: str
    variant: str
    subject: int
    fold: int
    accuracy: float
    checkpoint: Optional[str] = None


class AccuracySummary(BaseModel):
    """Fold and subject level accuracy statistics"""
    task: str
    variant: str
    fold_mean: float
    fold_std: Optional[float] = Field(None, description="Sample SD across all folds")
    subject_means: Dict[int, float] = Field(default_factory=dict)
    subject_mean: float
    subject_std: Optional[float] = Field(None, description="Sample SD across subjects")


class EvaluationResult(BaseModel):
    accuracy: float
    confusion: List[List[float]] = Field(..., description="Row-normalised confusion matrix")
    class_counts: List[int]


# ============================================
# Diversity Analysis
# ============================================

class CkaPair(BaseModel):
    head_i: int = Field(..., ge=0)
    head_j: int = Field(..., ge=1)
    cka: float

    @model_validator(mode="after")
    def check_order(self) -> "CkaPair":
        if self.head_i >= self.head_j:
            raise ValueError("head pairs must satisfy head_i < head_j")
        return self


class CkaSampleSet(BaseModel):
    """Inter-head similarities of one CT module on one validation fold"""
    task: str = ""
    variant: str = ""
    subject_id: int = 0
    fold_id: int = 0
    ct_index: Literal[1, 2]
    heads: int = Field(..., ge=2)
    pairs: List[CkaPair]

    @model_validator(mode="after")
    def check_pair_count(self) -> "CkaSampleSet":
        expected = self.heads * (self.heads - 1) // 2
        if len(self.pairs) != expected:
            raise ValueError(f"expected {expected} head pairs for H={self.heads}, got {len(self.pairs)}")
        return self


class CkaSummary(BaseModel):
    task: str
    variant: str
    ct_index: int
    mean_cka: float
    samples: int


# ============================================
# Architecture Report
# ============================================

class ModuleSummary(BaseModel):
    name: str
    parameters: int
    output_shape: List[int]


class ArchitectureSummary(BaseModel):
    """Per-module parameter counts and output shapes"""
    variant: str
    num_classes: int
    modules: List[ModuleSummary]
    total_parameters: int
    reference_parameters: Optional[float] = None
    relative_difference: Optional[float] = None
    assumptions: List[str] = Field(default_factory=list)


# ============================================
# Datasets
# ============================================

class DatasetSummary(BaseModel):
    trials: int
    channels: int
    time_frames: int
    sample_rate: float
    subjects: Dict[int, int]
    categories: Dict[str, int]
    exemplars: Dict[int, int]


# ============================================
# CLI / API
# ============================================

class CliConfig(BaseModel):
    """Resolved command-line invocation"""
    model_config = ConfigDict(extra="forbid")

    subcommand: Literal["project", "synth", "train", "eval", "cka", "report", "summary", "arch"]
    seed: int
    out_dir: str
    precision: Precision = "32"
    options: Dict[str, Any] = Field(default_factory=dict)


class CkaRequest(BaseModel):
    """Two representation matrices sharing their row count"""
    a: List[List[float]] = Field(..., min_length=4)
    b: List[List[float]] = Field(..., min_length=4)


class CkaResponse(BaseModel):
    success: bool = True
    cka: float
    rows: int


class ScheduleResponse(BaseModel):
    task: str
    variant: str
    epochs: int
    gamma: float
    learning_rates: List[float]


class ErrorResponse(BaseModel):
    """Error response model"""
    success: bool = False
    error: str
    details: Optional[Any] = None
