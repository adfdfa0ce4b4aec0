"""Type definitions for architectures, channel configurations, reports and protocols."""

import hashlib
import math
from datetime import datetime
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = "1"

# Name of the virtual node that carries the network input.
IMAGE_NODE = "image"


class LayerKind(str, Enum):
    """Structural layer kinds an ArchSpec may contain."""
    CONV = "conv"
    DEPTHWISE = "depthwise"
    POOL = "pool"


class NormPlacement(str, Enum):
    """Where a layer's BatchNorm sits."""
    POST = "post"  # conv -> BN
    PRE = "pre"    # BN -> ReLU -> conv
    NONE = "none"


class Criterion(str, Enum):
    """Saliency criterion used to rank latent elements."""
    GRADIENT = "gradient"
    MAGNITUDE = "magnitude"


class ScheduleKind(str, Enum):
    STEP = "step"
    COSINE = "cosine"


class CostKind(str, Enum):
    CONV = "conv"
    DEPTHWISE = "depthwise"
    BN = "bn"
    RELU = "relu"
    POOL = "pool"
    LINEAR = "linear"


# ============================================================
# Architecture description
# ============================================================

class LayerSpec(BaseModel):
    """One node of the layer graph."""
    name: str
    kind: LayerKind = LayerKind.CONV
    inputs: List[str] = Field(default_factory=lambda: [IMAGE_NODE])
    kernel: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=1, ge=0)
    bias: bool = False
    norm: NormPlacement = NormPlacement.POST
    relu: bool = True
    residual: List[str] = Field(default_factory=list)
    stream: Optional[str] = None

    @property
    def has_channels(self) -> bool:
        """True for layers that own an entry of the channel configuration."""
        return self.kind != LayerKind.POOL


class HeadSpec(BaseModel):
    """Classifier head: optional BN+ReLU, global average pooling, linear layer."""
    inputs: List[str]
    num_classes: int = Field(ge=1)
    norm: NormPlacement = NormPlacement.NONE
    bias: bool = True


class ChannelConfig(BaseModel):
    """Per-layer output-channel counts, one entry per conv/depthwise layer."""
    values: List[int]

    @field_validator("values")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if any(v < 1 for v in values):
            raise ValueError(f"channel counts must be positive, got {values}")
        return values

    def __len__(self) -> int:
        return len(self.values)

    def as_tuple(self) -> Tuple[int, ...]:
        return tuple(self.values)


class ArchSpec(BaseModel):
    """Layer graph plus its default channel configuration."""
    name: str
    input_channels: int = Field(ge=1)
    input_hw: Tuple[int, int]
    layers: List[LayerSpec]
    head: HeadSpec
    default_config: ChannelConfig

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def channel_layers(self) -> List[LayerSpec]:
        """Conv and depthwise layers in configuration order."""
        return [spec for spec in self.layers if spec.has_channels]


# ============================================================
# Shrinking
# ============================================================

def floor_count(fraction: float, width: int) -> int:
    """Minimum surviving elements for a latent of the given width."""
    return max(1, math.ceil(fraction * width - 1e-9))


class Floors(BaseModel):
    """Minimum surviving fractions: rho for conv layers, tau for the classifier input."""
    rho: float = Field(default=0.4, gt=0.0, le=1.0)
    tau: float = Field(default=0.45, gt=0.0, le=1.0)


class Budget(BaseModel):
    """FLOP target; the search keeps the largest configuration with flops <= target."""
    target_flops: int = Field(ge=0)


class ChannelRow(BaseModel):
    """One row of the channel-percentage table."""
    layer_index: int
    name: str
    baseline_channels: int
    wide_channels: int
    kept_channels: int
    percent_of_baseline: float
    percent_of_wide: float


class ShrinkReport(BaseModel):
    """Everything one shrink run decided."""
    schema_version: str = SCHEMA_VERSION
    arch: str
    seed: int
    criterion: Criterion
    beta: float
    m: int
    rho: float
    tau: float
    input_hw: Tuple[int, int]
    baseline_config: List[int]
    wide_config: List[int]
    shrunk_config: List[int]
    channels: List[ChannelRow]
    threshold: float
    target_flops: int
    baseline_flops: int
    baseline_params: int
    wide_flops: int
    wide_params: int
    shrunk_flops: int
    shrunk_params: int
    flops_ratio: float
    params_ratio: float
    kept_indices: Dict[str, List[int]]
    untouched_latents: List[str]
    forward_passes: int
    backward_passes: int


class ShrinkParams(BaseModel):
    """Knobs of the widen-score-shrink stage."""
    beta: float = Field(default=2.0, ge=1.0)
    m: int = Field(default=8, ge=1)
    rho: float = Field(default=0.4, gt=0.0, le=1.0)
    tau: float = Field(default=0.45, gt=0.0, le=1.0)
    budget_fraction: Optional[float] = Field(default=0.95, gt=0.0, le=1.0)
    budget_flops: Optional[int] = Field(default=None, ge=0)
    criterion: Criterion = Criterion.GRADIENT
    score_bn_mode: Literal["eval", "train"] = "eval"

    @model_validator(mode="after")
    def _one_budget(self) -> "ShrinkParams":
        if self.budget_fraction is None and self.budget_flops is None:
            raise ValueError("either budget_fraction or budget_flops is required")
        return self

    @property
    def floors(self) -> Floors:
        return Floors(rho=self.rho, tau=self.tau)

    def budget(self, baseline_flops: int) -> Budget:
        """Absolute budgets win; fractions are relative to the baseline configuration."""
        if self.budget_flops is not None:
            return Budget(target_flops=self.budget_flops)
        return Budget(target_flops=int(math.floor(self.budget_fraction * baseline_flops)))


# ============================================================
# Complexity
# ============================================================

class LayerCost(BaseModel):
    """Exact cost of one primitive."""
    layer_id: str
    kind: CostKind
    flops: int
    params: int
    out_spatial: Tuple[int, int]
    in_channels: int
    out_channels: int


class CostReport(BaseModel):
    """Totals and per-layer costs of one configuration."""
    schema_version: str = SCHEMA_VERSION
    arch: str
    config: List[int]
    input_hw: Tuple[int, int]
    total_flops: int
    total_macs: int
    total_params: int
    layers: List[LayerCost]


class RatioReport(BaseModel):
    base_flops: int
    new_flops: int
    base_params: int
    new_params: int
    flops_ratio: float
    params_ratio: float


# ============================================================
# Data and training
# ============================================================

class Dataset(BaseModel):
    """Images N x C x H x W with integer labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None

    @model_validator(mode="after")
    def _consistent(self) -> "Dataset":
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    @property
    def hw(self) -> Tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])


class SynthSpec(BaseModel):
    """Gaussian-blob class clusters rendered as images."""
    num_classes: int = Field(default=10, ge=2)
    channels: int = Field(default=3, ge=1)
    hw: int = Field(default=16, ge=4)
    train_size: int = Field(default=2000, ge=1)
    test_size: int = Field(default=500, ge=1)
    separation: float = Field(default=5.0, gt=0.0)
    blobs_per_class: int = Field(default=3, ge=1)


class LRSchedule(BaseModel):
    kind: ScheduleKind = ScheduleKind.STEP
    milestones: List[float] = Field(default_factory=lambda: [0.5, 0.75])
    factor: float = 0.1


class Augmentation(BaseModel):
    horizontal_flip: bool = True
    pad_crop: bool = True
    pad: int = Field(default=4, ge=0)


class KDSettings(BaseModel):
    """Distillation from a pretrained widened baseline."""
    lam: float = Field(default=0.4, ge=0.0, le=1.0)
    temperature: float = Field(default=4.0, gt=0.0)
    teacher_checkpoint: Optional[str] = None


class TrainProtocol(BaseModel):
    """Training recipe shared by a baseline/LW-DNA pair."""
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=64, ge=1)
    base_lr: float = Field(default=0.1, gt=0.0)
    schedule: LRSchedule = Field(default_factory=LRSchedule)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    augmentation: Augmentation = Field(default_factory=Augmentation)
    kd: Optional[KDSettings] = None
    seed: int = 0
    eval_batch_size: int = Field(default=256, ge=1)

    def protocol_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


class EpochRow(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    wallclock: float


class TrainLog(BaseModel):
    schema_version: str = SCHEMA_VERSION
    arch: str
    config: List[int]
    protocol_hash: str
    rows: List[EpochRow] = Field(default_factory=list)
    final_test_err: float
    final_test_loss: float


class EvalResult(BaseModel):
    top1_err: float
    loss: float
    num_samples: int


class ComparisonSummary(BaseModel):
    """Paired baseline / LW-DNA outcome."""
    schema_version: str = SCHEMA_VERSION
    arch: str
    seed: int
    protocol_hash: str
    baseline_config: List[int]
    lwdna_config: List[int]
    baseline_top1_err: float
    lwdna_top1_err: float
    baseline_flops: int
    lwdna_flops: int
    baseline_params: int
    lwdna_params: int
    flops_ratio: float
    params_ratio: float
    teacher_checkpoint: Optional[str] = None
    # set when the KD run also trains the baseline without distillation
    plain_baseline_top1_err: Optional[float] = None
    plain_baseline_protocol_hash: Optional[str] = None


class StudyKind(str, Enum):
    RHO_TAU = "rho_tau"
    CRITERION = "criterion"


class StudyRow(BaseModel):
    """One shrink variant of a study, trained under the shared protocol."""
    label: str
    criterion: Criterion
    rho: float
    tau: float
    feasible: bool
    shrunk_config: Optional[List[int]] = None
    shrunk_flops: Optional[int] = None
    flops_ratio: Optional[float] = None
    params_ratio: Optional[float] = None
    top1_err: Optional[float] = None


class StudyReport(BaseModel):
    """Shrink variants compared against one baseline on one scoring batch."""
    schema_version: str = SCHEMA_VERSION
    kind: StudyKind
    arch: str
    seed: int
    beta: float
    protocol_hash: str
    baseline_config: List[int]
    baseline_top1_err: Optional[float] = None
    target_flops: int
    rows: List[StudyRow]


class RunConfig(BaseModel):
    """Everything one CLI command needs."""
    arch: str = "vgg-tiny"
    arch_path: Optional[str] = None
    config: Optional[List[int]] = None
    shrink: ShrinkParams = Field(default_factory=ShrinkParams)
    seed: int = 0
    dataset: Literal["synth", "idx"] = "synth"
    idx_dir: Optional[str] = None
    synth: SynthSpec = Field(default_factory=SynthSpec)
    protocol: TrainProtocol = Field(default_factory=TrainProtocol)
    output_dir: str = "./output"
    force: bool = False
    plain_baseline: bool = False


class RunResult(BaseModel):
    """Generic pipeline result."""
    success: bool
    data: Optional[dict] = None
    error: Optional[str] = None
    exit_code: int = 0
    timestamp: datetime = Field(default_factory=datetime.now)
