from pydantic import BaseModel, Field, ConfigDict, field_validator, model_validator
from typing import Optional, List, Tuple, Dict, Any

from models import ScheduleKind, EmaScheduleKind, TrainMode, OptimizerKind


# Base schemas
class BaseSchema(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# Model schemas
class ModelConfig(BaseSchema):
    n_layers: int = Field(default=4, ge=1)
    d_model: int = Field(default=64, gt=0)
    n_heads: int = Field(default=4, gt=0)
    vocab_size: int = Field(default=32, ge=2)
    visual_logit_dim: int = Field(default=128, gt=0)
    # 4 * d_model
    vision_head_hidden: int = Field(default=256, gt=0)
    patch_size: int = Field(default=4, gt=0)
    grid: Tuple[int, int] = (8, 8)
    channels: int = Field(default=3, gt=0)
    # at head_dim 16 a base of 100 keeps grid offsets 1..7 apart on some rotary pair
    rope_base: float = Field(default=100.0, gt=0)
    init_std: float = Field(default=0.02, gt=0)

    @field_validator("grid")
    @classmethod
    def validate_grid(cls, v):
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError(f"grid extents must be positive, got {v}")
        # cosine, CKA and CKNNA profiles compare pairs of vision tokens
        if v[0] * v[1] < 2:
            raise ValueError(f"grid {v} must hold at least two vision tokens")
        return v

    @model_validator(mode="after")
    def validate_heads(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 4:
            raise ValueError(f"head dim {self.d_model // self.n_heads} must be divisible by 4 for 2D rotary")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_vision_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.grid[0] * self.patch_size, self.grid[1] * self.patch_size, self.channels)


# Schedule schemas
class MaskSchedule(BaseSchema):
    kind: ScheduleKind = ScheduleKind.cosine
    target_ratio: float = Field(default=0.05, ge=0.0, le=1.0)
    total_steps: int = Field(default=2000, gt=0)


class EmaConfig(BaseSchema):
    decay: float = Field(default=0.95, ge=0.0, le=1.0)
    schedule: EmaScheduleKind = EmaScheduleKind.cosine_to_one
    update_every: int = Field(default=100, ge=1)
    total_steps: int = Field(default=2000, gt=0)


# Objective schemas
class LossWeights(BaseSchema):
    w_mim: float = Field(default=1.0, ge=0.0)
    w_ga: float = Field(default=1.0, ge=0.0)
    w_cga: float = Field(default=1.0, ge=0.0)


class Temperatures(BaseSchema):
    tau_teacher: float = Field(default=0.04, gt=0.0)
    tau_student: float = Field(default=0.1, gt=0.0)


class OptimizerConfig(BaseSchema):
    kind: OptimizerKind = OptimizerKind.adam
    lr: float = Field(default=1e-3, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.0, ge=0.0)
    warmup_ratio: float = Field(default=0.05, ge=0.0, le=1.0)
    # cosine decay ends at lr * min_lr_ratio
    min_lr_ratio: float = Field(default=0.1, ge=0.0, le=1.0)
    # global gradient-norm clip; 0 disables
    grad_clip: float = Field(default=1.0, ge=0.0)

    @field_validator("betas")
    @classmethod
    def validate_betas(cls, v):
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v


class DataConfig(BaseSchema):
    colors: int = Field(default=8, ge=2)
    noise_std: float = Field(default=0.05, ge=0.0)
    probe_count: int = Field(default=64, gt=0)
    probe_seed: int = 10_000
    images_per_pack: int = Field(default=2, ge=1)
    # packed visual sequence length; 2 * 64 vision tokens + 8 pads by default
    pad_to: int = Field(default=136, gt=0)


# Training schemas
class TrainConfig(BaseSchema):
    model: ModelConfig = ModelConfig()
    mask: MaskSchedule = MaskSchedule()
    ema: EmaConfig = EmaConfig()
    weights: LossWeights = LossWeights()
    temps: Temperatures = Temperatures()
    optimizer: OptimizerConfig = OptimizerConfig()
    data: DataConfig = DataConfig()
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=32, gt=0)
    seed: int = Field(default=0, ge=0)
    mode: TrainMode = TrainMode.laver
    log_every: int = Field(default=50, gt=0)
    diag_every: int = Field(default=500, gt=0)
    mixed_attention: bool = True
    rope_2d: bool = True
    cknna_k: int = Field(default=10, ge=1)

    @model_validator(mode="before")
    @classmethod
    def span_schedules_over_run(cls, data: Any):
        # Mask and EMA schedules span the whole run unless set explicitly.
        if isinstance(data, dict):
            steps = max(int(data.get("steps", 2000)), 1)
            for section in ("mask", "ema"):
                value = data.get(section)
                if value is None:
                    data[section] = {"total_steps": steps}
                elif isinstance(value, dict) and "total_steps" not in value:
                    data[section] = {**value, "total_steps": steps}
        return data

    @model_validator(mode="after")
    def validate_packing(self):
        needed = self.data.images_per_pack * self.model.n_vision_tokens
        if needed > self.data.pad_to:
            raise ValueError(f"pad_to {self.data.pad_to} cannot hold {needed} packed vision tokens")
        if self.batch_size % self.data.images_per_pack:
            raise ValueError(
                f"batch_size {self.batch_size} must be a multiple of images_per_pack {self.data.images_per_pack}"
            )
        return self

    @property
    def active_losses(self) -> Tuple[str, ...]:
        return {
            TrainMode.baseline: ("lm",),
            TrainMode.mim_only: ("lm", "mim"),
            TrainMode.mim_ga: ("lm", "mim", "ga"),
            TrainMode.laver: ("lm", "mim", "cga"),
        }[self.mode]


# Metric schemas
class MetricRecord(BaseSchema):
    step: int
    lm: float
    mim: float
    ga: float
    cga: float
    total: float
    mask_ratio: float
    ema_decay: float
    lr: float
    cosine_profile: Optional[List[float]] = None
    attention_allocation: Optional[List[float]] = None
    accuracy: Optional[float] = None
    # None in deterministic mode so metric streams stay byte-identical
    wall_clock: Optional[float] = None


class DiagnosticReport(BaseSchema):
    checkpoint: Optional[str] = None
    probe_seed: Optional[int] = None
    probe_count: int
    homogenization: List[float]
    attention_allocation: List[float]
    cka_profile: List[float]
    cknna_profile: List[float]
    cknna_k: int
    accuracy: Optional[float] = None
    images: List[str] = []


class GradCheckEntry(BaseSchema):
    loss: str
    seed: int
    max_rel_error: float
    passed: bool
    excluded_entries: int = 0


class GradCheckReport(BaseSchema):
    tolerance: float
    entries: List[GradCheckEntry]
    passed: bool


class CompareRow(BaseSchema):
    metric: str
    final_a: float
    final_b: float
    final_delta: float
    mean_abs_delta: float


class CompareReport(BaseSchema):
    steps: List[int]
    rows: List[CompareRow]
    deltas: Dict[str, List[float]]
