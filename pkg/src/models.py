"""Configuration documents, reports and API bodies."""

import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator

Setting = Literal["A", "B", "C", "D", "E", "F", "H"]
LayerKind = Literal["ANN", "SNN"]
Rate = Tuple[int, int]


# Input documents
class SceneConfig(BaseModel):
    """Synthetic moving-shapes scene."""
    width: int = Field(64, ge=0)
    height: int = Field(64, ge=0)
    num_objects: int = Field(3, ge=0)
    classes: int = Field(3, ge=1, description="Class count including background (id 0)")
    velocity_px: float = Field(1.0, ge=0, description="Object speed in pixels per frame")
    noise_rate_hz: float = Field(0.0, ge=0, description="Noise events per pixel per second")
    frames: int = Field(50, ge=1)
    clip_frames: int = Field(25, ge=1, description="Frames per clip; objects respawn at each clip")
    frame_dt_us: int = Field(50_000, gt=0)
    seed: int = Field(0, ge=0)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "width": 64,
                "height": 64,
                "num_objects": 3,
                "classes": 3,
                "velocity_px": 1.0,
                "noise_rate_hz": 0.5,
                "frames": 500,
                "clip_frames": 25,
                "frame_dt_us": 50000,
                "seed": 7,
            }
        }
    )


class BinningPolicy(BaseModel):
    """Constant integration time (cit) or constant event density (ced) windowing."""
    mode: Literal["cit", "ced"]
    duration_ms: Optional[float] = Field(None, gt=0)
    count: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_mode_argument(self) -> "BinningPolicy":
        if self.mode == "cit" and self.duration_ms is None:
            raise ValueError("cit policy needs duration_ms")
        if self.mode == "ced" and self.count is None:
            raise ValueError("ced policy needs count")
        return self

    @classmethod
    def parse(cls, text: str) -> "BinningPolicy":
        """Parse the CLI form `cit:<ms>` or `ced:<count>`."""
        mode, _, value = text.partition(":")
        mode = mode.strip().lower()
        if mode == "cit":
            return cls(mode="cit", duration_ms=float(value))
        if mode == "ced":
            return cls(mode="ced", count=int(value))
        raise ValueError(f"unknown binning policy '{text}'")


class MixerRates(BaseModel):
    """Dilation rates (r_h, r_w) of the multi-scale mixer, left to right."""
    lead: Rate = (1, 6)
    parallel: List[Rate] = [(6, 21), (18, 15), (1, 1)]
    tail: Rate = (6, 3)


class NetworkSpec(BaseModel):
    """Declarative architecture description."""
    height: int = Field(192, gt=0)
    width: int = Field(192, gt=0)
    bins: int = Field(10, ge=1)
    stages: int = Field(4, ge=2)
    base_channels: int = Field(16, ge=1)
    classes: int = Field(6, ge=1)
    frame_channels: int = Field(1, ge=1)
    rates: MixerRates = MixerRates()
    mix_channels: Optional[int] = Field(None, ge=1, description="Defaults to the top stage width")
    low_channels: int = Field(48, ge=1)
    head_channels: Optional[int] = Field(None, ge=1, description="Defaults to mix_channels")

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "height": 192,
                "width": 192,
                "bins": 10,
                "stages": 4,
                "base_channels": 16,
                "classes": 6,
                "frame_channels": 1,
                "rates": {"lead": [1, 6], "parallel": [[6, 21], [18, 15], [1, 1]], "tail": [6, 3]},
                "low_channels": 48,
            }
        }
    )

    def stage_channels(self, stage: int) -> int:
        """Channels after 0-based encoder stage `stage`: C0 * 2^stage."""
        return self.base_channels * 2 ** stage

    def stage_size(self, stage: int) -> Tuple[int, int]:
        """Spatial size after 0-based stage `stage` (stride 2, padding 1)."""
        div = 2 ** (stage + 1)
        return math.ceil(self.height / div), math.ceil(self.width / div)

    @property
    def mixer_width(self) -> int:
        return self.mix_channels or self.stage_channels(self.stages - 1)

    @property
    def head_width(self) -> int:
        return self.head_channels or self.mixer_width


class TrainConfig(BaseModel):
    """Optimization setup."""
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(8e-4, gt=0)
    lr_decay: float = Field(0.7, gt=0, lt=1)
    lr_step_epochs: int = Field(10, ge=1)
    surrogate_gamma: float = Field(100.0, gt=0)
    bins: int = Field(10, ge=2)
    crop: Optional[int] = Field(192, ge=1, description="Square crop side; null disables cropping")
    flip_prob: float = Field(0.5, ge=0, le=1)
    class_weights: Optional[List[float]] = None
    ignore_id: int = 255
    grad_clip: float = Field(10.0, gt=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "epochs": 100,
                "batch_size": 32,
                "lr": 8e-4,
                "lr_decay": 0.7,
                "lr_step_epochs": 10,
                "surrogate_gamma": 100.0,
                "bins": 10,
                "crop": 192,
                "seed": 0,
            }
        }
    )


# Output documents
class LayerProfile(BaseModel):
    """Cost-model view of one convolution."""
    name: str
    kind: LayerKind
    M: int = Field(..., ge=0, description="Output neurons H_out*W_out*C_out")
    C: int = Field(..., ge=0, description="Synapses per neuron k_h*k_w*C_in")
    F: float = Field(1.0, ge=0, description="Mean input spike rate; 1 for ANN layers")

    @model_validator(mode="after")
    def _ann_rate_is_one(self) -> "LayerProfile":
        if self.kind == "ANN" and self.F != 1.0:
            raise ValueError(f"ANN layer '{self.name}' must have F = 1")
        return self


class LayerEnergy(BaseModel):
    """Per-layer breakdown line of an EnergyReport."""
    name: str
    kind: LayerKind
    M: int
    C: int
    F: float
    flops: int


class EnergyReport(BaseModel):
    """Aggregated inference cost; energy kept as an exact count of 0.1 pJ units."""
    flops_ann: int
    flops_snn: int
    energy_dpj: int = Field(..., description="Total energy in units of 0.1 pJ")
    timesteps: int = 1
    sample_set: str = "published FLOPs"
    layers: List[LayerEnergy] = []

    @computed_field
    @property
    def e_total_mj(self) -> float:
        return self.energy_dpj / 1e10


class MetricsReport(BaseModel):
    """Segmentation quality over a labeled set."""
    accuracy: float = Field(..., ge=0, le=1)
    per_class_iou: List[Optional[float]]
    miou: float = Field(..., ge=0, le=1)
    confusion: List[List[int]]


class EpochLog(BaseModel):
    """One row of the training log."""
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float
    val_miou: float


# API bodies
class EnergyEstimateRequest(BaseModel):
    """Either published FLOPs or a list of layer profiles."""
    flops_ann: Optional[float] = Field(None, ge=0)
    flops_snn: Optional[float] = Field(None, ge=0)
    layers: Optional[List[LayerProfile]] = None
    timesteps: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_source(self) -> "EnergyEstimateRequest":
        if self.layers is None and self.flops_ann is None and self.flops_snn is None:
            raise ValueError("provide flops_ann/flops_snn or layers")
        return self


class VoxelizeRequest(BaseModel):
    events_csv: str
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    bins: int = Field(10, ge=2)


class VoxelizeResponse(BaseModel):
    shape: List[int]
    events: int
    on_mass: float
    off_mass: float
    nonzero_density: float


class InferRequest(BaseModel):
    frame: List[List[int]] = Field(..., description="Grayscale rows, 0-255")
    events_csv: str


class InferResponse(BaseModel):
    classes: List[List[int]]
    histogram: List[int]
