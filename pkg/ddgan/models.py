"""Data models for ddgan."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Parametrization = Literal["x0", "direct", "noise"]
Conditioning = Literal["concat", "adanorm"]
TrainMode = Literal["ddgan", "augmentation"]
DatasetName = Literal["25gaussians", "bimodal"]


class TrainConfig(BaseModel):
    """Every knob of one training experiment; toy defaults follow the 25-Gaussians protocol."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # diffusion
    T: int = Field(4, ge=1)
    beta_min: float = Field(0.1, gt=0)
    beta_max: float = Field(20.0, gt=0)
    # optimization
    batch_size: int = Field(512, ge=1)
    iterations: int = Field(50_000, ge=1)
    lr_g: float = Field(1e-4, gt=0)
    lr_d: float = Field(1e-4, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.9, ge=0, lt=1)
    cosine_decay: bool = True
    r1_gamma: float = Field(0.02, ge=0)
    ema_decay: float = Field(0.999, ge=0, lt=1)
    use_ema: bool = True
    # networks
    latent_dim: int = Field(16, ge=1)
    latent_embed_dim: int = Field(128, ge=1)
    mapping_layers: int = Field(3, ge=0)
    hidden_dim: int = Field(512, ge=1)
    hidden_layers: int = Field(3, ge=1)
    time_embed_dim: int = Field(32, ge=2)
    norm_groups: int = Field(32, ge=1)
    parametrization: Parametrization = "x0"
    conditioning: Conditioning = "concat"
    use_latent: bool = True
    minibatch_std: bool = False
    mode: TrainMode = "ddgan"
    # data
    dataset: DatasetName = "25gaussians"
    dataset_std: float = Field(0.05, gt=0)
    # bookkeeping
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    dtype: Literal["float64", "float32"] = "float64"
    seed: int = Field(0, ge=0)

    @field_validator("time_embed_dim")
    @classmethod
    def _even_embedding(cls, value: int) -> int:
        if value % 2:
            raise ValueError("time_embed_dim must be even")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "TrainConfig":
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must be >= beta_min")
        if self.conditioning == "adanorm" and self.hidden_dim % self.norm_groups:
            raise ValueError("hidden_dim must be divisible by norm_groups for adaptive normalization")
        return self


class MetricsRecord(BaseModel):
    iteration: int
    d_loss: float
    g_loss: float
    r1: float
    d_loss_per_t: Dict[int, float] = Field(default_factory=dict)
    lr: float = 0.0
    wall_clock: float = 0.0

    def csv_row(self, T: int) -> Dict[str, Any]:
        """Flat row without wall-clock, so identical runs give identical CSVs."""
        row: Dict[str, Any] = {
            "iteration": self.iteration,
            "d_loss": self.d_loss,
            "g_loss": self.g_loss,
            "r1": self.r1,
            "lr": self.lr,
        }
        for t in range(1, T + 1):
            row[f"d_loss_t{t}"] = self.d_loss_per_t.get(t)
        return row


class ModeReport(BaseModel):
    modes_covered: int = Field(ge=0)
    total_modes: int = Field(ge=1)
    high_quality_fraction: float = Field(ge=0, le=1)
    mode_kl: float = Field(ge=0)
    n_samples: int = Field(ge=1)

    @model_validator(mode="after")
    def _covered_bound(self) -> "ModeReport":
        if self.modes_covered > self.total_modes:
            raise ValueError("modes_covered cannot exceed total_modes")
        return self


class SampleRequest(BaseModel):
    checkpoint: Path
    n: int = Field(1000, ge=1)
    use_ema: bool = True
    seed: int = Field(0, ge=0)
    x_t: Optional[List[float]] = None
    t: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _conditioning_pair(self) -> "SampleRequest":
        if (self.x_t is None) != (self.t is None):
            raise ValueError("x_t and t must be given together")
        return self


class SampleSummary(BaseModel):
    seed: int
    T: int
    nfe: int
    n: int
    use_ema: bool
    parametrization: Parametrization
    mode: TrainMode
    seconds_per_100: float


class EquivalenceReport(BaseModel):
    T: int
    trials: int
    max_mean_deviation: float
    max_sigma_deviation: float
    last_step_deviation: float
    tolerance: float
    passed: bool
    failing: Optional[Dict[str, Any]] = None


class ExperimentPreset(BaseModel):
    """Named TrainConfig overrides, an optional ablation grid and acceptance bars."""

    model_config = ConfigDict(extra="forbid")

    name: str
    description: str = ""
    overrides: Dict[str, Any] = Field(default_factory=dict)
    grid: Dict[str, List[Any]] = Field(default_factory=dict)
    expected: Dict[str, float] = Field(default_factory=dict)
    eval_samples: int = Field(10_000, ge=1)

    def train_config(self, **extra: Any) -> TrainConfig:
        return TrainConfig(**{**self.overrides, **extra})
