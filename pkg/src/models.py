"""
Pydantic models for codec configuration, schedules and reports.
"""

from typing import ClassVar, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Smallest admissible residual scale factor.
LAMBDA_FLOOR = 1e-4


class SystemConfig(BaseModel):
    """Link dimensions shared by the UT and the BS."""
    model_config = ConfigDict(frozen=True)

    n_t: int = Field(32, ge=1, description="BS antennas")
    n_c: int = Field(1024, ge=1, description="Subcarriers")
    n_s: int = Field(32, ge=1, description="Retained delay rows")
    cr: int = Field(8, ge=1, description="Compression ratio 2*N_s*N_t / M")
    t_steps: int = Field(6, ge=1, description="Spiking time steps per feedback")
    input_scale: float = Field(25.0, gt=0, description="Target half-range after input scaling")

    @model_validator(mode="after")
    def check_dimensions(self) -> "SystemConfig":
        if self.n_s > self.n_c:
            raise ValueError(f"n_s ({self.n_s}) must not exceed n_c ({self.n_c})")
        if self.flat_size % self.cr != 0:
            raise ValueError(f"cr ({self.cr}) must divide 2*n_s*n_t ({self.flat_size})")
        return self

    @property
    def flat_size(self) -> int:
        return 2 * self.n_s * self.n_t

    @property
    def codeword_width(self) -> int:
        """Codeword width M."""
        return self.flat_size // self.cr


class LIFConfig(BaseModel):
    """Leaky integrate-and-fire neuron constants."""
    model_config = ConfigDict(frozen=True)

    tau: float = Field(2.0, gt=1.0, description="Membrane time constant")
    v_th: float = Field(1.0, description="Firing threshold")
    v_reset: float = Field(0.0, description="Reset potential")
    surrogate_width: float = Field(2.0, gt=0.0, description="Arctangent surrogate sharpness")

    @model_validator(mode="after")
    def check_threshold(self) -> "LIFConfig":
        if self.v_th <= self.v_reset:
            raise ValueError("v_th must be greater than v_reset")
        return self

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau


class ModelConfig(BaseModel):
    """Decoder width, PR switch and neuron constants."""
    model_config = ConfigDict(frozen=True)

    hidden_width: int = Field(4096, ge=1, description="Decoder LIF width D")
    progressive: bool = Field(True, description="Progressive residual feedback; false selects the no-PR ablation")
    lif: LIFConfig = Field(default_factory=LIFConfig)


class TrainConfig(BaseModel):
    """Optimisation settings."""

    learning_rate: float = Field(0.002, gt=0.0)
    epochs: int = Field(1000, ge=0)
    batch_size: int = Field(200, ge=2)
    alpha: float = Field(0.5, ge=0.0, description="Intermediate-loss weight")
    seed: int = Field(42, ge=0)
    augment: bool = Field(True, description="Random phase rotation")
    augment_k: int = Field(16, ge=1)
    lambda_subset_batches: int = Field(4, ge=1)
    deterministic: bool = Field(True)
    grad_clip: float = Field(10.0, gt=0.0, description="Global gradient-norm clip")


class EnergyModel(BaseModel):
    """Energy per operation, in joules."""
    model_config = ConfigDict(frozen=True)

    e_mac: float = Field(3.2e-12, gt=0.0)
    e_ac: float = Field(1e-13, gt=0.0)


class DataConfig(BaseModel):
    """Synthetic dataset generation settings."""

    sample_count: int = Field(4000, ge=1)
    paths_min: int = Field(2, ge=1)
    paths_max: int = Field(8, ge=1)
    angle_jitter: float = Field(0.25, ge=0.0, lt=1.0, description="Off-grid angle spread in bins")

    @model_validator(mode="after")
    def check_paths(self) -> "DataConfig":
        if self.paths_max < self.paths_min:
            raise ValueError("paths_max must be >= paths_min")
        return self


class LambdaSchedule(BaseModel):
    """Residual scale factors lambda[1..T]."""

    values: List[float] = Field(..., min_length=1)
    subset_size: int = Field(0, ge=0, description="Samples the schedule was estimated on")

    @field_validator("values")
    @classmethod
    def check_values(cls, v: List[float]) -> List[float]:
        if v[0] != 1.0:
            raise ValueError("lambda[1] must be exactly 1")
        for i, lam in enumerate(v):
            if not lam >= LAMBDA_FLOOR:
                raise ValueError(f"lambda[{i + 1}] = {lam} is below the floor {LAMBDA_FLOOR}")
        return v

    @classmethod
    def ones(cls, t_steps: int) -> "LambdaSchedule":
        return cls(values=[1.0] * t_steps)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, t: int) -> float:
        """One-based step index."""
        return self.values[t - 1]


class EpochMetrics(BaseModel):
    """Summary of one training epoch."""

    epoch: int
    learning_rate: float
    loss: float
    step_nmse_db: List[float]
    lambdas: List[float]
    val_nmse_db: Optional[float] = None
    batches: int = 0


class EvaluationReport(BaseModel):
    """Per-step and final NMSE over a dataset."""

    step_nmse_db: List[float]
    final_nmse_db: float
    sample_count: int
    feedback_bits: int

    def to_text(self) -> str:
        lines = [f"samples: {self.sample_count}", f"feedback bits per sample: {self.feedback_bits}"]
        for t, value in enumerate(self.step_nmse_db, start=1):
            lines.append(f"step {t} NMSE: {value:.4f} dB")
        lines.append(f"final NMSE: {self.final_nmse_db:.4f} dB")
        return "\n".join(lines)


class SweepPoint(BaseModel):
    """One trained configuration of a CR x T sweep."""

    cr: int
    t_steps: int
    progressive: bool
    feedback_bits: int
    lambdas: List[float]
    step_nmse_db: List[float]
    final_nmse_db: float
    energy_uj: float
    ut_extra_uj: float
    codeword_rate: float

    HEADER: ClassVar[List[str]] = [
        "cr", "t_steps", "progressive", "feedback_bits",
        "final_nmse_db", "energy_uj", "ut_extra_uj", "codeword_rate",
    ]

    def to_row(self) -> List[str]:
        return [
            str(self.cr),
            str(self.t_steps),
            "true" if self.progressive else "false",
            str(self.feedback_bits),
            repr(self.final_nmse_db),
            repr(self.energy_uj),
            repr(self.ut_extra_uj),
            repr(self.codeword_rate),
        ]
