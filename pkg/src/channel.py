"""
Channel data model: angle-delay transform, truncation, input scaling,
phase-rotation augmentation, NMSE and the synthetic sparse-channel generator.

Samples are stored as float32 planes shaped (2, N_s, N_t): real plane first,
then the imaginary plane, each row-major.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .errors import ConfigError, DimensionError, MetricError
    from .models import SystemConfig
except ImportError:
    from errors import ConfigError, DimensionError, MetricError
    from models import SystemConfig

logger = logging.getLogger(__name__)

NMSE_FLOOR_DB = -100.0

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ChannelSample:
    """One truncated angle-delay channel as real/imag planes."""
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape or self.real.ndim != 2:
            raise DimensionError(f"Planes must share a 2-D shape, got {self.real.shape} and {self.imag.shape}")

    @classmethod
    def from_complex(cls, h: np.ndarray, dtype=np.float32) -> "ChannelSample":
        return cls(real=np.ascontiguousarray(h.real, dtype=dtype), imag=np.ascontiguousarray(h.imag, dtype=dtype))

    @classmethod
    def from_planes(cls, planes: np.ndarray) -> "ChannelSample":
        if planes.ndim != 3 or planes.shape[0] != 2:
            raise DimensionError(f"Expected planes shaped (2, N_s, N_t), got {planes.shape}")
        return cls(real=planes[0], imag=planes[1])

    def to_complex(self) -> np.ndarray:
        return self.real.astype(np.float64) + 1j * self.imag.astype(np.float64)

    @property
    def planes(self) -> np.ndarray:
        return np.stack([self.real, self.imag])

    @property
    def shape(self) -> Tuple[int, int]:
        return self.real.shape

    def energy(self) -> float:
        return float(np.sum(self.real.astype(np.float64) ** 2) + np.sum(self.imag.astype(np.float64) ** 2))


@dataclass
class ChannelDataset:
    """Immutable collection of samples sharing N_s x N_t."""
    planes: np.ndarray
    split: str = "train"
    source: str = "memory"
    scale_factor: float = 1.0

    def __post_init__(self) -> None:
        if self.planes.ndim != 4 or self.planes.shape[1] != 2:
            raise DimensionError(f"Dataset planes must be shaped (n, 2, N_s, N_t), got {self.planes.shape}")
        if self.split not in SPLITS:
            raise ConfigError(f"Unknown split {self.split!r}; expected one of {SPLITS}")
        if not np.all(np.isfinite(self.planes)):
            raise ConfigError("Dataset contains non-finite values")
        self.planes = np.ascontiguousarray(self.planes, dtype=np.float32)
        self.planes.flags.writeable = False

    def __len__(self) -> int:
        return self.planes.shape[0]

    def __getitem__(self, index: int) -> ChannelSample:
        return ChannelSample.from_planes(self.planes[index])

    @property
    def n_s(self) -> int:
        return self.planes.shape[2]

    @property
    def n_t(self) -> int:
        return self.planes.shape[3]

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "ChannelDataset":
        return ChannelDataset(
            planes=self.planes[np.asarray(indices, dtype=np.int64)],
            split=split or self.split,
            source=self.source,
            scale_factor=self.scale_factor,
        )

    def check_system(self, system: SystemConfig) -> None:
        if (self.n_s, self.n_t) != (system.n_s, system.n_t):
            raise DimensionError(
                f"Dataset is {self.n_s}x{self.n_t} but the configuration expects {system.n_s}x{system.n_t}"
            )


def to_angle_delay(h_tilde: np.ndarray, system: Optional[SystemConfig] = None) -> np.ndarray:
    """F_d @ H @ F_a^H with unitary DFTs; the last two axes are (N_c, N_t)."""
    h = np.asarray(h_tilde)
    if h.ndim < 2:
        raise DimensionError(f"Expected at least a 2-D matrix, got shape {h.shape}")
    if system is not None and h.shape[-2:] != (system.n_c, system.n_t):
        raise DimensionError(f"Expected {system.n_c}x{system.n_t} spatial-frequency matrix, got {h.shape[-2:]}")
    return np.fft.ifft(np.fft.fft(h, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def truncate(h_c: np.ndarray, n_s: int) -> ChannelSample:
    """Keep the first ``n_s`` delay rows."""
    if n_s > h_c.shape[-2]:
        raise ConfigError(f"n_s ({n_s}) exceeds the {h_c.shape[-2]} available delay rows")
    return ChannelSample.from_complex(h_c[:n_s])


def max_abs(planes: np.ndarray) -> float:
    return float(np.max(np.abs(planes))) if planes.size else 0.0


def scale_factor_for(dataset_max_abs: float, input_scale: float) -> float:
    if not dataset_max_abs > 0:
        raise ConfigError("Cannot scale an all-zero dataset")
    return input_scale / dataset_max_abs


def scale_input(sample: ChannelSample, dataset_max_abs: float, input_scale: float) -> ChannelSample:
    factor = scale_factor_for(dataset_max_abs, input_scale)
    return ChannelSample(real=sample.real * factor, imag=sample.imag * factor)


def scale_planes(planes: np.ndarray, input_scale: float) -> Tuple[np.ndarray, float]:
    """Map the whole set linearly so its max-abs equals ``input_scale``."""
    factor = scale_factor_for(max_abs(planes), input_scale)
    return (planes.astype(np.float64) * factor).astype(np.float32), factor


def phase_coefficient(k: int, K: int) -> complex:
    """exp(-2*pi*j*k/K), exact for quarter turns."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    k %= K
    if (4 * k) % K == 0:
        return (1 + 0j, -1j, -1 + 0j, 1j)[(4 * k) // K]
    angle = -2.0 * math.pi * k / K
    return complex(math.cos(angle), math.sin(angle))


def rotate_phase(planes: np.ndarray, k: Union[int, np.ndarray], K: int) -> np.ndarray:
    """Multiply complex channels by exp(-2*pi*j*k/K).

    ``planes`` is (2, N_s, N_t) with scalar ``k`` or (n, 2, N_s, N_t) with a
    per-sample ``k`` array.
    """
    if planes.ndim == 3:
        gamma = phase_coefficient(int(k), K)
        re, im = planes[0], planes[1]
        c, s = planes.dtype.type(gamma.real), planes.dtype.type(gamma.imag)
        return np.stack([re * c - im * s, re * s + im * c])
    if planes.ndim != 4:
        raise DimensionError(f"Expected 3-D or 4-D planes, got {planes.shape}")
    ks = np.broadcast_to(np.asarray(k), (planes.shape[0],))
    coeffs = [phase_coefficient(int(ki), K) for ki in ks]
    c = np.array([g.real for g in coeffs], dtype=planes.dtype).reshape(-1, 1, 1)
    s = np.array([g.imag for g in coeffs], dtype=planes.dtype).reshape(-1, 1, 1)
    re, im = planes[:, 0], planes[:, 1]
    return np.stack([re * c - im * s, re * s + im * c], axis=1)


def augment_phase(
    data: Union[ChannelSample, np.ndarray],
    K: int,
    rng: np.random.Generator,
) -> Union[ChannelSample, np.ndarray]:
    """Rotate by a random multiple of 2*pi/K; one draw per sample."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if isinstance(data, ChannelSample):
        return ChannelSample.from_planes(rotate_phase(data.planes, int(rng.integers(K)), K))
    ks = rng.integers(K, size=data.shape[0])
    return rotate_phase(data, ks, K)


def _as_batch(x: Union[ChannelSample, np.ndarray]) -> np.ndarray:
    arr = x.planes if isinstance(x, ChannelSample) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    return arr.astype(np.float64)


def nmse_per_sample(truth, estimate) -> np.ndarray:
    """Linear ||H - H_hat||^2 / ||H||^2 for every sample."""
    h = _as_batch(truth)
    h_hat = _as_batch(estimate)
    if h.shape != h_hat.shape:
        raise DimensionError(f"Truth {h.shape} and estimate {h_hat.shape} differ in shape")
    diff = h - h_hat
    err = np.sum(diff[:, 0] ** 2, axis=(1, 2)) + np.sum(diff[:, 1] ** 2, axis=(1, 2))
    power = np.sum(h[:, 0] ** 2, axis=(1, 2)) + np.sum(h[:, 1] ** 2, axis=(1, 2))
    if np.any(power == 0):
        raise MetricError("NMSE is undefined for a zero-norm ground truth")
    return err / power


def to_db(linear: float) -> float:
    if linear <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(linear), NMSE_FLOOR_DB)


def nmse_db(truth, estimate) -> float:
    """Mean per-sample NMSE in dB, floored at -100 dB."""
    return to_db(float(np.mean(nmse_per_sample(truth, estimate))))


def _path_response(n_c: int, n_t: int, delay: float, angle: float) -> np.ndarray:
    n = np.arange(n_c).reshape(-1, 1)
    a = np.arange(n_t).reshape(1, -1)
    return np.exp(2j * np.pi * n * delay / n_c) * np.exp(-2j * np.pi * a * angle / n_t)


def synth_channel(
    system: SystemConfig,
    gains: Sequence[complex],
    delays: Sequence[float],
    angles: Sequence[float],
) -> np.ndarray:
    """Spatial-frequency channel of a sum of discrete paths."""
    h = np.zeros((system.n_c, system.n_t), dtype=np.complex128)
    for g, tau, phi in zip(gains, delays, angles):
        h += g * _path_response(system.n_c, system.n_t, tau, phi)
    return h


def synth_generate(
    system: SystemConfig,
    paths: Tuple[int, int],
    count: int,
    rng: np.random.Generator,
    *,
    angle_jitter: float = 0.25,
    split: str = "train",
) -> ChannelDataset:
    """Sparse multipath channels, transformed, truncated and scaled.

    Delay taps are integers in [0, floor(0.8 * N_s)); angles sit on the DFT
    grid plus a uniform offset of +-angle_jitter/2 bins.
    """
    if count < 1:
        raise ConfigError("synth_generate needs count >= 1")
    lo, hi = paths
    if lo < 1 or hi < lo:
        raise ConfigError(f"Invalid path range {paths}")
    max_tap = max(1, int(0.8 * system.n_s))

    raw = np.empty((count, 2, system.n_s, system.n_t), dtype=np.float64)
    for idx in range(count):
        n_paths = int(rng.integers(lo, hi + 1))
        gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / math.sqrt(2.0)
        delays = rng.integers(0, max_tap, size=n_paths).astype(np.float64)
        angles = rng.integers(0, system.n_t, size=n_paths) + rng.uniform(
            -angle_jitter / 2.0, angle_jitter / 2.0, size=n_paths
        )
        h_c = to_angle_delay(synth_channel(system, gains, delays, angles), system)[: system.n_s]
        raw[idx, 0] = h_c.real
        raw[idx, 1] = h_c.imag

    planes, factor = scale_planes(raw, system.input_scale)
    logger.info(f"Generated {count} synthetic samples ({lo}-{hi} paths), scale factor {factor:.6g}")
    return ChannelDataset(planes=planes, split=split, source="synthetic", scale_factor=factor)
