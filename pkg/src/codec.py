"""
SpikingCSINet encoder/decoder and the progressive residual feedback loop.

At step t the UT encodes the scaled residual X[t] = (H - H_bar[t-1]) / lambda[t]
into M binary spikes. Both the BS and the UT's virtual decoder turn those
spikes into y[t] and accumulate H_bar[t] = H_bar[t-1] + lambda[t] * y[t].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .autograd import (
        BatchNormParams,
        LayerParams,
        Tape,
        Tensor,
        add,
        batchnorm_apply,
        conv3x3_apply,
        fc_apply,
        init_batchnorm,
        init_conv3x3,
        init_linear,
        leaky_relu,
        reshape,
        scale,
        sub,
    )
    from .channel import ChannelSample
    from .errors import ConfigError, DataFormatError, DimensionError, RangeError
    from .models import LAMBDA_FLOOR, LambdaSchedule, ModelConfig, SystemConfig
    from .snn import LIFState, assert_binary, lif_step, lif_step_smooth
except ImportError:
    from autograd import (
        BatchNormParams,
        LayerParams,
        Tape,
        Tensor,
        add,
        batchnorm_apply,
        conv3x3_apply,
        fc_apply,
        init_batchnorm,
        init_conv3x3,
        init_linear,
        leaky_relu,
        reshape,
        scale,
        sub,
    )
    from channel import ChannelSample
    from errors import ConfigError, DataFormatError, DimensionError, RangeError
    from models import LAMBDA_FLOOR, LambdaSchedule, ModelConfig, SystemConfig
    from snn import LIFState, assert_binary, lif_step, lif_step_smooth

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3
CONV_HIDDEN_CHANNELS = 4


@dataclass(eq=False)
class ConvStack:
    """Per-step encoder front end: conv 2->4, BN, LReLU, conv 4->2, BN, LReLU."""
    conv1: LayerParams
    bn1: BatchNormParams
    conv2: LayerParams
    bn2: BatchNormParams


@dataclass(eq=False)
class EncoderParams:
    convs: List[ConvStack]
    fc: LayerParams


@dataclass(eq=False)
class DecoderParams:
    hidden: LayerParams
    output: LayerParams
    skip: LayerParams


@dataclass
class CodecState:
    """Encoder-output and decoder-hidden LIF states of one feedback sequence."""
    encoder: LIFState = field(default_factory=LIFState)
    decoder: LIFState = field(default_factory=LIFState)

    def reset(self) -> "CodecState":
        """Back to rest; the next batch may have a different size."""
        self.encoder = LIFState()
        self.decoder = LIFState()
        return self


@dataclass
class FeedbackTrace:
    """Everything one PR feedback pass produced, for a batch of samples."""
    t_steps: int
    lambdas: List[float]
    spikes: List[Tensor] = field(default_factory=list)
    hidden_spikes: List[Tensor] = field(default_factory=list)
    outputs: List[Tensor] = field(default_factory=list)
    partials: List[Tensor] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return len(self.partials) == self.t_steps + 1

    @property
    def final(self) -> Tensor:
        return self.partials[-1]

    def frames(self) -> np.ndarray:
        """Codeword as (T, batch, M)."""
        return np.stack([s.data for s in self.spikes])


class SpikingCSINet:
    """Spiking CSI codec with T per-step conv stacks and a shared spiking decoder."""

    def __init__(
        self,
        system: SystemConfig,
        model_cfg: Optional[ModelConfig] = None,
        *,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        self.system = system
        self.model_cfg = model_cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.training = False
        self.smooth = False
        self.state = CodecState()
        rng = rng if rng is not None else np.random.default_rng(0)

        flat, m, d = system.flat_size, system.codeword_width, self.model_cfg.hidden_width
        convs = []
        for t in range(1, system.t_steps + 1):
            prefix = f"encoder.conv.{t}"
            convs.append(
                ConvStack(
                    conv1=init_conv3x3(rng, CONV_HIDDEN_CHANNELS, 2, name=f"{prefix}.conv1", dtype=self.dtype),
                    bn1=init_batchnorm(CONV_HIDDEN_CHANNELS, name=f"{prefix}.bn1", dtype=self.dtype),
                    conv2=init_conv3x3(rng, 2, CONV_HIDDEN_CHANNELS, name=f"{prefix}.conv2", dtype=self.dtype),
                    bn2=init_batchnorm(2, name=f"{prefix}.bn2", dtype=self.dtype),
                )
            )
        self.encoder = EncoderParams(
            convs=convs,
            fc=init_linear(rng, m, flat, name="encoder.fc", dtype=self.dtype),
        )
        self.decoder = DecoderParams(
            hidden=init_linear(rng, d, m, name="decoder.hidden", dtype=self.dtype),
            output=init_linear(rng, flat, d, name="decoder.output", dtype=self.dtype),
            skip=init_linear(rng, flat, m, name="decoder.skip", dtype=self.dtype),
        )
        logger.debug(
            f"Built codec: M={m}, D={d}, T={system.t_steps}, {self.parameter_count():,} parameters"
        )

    def train(self, mode: bool = True) -> "SpikingCSINet":
        self.training = mode
        return self

    def eval(self) -> "SpikingCSINet":
        return self.train(False)

    def _modules(self):
        for stack in self.encoder.convs:
            yield from (stack.conv1, stack.bn1, stack.conv2, stack.bn2)
        yield self.encoder.fc
        yield from (self.decoder.hidden, self.decoder.output, self.decoder.skip)

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for module in self._modules():
            params.update(module.tensors())
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers: Dict[str, np.ndarray] = {}
        for module in self._modules():
            if isinstance(module, BatchNormParams):
                buffers.update(module.buffers())
        return buffers

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def layer_groups(self) -> Dict[str, List[str]]:
        """Parameter names per layer group."""
        groups: Dict[str, List[str]] = {}
        for name in self.parameters():
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[1] == "conv" else ".".join(parts[:2])
            groups.setdefault(key, []).append(name)
        return groups

    def reset_state(self) -> None:
        self.state.reset()

    def _lif(self, state: LIFState, current: Tensor, tape: Optional[Tape], layer: str):
        step = lif_step_smooth if self.smooth else lif_step
        return step(self.model_cfg.lif, state, current, tape, layer)

    def encode_step(
        self,
        x: Tensor,
        t: int,
        state: LIFState,
        tape: Optional[Tape] = None,
    ) -> Tuple[Tensor, LIFState]:
        """Conv stack t, flatten, shared FC, LIF. Returns (B x M spikes, new state)."""
        if not 1 <= t <= self.system.t_steps:
            raise RangeError(f"Step {t} outside 1..{self.system.t_steps}")
        expected = (2, self.system.n_s, self.system.n_t)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"Encoder input must be (B, {expected}), got {x.shape}")
        stack = self.encoder.convs[t - 1]
        h = conv3x3_apply(stack.conv1, x, tape)
        h = batchnorm_apply(stack.bn1, h, self.training, tape)
        h = leaky_relu(h, LEAKY_SLOPE, tape)
        h = conv3x3_apply(stack.conv2, h, tape)
        h = batchnorm_apply(stack.bn2, h, self.training, tape)
        h = leaky_relu(h, LEAKY_SLOPE, tape)
        h = reshape(h, (x.shape[0], self.system.flat_size), tape)
        current = fc_apply(self.encoder.fc, h, tape)
        return self._lif(state, current, tape, "encoder.lif")

    def decode_step(
        self,
        s: Tensor,
        state: LIFState,
        tape: Optional[Tape] = None,
    ) -> Tuple[Tensor, Tensor, LIFState]:
        """y = output(LIF(hidden(s))) + skip(s). Returns (B x 2 x N_s x N_t, hidden spikes, new state)."""
        if s.data.ndim != 2 or s.shape[1] != self.system.codeword_width:
            raise DimensionError(f"Codeword must be (B, {self.system.codeword_width}), got {s.shape}")
        if not self.smooth:
            assert_binary(s, "decoder input")
        hidden_current = fc_apply(self.decoder.hidden, s, tape)
        hidden_spikes, state = self._lif(state, hidden_current, tape, "decoder.lif")
        backbone = fc_apply(self.decoder.output, hidden_spikes, tape)
        skip = fc_apply(self.decoder.skip, s, tape)
        y = reshape(add(backbone, skip, tape), (s.shape[0], 2, self.system.n_s, self.system.n_t), tape)
        return y, hidden_spikes, state


def _as_input(h: Union[ChannelSample, np.ndarray, Tensor], dtype: np.dtype) -> Tensor:
    if isinstance(h, Tensor):
        data = h.data
    elif isinstance(h, ChannelSample):
        data = h.planes[None]
    else:
        data = np.asarray(h)
        if data.ndim == 3:
            data = data[None]
    return Tensor(np.ascontiguousarray(data, dtype=dtype))


def _schedule(model: SpikingCSINet, lambdas: Optional[LambdaSchedule], steps: int) -> List[float]:
    if not model.model_cfg.progressive:
        return [1.0] * steps
    if lambdas is None:
        raise ConfigError("Progressive feedback needs a lambda schedule")
    if len(lambdas) < steps:
        raise ConfigError(f"Lambda schedule covers {len(lambdas)} steps, {steps} requested")
    values = list(lambdas.values[:steps])
    if values[0] != 1.0 or any(not v >= LAMBDA_FLOOR for v in values):
        raise ConfigError(f"Lambda schedule {values} violates lambda[1] = 1 or the floor {LAMBDA_FLOOR}")
    return values


def pr_feedback(
    h: Union[ChannelSample, np.ndarray, Tensor],
    model: SpikingCSINet,
    lambdas: Optional[LambdaSchedule],
    *,
    tape: Optional[Tape] = None,
    state: Optional[CodecState] = None,
    steps: Optional[int] = None,
) -> FeedbackTrace:
    """Run T encode/decode steps with residual refinement.

    Uses ``model.state`` when no explicit state is given; callers reset it
    per sample batch. With ``progressive`` off every step encodes H itself
    and lambda is 1 throughout.
    """
    t_steps = model.system.t_steps if steps is None else steps
    if not 1 <= t_steps <= model.system.t_steps:
        raise RangeError(f"Cannot run {t_steps} steps of a {model.system.t_steps}-step codec")
    lams = _schedule(model, lambdas, t_steps)
    state = model.state if state is None else state

    target = _as_input(h, model.dtype)
    h_bar = Tensor(np.zeros_like(target.data))
    trace = FeedbackTrace(t_steps=t_steps, lambdas=lams, partials=[h_bar])
    enc_state, dec_state = state.encoder, state.decoder

    for t in range(1, t_steps + 1):
        lam = lams[t - 1]
        if model.model_cfg.progressive:
            x = scale(sub(target, h_bar, tape), 1.0 / lam, tape)
        else:
            x = target
        spikes, enc_state = model.encode_step(x, t, enc_state, tape)
        y, hidden_spikes, dec_state = model.decode_step(spikes, dec_state, tape)
        h_bar = add(h_bar, scale(y, lam, tape), tape)
        trace.spikes.append(spikes)
        trace.hidden_spikes.append(hidden_spikes)
        trace.outputs.append(y)
        trace.partials.append(h_bar)

    state.encoder, state.decoder = enc_state, dec_state
    return trace


def bs_reconstruct(
    frames: np.ndarray,
    model: SpikingCSINet,
    lambdas: Optional[LambdaSchedule],
) -> List[np.ndarray]:
    """Decode received frames (T x B x M) with a fresh decoder; returns H_bar[0..T]."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[:, None, :]
    t_steps = frames.shape[0]
    lams = _schedule(model, lambdas, t_steps)
    shape = (frames.shape[1], 2, model.system.n_s, model.system.n_t)
    h_bar = Tensor(np.zeros(shape, dtype=model.dtype))
    partials = [h_bar.data]
    state = LIFState()
    for t in range(t_steps):
        s = Tensor(np.ascontiguousarray(frames[t], dtype=model.dtype))
        y, _, state = model.decode_step(s, state)
        h_bar = add(h_bar, scale(y, lams[t]))
        partials.append(h_bar.data)
    return partials


def _batches(planes: np.ndarray, batch_size: int):
    for start in range(0, len(planes), batch_size):
        yield planes[start:start + batch_size]


def estimate_lambda(
    model: SpikingCSINet,
    subset: np.ndarray,
    t_steps: Optional[int] = None,
    batch_size: int = 200,
) -> LambdaSchedule:
    """lambda[t] = sqrt(sum ||R[t]||^2 / sum ||H||^2) over ``subset``, clamped to the floor.

    Runs in eval normalisation mode; earlier factors are frozen before the
    next one is measured.
    """
    planes = np.asarray(subset)
    if planes.ndim != 4 or len(planes) == 0:
        raise ConfigError("Lambda estimation needs a non-empty subset shaped (n, 2, N_s, N_t)")
    t_steps = model.system.t_steps if t_steps is None else t_steps
    if not model.model_cfg.progressive:
        return LambdaSchedule(values=[1.0] * t_steps, subset_size=len(planes))

    total = math.fsum(float(np.sum(b.astype(np.float64) ** 2)) for b in _batches(planes, batch_size))
    if total == 0:
        raise ConfigError("Lambda estimation subset has zero energy")

    was_training = model.training
    model.eval()
    try:
        values = [1.0]
        for t in range(2, t_steps + 1):
            schedule = LambdaSchedule(values=values)
            residual = []
            for batch in _batches(planes, batch_size):
                trace = pr_feedback(batch, model, schedule, state=CodecState(), steps=t - 1)
                r = batch.astype(np.float64) - trace.final.data.astype(np.float64)
                residual.append(float(np.sum(r * r)))
            lam = max(math.sqrt(math.fsum(residual) / total), LAMBDA_FLOOR)
            logger.debug(f"lambda[{t}] = {lam:.6g}")
            values.append(lam)
    finally:
        model.train(was_training)
    return LambdaSchedule(values=values, subset_size=len(planes))


def feedback_bits(system: SystemConfig) -> int:
    """T * M bits per sample."""
    m = system.codeword_width
    if m < 1:
        raise ConfigError("Codeword width must be at least 1")
    return system.t_steps * m


def reset_codec_state(model: SpikingCSINet) -> None:
    model.reset_state()


def expected_parameter_count(system: SystemConfig, hidden_width: int) -> int:
    """Learnable parameters of the architecture; BN running statistics excluded."""
    flat, m, d = system.flat_size, system.codeword_width, hidden_width
    c = CONV_HIDDEN_CHANNELS
    conv_stack = (2 * c * 9 + c) + 2 * c + (c * 2 * 9 + 2) + 2 * 2
    return (
        system.t_steps * conv_stack
        + (flat * m + m)
        + (m * d + d)
        + (d * flat + flat)
        + (m * flat + flat)
    )


def frame_bytes(m: int) -> int:
    return (m + 7) // 8


def pack_codeword(frames: np.ndarray) -> bytes:
    """Pack one sample's T x M spike frames, LSB first, ceil(M/8) bytes per frame."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DimensionError(f"Expected frames shaped (T, M), got {frames.shape}")
    if not np.all((frames == 0) | (frames == 1)):
        raise DataFormatError("Codeword frames must be binary")
    return np.packbits(frames.astype(np.uint8), axis=1, bitorder="little").tobytes()


def unpack_codeword(payload: bytes, m: int, t_steps: int) -> np.ndarray:
    per_frame = frame_bytes(m)
    if len(payload) != per_frame * t_steps:
        raise DataFormatError(
            f"Codeword payload is {len(payload)} bytes, expected {per_frame * t_steps}", offset=len(payload)
        )
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(t_steps, per_frame)
    return np.unpackbits(packed, axis=1, count=m, bitorder="little").astype(np.float32)


def transmit(trace: FeedbackTrace, m: int) -> List[bytes]:
    """Per-sample wire payloads for a batched trace."""
    frames = trace.frames()
    return [pack_codeword(frames[:, b, :]) for b in range(frames.shape[1])]


def receive(payloads: Sequence[bytes], m: int, t_steps: int) -> np.ndarray:
    """Inverse of :func:`transmit`: (T, B, M) frames."""
    return np.stack([unpack_codeword(p, m, t_steps) for p in payloads], axis=1)
