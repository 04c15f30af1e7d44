"""
Leaky integrate-and-fire layer.

One step charges the membrane, fires where the charged potential reaches
threshold and hard-resets the neurons that fired:

    v_minus = (1 - 1/tau) * v_prev + i
    s       = 1 if v_minus >= v_th else 0
    v_new   = v_minus * (1 - s) + v_reset * s

Backward replaces the step function's derivative with an arctangent
surrogate. ``lif_step_smooth`` uses the surrogate's primal as the spike
itself, so a whole network becomes differentiable for gradient checks.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

try:
    from .autograd import Tape, Tensor, check_finite, needs_grad
    from .errors import ContractError, DimensionError
    from .models import LIFConfig
except ImportError:
    from autograd import Tape, Tensor, check_finite, needs_grad
    from errors import ContractError, DimensionError
    from models import LIFConfig

logger = logging.getLogger(__name__)


@dataclass
class LIFState:
    """Post-reset membrane potentials; ``v is None`` means at rest."""
    v: Optional[Tensor] = None

    @property
    def at_rest(self) -> bool:
        return self.v is None


def lif_reset(state: LIFState, cfg: LIFConfig) -> LIFState:
    """Return every potential to v_reset."""
    if state.v is not None:
        state.v = Tensor(np.full_like(state.v.data, cfg.v_reset))
    return state


def _surrogate(v_minus: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    w = cfg.surrogate_width
    x = (math.pi * w / 2.0) * (v_minus - cfg.v_th)
    return ((w / 2.0) / (1.0 + x * x)).astype(v_minus.dtype, copy=False)


def surrogate_grad(v_minus: Union[Tensor, np.ndarray], cfg: LIFConfig) -> Tensor:
    """d(spike)/d(v_minus) used in backward."""
    data = v_minus.data if isinstance(v_minus, Tensor) else np.asarray(v_minus, dtype=np.float64)
    return Tensor(_surrogate(data, cfg))


def smooth_spike(v_minus: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """Primal of the surrogate: arctan(pi*w/2 * (v - v_th)) / pi + 1/2."""
    x = (math.pi * cfg.surrogate_width / 2.0) * (v_minus - cfg.v_th)
    return (np.arctan(x) / math.pi + 0.5).astype(v_minus.dtype, copy=False)


def is_binary(values: np.ndarray) -> bool:
    return bool(np.all((values == 0) | (values == 1)))


def assert_binary(frame: Tensor, where: str) -> None:
    if not is_binary(frame.data):
        raise ContractError(f"{where}: spike frame contains values other than 0 and 1")


def _charge(cfg: LIFConfig, state: LIFState, current: Tensor, layer: str, tape: Optional[Tape]) -> Tensor:
    check_finite(current.data, layer)
    if state.v is None:
        v_prev = Tensor(np.full_like(current.data, cfg.v_reset))
    else:
        v_prev = state.v
        if v_prev.shape != current.shape:
            raise DimensionError(f"{layer}: state shape {v_prev.shape} does not match current {current.shape}")

    leak = cfg.leak
    v_minus = Tensor(leak * v_prev.data + current.data, requires_grad=needs_grad(tape, v_prev, current))
    if v_minus.requires_grad:
        factor = current.dtype.type(leak)
        tape.record("lif_charge", (v_prev, current), v_minus, lambda g, needs: [g * factor, g])
    return v_minus


def lif_step(
    cfg: LIFConfig,
    state: LIFState,
    current: Tensor,
    tape: Optional[Tape] = None,
    layer: str = "lif",
) -> Tuple[Tensor, LIFState]:
    """One hard-threshold step. Returns the binary spike frame and the new state."""
    v_minus = _charge(cfg, state, current, layer, tape)
    vm = v_minus.data
    s_data = (vm >= cfg.v_th).astype(vm.dtype)

    spikes = Tensor(s_data, requires_grad=v_minus.requires_grad)
    if spikes.requires_grad:
        surrogate = _surrogate(vm, cfg)
        tape.record("lif_spike", (v_minus,), spikes, lambda g, needs: [g * surrogate])

    # reset gate detached from s
    keep = 1 - s_data
    v_new = Tensor(vm * keep + cfg.v_reset * s_data, requires_grad=v_minus.requires_grad)
    if v_new.requires_grad:
        tape.record("lif_reset", (v_minus,), v_new, lambda g, needs: [g * keep])

    return spikes, LIFState(v=v_new)


def lif_step_smooth(
    cfg: LIFConfig,
    state: LIFState,
    current: Tensor,
    tape: Optional[Tape] = None,
    layer: str = "lif",
) -> Tuple[Tensor, LIFState]:
    """Differentiable variant: the spike is the smooth primal and gates the reset."""
    v_minus = _charge(cfg, state, current, layer, tape)
    vm = v_minus.data
    s_data = smooth_spike(vm, cfg)

    spikes = Tensor(s_data, requires_grad=v_minus.requires_grad)
    if spikes.requires_grad:
        surrogate = _surrogate(vm, cfg)
        tape.record("lif_spike_smooth", (v_minus,), spikes, lambda g, needs: [g * surrogate])

    v_reset = vm.dtype.type(cfg.v_reset)
    v_new = Tensor(vm * (1 - s_data) + v_reset * s_data, requires_grad=v_minus.requires_grad)
    if v_new.requires_grad:
        tape.record(
            "lif_reset_smooth",
            (v_minus, spikes),
            v_new,
            lambda g, needs: [g * (1 - s_data), g * (v_reset - vm)],
        )
    return spikes, LIFState(v=v_new)
