"""
Dense tensors and a per-layer reverse-mode gradient tape.

Only the layers the codec needs are provided: fully connected, 3x3
convolution, batch normalisation, leaky ReLU and a handful of elementwise
helpers. Every op takes an optional ``tape``; when one is given and any
input requires a gradient, the op records a node holding the activations
its backward rule needs.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from .errors import ConfigError, DimensionError, NumericError, TapeStateError
except ImportError:
    from errors import ConfigError, DimensionError, NumericError, TapeStateError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GradFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "name", "grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass(eq=False)
class TapeNode:
    """One recorded layer application."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: GradFn


class Tape:
    """Records nodes in execution order; backward walks them in reverse."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: GradFn) -> None:
        if self._consumed:
            raise TapeStateError("Cannot record on a tape that has already been differentiated")
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward_fn))

    def backward(
        self,
        loss: Tensor,
        seed: Optional[np.ndarray] = None,
        params: Optional[Mapping[str, Tensor]] = None,
    ) -> Dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) for every named parameter.

        Parameters the loss does not depend on get an all-zero gradient.
        """
        if self._consumed:
            raise TapeStateError("Tape has already been differentiated")
        if not self.nodes or not any(node.output is loss for node in self.nodes):
            raise TapeStateError("backward called without a recorded tape for this output")

        if seed is None:
            seed_arr = np.ones_like(loss.data)
        else:
            seed_arr = np.asarray(seed, dtype=loss.dtype)
            if seed_arr.shape != loss.shape:
                raise DimensionError(f"Seed shape {seed_arr.shape} does not match output shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): seed_arr}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            input_grads = node.backward_fn(g, needs)
            for tensor, need, gi in zip(node.inputs, needs, input_grads):
                if not need or gi is None:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi
        self._consumed = True

        result: Dict[str, np.ndarray] = {}
        for name, param in (params or {}).items():
            g = grads.get(id(param))
            if g is None:
                g = np.zeros_like(param.data)
            param.grad = g
            result[name] = g
        return result


def backward(
    tape: Optional[Tape],
    loss: Tensor,
    seed: Optional[np.ndarray] = None,
    params: Optional[Mapping[str, Tensor]] = None,
) -> Dict[str, np.ndarray]:
    if tape is None:
        raise TapeStateError("backward called without a recorded tape")
    return tape.backward(loss, seed=seed, params=params)


def needs_grad(tape: Optional[Tape], *tensors: Optional[Tensor]) -> bool:
    return tape is not None and any(t is not None and t.requires_grad for t in tensors)


def check_finite(values: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in layer {layer}", layer=layer)


@dataclass(eq=False)
class LayerParams:
    """Weights of an FC (out x in) or 3x3 conv (out x in x 3 x 3) layer."""
    weight: Tensor
    bias: Optional[Tensor] = None
    name: str = "layer"

    def tensors(self) -> Dict[str, Tensor]:
        out = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out


@dataclass(eq=False)
class BatchNormParams:
    """Per-channel scale/shift plus running statistics."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    name: str = "bn"

    def tensors(self) -> Dict[str, Tensor]:
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


def init_linear(
    rng: np.random.Generator,
    out_features: int,
    in_features: int,
    *,
    name: str,
    dtype=np.float32,
    bias: bool = True,
) -> LayerParams:
    """Uniform fan-in initialisation in +-sqrt(1/in_features)."""
    bound = np.sqrt(1.0 / in_features)
    weight = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(out_features,)).astype(dtype) if bias else None
    return LayerParams(
        weight=Tensor(weight, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(b, requires_grad=True, name=f"{name}.bias") if b is not None else None,
        name=name,
    )


def init_conv3x3(
    rng: np.random.Generator,
    out_channels: int,
    in_channels: int,
    *,
    name: str,
    dtype=np.float32,
) -> LayerParams:
    bound = np.sqrt(1.0 / (in_channels * 9))
    weight = rng.uniform(-bound, bound, size=(out_channels, in_channels, 3, 3)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(out_channels,)).astype(dtype)
    return LayerParams(
        weight=Tensor(weight, requires_grad=True, name=f"{name}.weight"),
        bias=Tensor(b, requires_grad=True, name=f"{name}.bias"),
        name=name,
    )


def init_batchnorm(channels: int, *, name: str, dtype=np.float32) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        name=name,
    )


def fc_apply(params: LayerParams, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """out[b] = W x[b] + bias."""
    weight = params.weight.data
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"{params.name}: input shape {x.shape} does not match weight {weight.shape}"
        )
    xd = x.data
    if tape is None:
        # one matrix-vector product per sample: the result for a row must not
        # depend on which other rows share the batch
        out = np.empty((xd.shape[0], weight.shape[0]), dtype=np.result_type(xd, weight))
        for b in range(xd.shape[0]):
            out[b] = weight @ xd[b]
    else:
        out = xd @ weight.T
    if params.bias is not None:
        out = out + params.bias.data
    check_finite(out, params.name)

    result = Tensor(out, requires_grad=needs_grad(tape, x, params.weight, params.bias))
    if result.requires_grad:
        inputs: Tuple[Tensor, ...] = (x, params.weight)
        if params.bias is not None:
            inputs = inputs + (params.bias,)

        def backward_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> List[Optional[np.ndarray]]:
            grads: List[Optional[np.ndarray]] = [
                g @ weight if needs[0] else None,
                g.T @ xd if needs[1] else None,
            ]
            if len(needs) == 3:
                grads.append(g.sum(axis=0) if needs[2] else None)
            return grads

        tape.record("fc", inputs, result, backward_fn)
    return result


def _im2col(x: np.ndarray) -> np.ndarray:
    batch, channels, height, width = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch, height * width, channels * 9
    )


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int]) -> np.ndarray:
    batch, channels, height, width = shape
    patches = cols.reshape(batch, height, width, channels, 3, 3)
    padded = np.zeros((batch, channels, height + 2, width + 2), dtype=cols.dtype)
    for kh in range(3):
        for kw in range(3):
            padded[:, :, kh:kh + height, kw:kw + width] += patches[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
    return padded[:, :, 1:height + 1, 1:width + 1]


def conv3x3_apply(params: LayerParams, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    Samples are processed one at a time so a batch gives bit-identical
    results to the same samples run separately.
    """
    weight = params.weight.data
    if x.data.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"{params.name}: expected 4-D input and 3x3 kernel, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"{params.name}: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}"
        )
    batch, channels, height, width = x.shape
    out_channels = weight.shape[0]
    cols = _im2col(x.data)
    wmat = weight.reshape(out_channels, channels * 9)
    bias = params.bias.data if params.bias is not None else None

    flat = np.empty((batch, height * width, out_channels), dtype=np.result_type(x.data, weight))
    for b in range(batch):
        flat[b] = cols[b] @ wmat.T
        if bias is not None:
            flat[b] += bias
    out = np.ascontiguousarray(flat.transpose(0, 2, 1)).reshape(batch, out_channels, height, width)
    check_finite(out, params.name)

    result = Tensor(out, requires_grad=needs_grad(tape, x, params.weight, params.bias))
    if result.requires_grad:
        inputs: Tuple[Tensor, ...] = (x, params.weight)
        if params.bias is not None:
            inputs = inputs + (params.bias,)
        in_shape = x.shape

        def backward_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> List[Optional[np.ndarray]]:
            g_cols = g.reshape(batch, out_channels, height * width).transpose(0, 2, 1)
            grads: List[Optional[np.ndarray]] = [None, None]
            if needs[0]:
                grads[0] = _col2im(g_cols @ wmat, in_shape)
            if needs[1]:
                acc = np.zeros_like(wmat)
                for b in range(batch):
                    acc += g_cols[b].T @ cols[b]
                grads[1] = acc.reshape(weight.shape)
            if len(needs) == 3:
                grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
            return grads

        tape.record("conv3x3", inputs, result, backward_fn)
    return result


def batchnorm_apply(
    params: BatchNormParams,
    x: Tensor,
    training: bool,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Per-channel normalisation over (batch, H, W) or (batch,) followed by gamma/beta."""
    data = x.data
    if data.ndim == 4:
        axes: Tuple[int, ...] = (0, 2, 3)
        bshape: Tuple[int, ...] = (1, -1, 1, 1)
    elif data.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    else:
        raise DimensionError(f"{params.name}: batch norm expects 2-D or 4-D input, got {x.shape}")
    channels = data.shape[1]
    if channels != params.gamma.shape[0]:
        raise DimensionError(f"{params.name}: {channels} channels, parameters for {params.gamma.shape[0]}")

    if training:
        if data.shape[0] < 2:
            raise DimensionError(f"{params.name}: training mode needs a batch of at least 2")
        count = data.size // channels
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * var * (count / (count - 1))
    else:
        count = data.size // channels
        mean = params.running_mean
        var = params.running_var

    inv_std = (1.0 / np.sqrt(var + params.eps)).astype(data.dtype)
    xhat = (data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    gamma = params.gamma.data.reshape(bshape)
    out = gamma * xhat + params.beta.data.reshape(bshape)
    check_finite(out, params.name)

    result = Tensor(out, requires_grad=needs_grad(tape, x, params.gamma, params.beta))
    if result.requires_grad:

        def backward_fn(g: np.ndarray, needs: Tuple[bool, ...]) -> List[Optional[np.ndarray]]:
            gx = None
            if needs[0]:
                scale = gamma * inv_std.reshape(bshape)
                if training:
                    g_mean = g.mean(axis=axes).reshape(bshape)
                    gx_mean = (g * xhat).mean(axis=axes).reshape(bshape)
                    gx = scale * (g - g_mean - xhat * gx_mean)
                else:
                    gx = scale * g
            return [
                gx,
                (g * xhat).sum(axis=axes) if needs[1] else None,
                g.sum(axis=axes) if needs[2] else None,
            ]

        tape.record("batchnorm", (x, params.gamma, params.beta), result, backward_fn)
    return result


def leaky_relu(x: Tensor, slope: float, tape: Optional[Tape] = None) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"Leaky ReLU slope must lie in (0, 1), got {slope}")
    positive = x.data >= 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype, copy=False)
    result = Tensor(out, requires_grad=needs_grad(tape, x))
    if result.requires_grad:
        factor = np.where(positive, 1.0, slope).astype(x.dtype)
        tape.record("leaky_relu", (x,), result, lambda g, needs: [g * factor])
    return result


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _same_shape(a, b, "add")
    result = Tensor(a.data + b.data, requires_grad=needs_grad(tape, a, b))
    if result.requires_grad:
        tape.record("add", (a, b), result, lambda g, needs: [g, g])
    return result


def sub(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _same_shape(a, b, "sub")
    result = Tensor(a.data - b.data, requires_grad=needs_grad(tape, a, b))
    if result.requires_grad:
        tape.record("sub", (a, b), result, lambda g, needs: [g, -g])
    return result


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    result = Tensor(ad * bd, requires_grad=needs_grad(tape, a, b))
    if result.requires_grad:
        tape.record("mul", (a, b), result, lambda g, needs: [g * bd, g * ad])
    return result


def scale(a: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    result = Tensor(a.data * a.dtype.type(factor), requires_grad=needs_grad(tape, a))
    if result.requires_grad:
        f = a.dtype.type(factor)
        tape.record("scale", (a,), result, lambda g, needs: [g * f])
    return result


def reshape(a: Tensor, shape: Tuple[int, ...], tape: Optional[Tape] = None) -> Tensor:
    original = a.shape
    result = Tensor(a.data.reshape(shape), requires_grad=needs_grad(tape, a))
    if result.requires_grad:
        tape.record("reshape", (a,), result, lambda g, needs: [g.reshape(original)])
    return result


def sum_all(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    result = Tensor(a.data.sum(), requires_grad=needs_grad(tape, a))
    if result.requires_grad:
        shape, dtype = a.shape, a.dtype
        tape.record("sum", (a,), result, lambda g, needs: [np.full(shape, g, dtype=dtype)])
    return result


def batch_squared_error(a: Tensor, target: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    """sum((a - target)^2) / batch size, with ``target`` held constant."""
    if a.shape != target.shape:
        raise DimensionError(f"squared error: shapes {a.shape} and {target.shape} differ")
    batch = a.shape[0]
    diff = a.data - target.astype(a.dtype, copy=False)
    result = Tensor(np.sum(diff * diff) / a.dtype.type(batch), requires_grad=needs_grad(tape, a))
    if result.requires_grad:
        factor = a.dtype.type(2.0 / batch)
        tape.record("squared_error", (a,), result, lambda g, needs: [g * factor * diff])
    return result
