"""
BPTT training of the codec: weighted multi-step loss, Adam with a cosine
schedule, phase augmentation, per-epoch lambda refresh and evaluation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

try:
    from .autograd import Tape, Tensor, add, batch_squared_error, scale
    from .channel import ChannelDataset, augment_phase, nmse_per_sample, to_db
    from .codec import (
        CodecState,
        FeedbackTrace,
        SpikingCSINet,
        bs_reconstruct,
        estimate_lambda,
        feedback_bits,
        pr_feedback,
        receive,
        reset_codec_state,
        transmit,
    )
    from .errors import ConfigError, NumericError, RangeError, TapeStateError, TrainingAborted
    from .models import EpochMetrics, EvaluationReport, LambdaSchedule, TrainConfig
    from .performance_monitor import PerformanceMonitor, get_performance_monitor
except ImportError:
    from autograd import Tape, Tensor, add, batch_squared_error, scale
    from channel import ChannelDataset, augment_phase, nmse_per_sample, to_db
    from codec import (
        CodecState,
        FeedbackTrace,
        SpikingCSINet,
        bs_reconstruct,
        estimate_lambda,
        feedback_bits,
        pr_feedback,
        receive,
        reset_codec_state,
        transmit,
    )
    from errors import ConfigError, NumericError, RangeError, TapeStateError, TrainingAborted
    from models import EpochMetrics, EvaluationReport, LambdaSchedule, TrainConfig
    from performance_monitor import PerformanceMonitor, get_performance_monitor

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

RNG_STREAMS = ("init", "shuffle", "augment", "subset")
CHECKPOINTED_STREAMS = ("shuffle", "augment")


def make_rngs(seed: int, deterministic: bool = True) -> Dict[str, np.random.Generator]:
    """Independent generator per purpose, all derived from one seed.

    Without ``deterministic`` the shuffle and augmentation streams draw
    fresh OS entropy.
    """
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    rngs = {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}
    if not deterministic:
        rngs["shuffle"] = np.random.default_rng()
        rngs["augment"] = np.random.default_rng()
    return rngs


def build_model(system, model_cfg, seed: int, dtype=np.float32) -> SpikingCSINet:
    return SpikingCSINet(system, model_cfg, rng=make_rngs(seed)["init"], dtype=dtype)


def loss(trace: FeedbackTrace, h: np.ndarray, alpha: float, tape: Optional[Tape] = None) -> Tensor:
    """||H_bar[T] - H||^2 + alpha * sum_{t<T} ||H_bar[t] - H||^2, batch mean."""
    if not trace.complete:
        raise TapeStateError(
            f"Loss needs a trace through step {trace.t_steps}; got {len(trace.partials) - 1} steps"
        )
    target = np.asarray(h)
    if target.ndim == 3:
        target = target[None]
    t_steps = trace.t_steps
    total = batch_squared_error(trace.partials[t_steps], target, tape)
    if alpha != 0:
        for t in range(1, t_steps):
            total = add(total, scale(batch_squared_error(trace.partials[t], target, tape), alpha, tape), tape)
    return total


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas=ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    beta1, beta2 = betas
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"Gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if lr != 0:
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise RangeError(f"Epoch {epoch} outside 0..{total_epochs - 1}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(math.fsum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return norm


def step_errors(trace: FeedbackTrace, h: np.ndarray) -> np.ndarray:
    """Per-step sums of per-sample linear NMSE, shape (T,)."""
    return np.array([nmse_per_sample(h, trace.partials[t].data).sum() for t in range(1, trace.t_steps + 1)])


def train_epoch(
    model: SpikingCSINet,
    planes: np.ndarray,
    cfg: TrainConfig,
    optimizer: AdamState,
    lambdas: LambdaSchedule,
    *,
    lr: float,
    rngs: Mapping[str, np.random.Generator],
    epoch: int = 0,
    monitor: Optional[PerformanceMonitor] = None,
) -> EpochMetrics:
    """One pass over shuffled mini-batches with BPTT through all T steps."""
    monitor = monitor or get_performance_monitor()
    model.train()
    params = model.parameters()
    n = len(planes)
    order = rngs["shuffle"].permutation(n)
    loss_sum = 0.0
    seen = 0
    batches = 0
    errors = np.zeros(model.system.t_steps)

    for b, start in enumerate(range(0, n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        if len(idx) < 2:
            logger.debug(f"Epoch {epoch}: dropping undersized batch of {len(idx)}")
            continue
        batch = planes[idx]
        if cfg.augment:
            batch = augment_phase(batch, cfg.augment_k, rngs["augment"])
        batch = batch.astype(model.dtype)

        reset_codec_state(model)
        tape = Tape()
        try:
            with monitor.track("forward"):
                trace = pr_feedback(batch, model, lambdas, tape=tape)
                value = loss(trace, batch, cfg.alpha, tape)
        except NumericError as e:
            raise TrainingAborted(epoch, b, e.layer, str(e)) from e
        if not math.isfinite(value.item()):
            raise TrainingAborted(epoch, b, None, "non-finite loss")

        with monitor.track("backward"):
            grads = tape.backward(value, params=params)
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingAborted(epoch, b, bad[0], "non-finite gradient")
        clip_global_norm(grads, cfg.grad_clip)
        adam_step(params, grads, optimizer, lr)

        loss_sum += value.item() * len(idx)
        seen += len(idx)
        batches += 1
        errors += step_errors(trace, batch)
        logger.debug(f"Epoch {epoch} batch {b}: loss {value.item():.6g}")

    reset_codec_state(model)
    if seen == 0:
        raise ConfigError(f"No batch of at least 2 samples in a dataset of {n}")
    return EpochMetrics(
        epoch=epoch,
        learning_rate=lr,
        loss=loss_sum / seen,
        step_nmse_db=[to_db(e / seen) for e in errors],
        lambdas=list(lambdas.values),
        batches=batches,
    )


def evaluate(
    model: SpikingCSINet,
    planes: np.ndarray,
    lambdas: LambdaSchedule,
    *,
    batch_size: int = 200,
    over_the_wire: bool = False,
) -> EvaluationReport:
    """Per-step mean NMSE in eval mode, fresh codec state per batch.

    With ``over_the_wire`` the reconstruction is the BS decoding the packed
    codeword instead of the UT's virtual decoder.
    """
    planes = np.asarray(planes)
    if planes.ndim != 4 or len(planes) == 0:
        raise ConfigError("Evaluation needs a non-empty dataset")
    was_training = model.training
    model.eval()
    system = model.system
    errors = np.zeros(system.t_steps)
    try:
        for start in range(0, len(planes), batch_size):
            batch = planes[start:start + batch_size].astype(model.dtype)
            trace = pr_feedback(batch, model, lambdas, state=CodecState())
            if over_the_wire:
                frames = receive(transmit(trace, system.codeword_width), system.codeword_width, system.t_steps)
                partials = bs_reconstruct(frames, model, lambdas)
            else:
                partials = [p.data for p in trace.partials]
            for t in range(1, system.t_steps + 1):
                errors[t - 1] += nmse_per_sample(batch, partials[t]).sum()
    finally:
        model.train(was_training)

    step_db = [to_db(e / len(planes)) for e in errors]
    return EvaluationReport(
        step_nmse_db=step_db,
        final_nmse_db=step_db[-1],
        sample_count=len(planes),
        feedback_bits=feedback_bits(system),
    )


EpochCallback = Callable[[EpochMetrics, "Trainer"], None]


class Trainer:
    """Owns the optimizer, RNG streams, lambda schedule and epoch counter."""

    def __init__(
        self,
        model: SpikingCSINet,
        cfg: TrainConfig,
        *,
        rngs: Optional[Dict[str, np.random.Generator]] = None,
        monitor: Optional[PerformanceMonitor] = None,
    ):
        self.model = model
        self.cfg = cfg
        self.rngs = rngs or make_rngs(cfg.seed, cfg.deterministic)
        self.monitor = monitor or get_performance_monitor()
        self.optimizer = AdamState.zeros(model.parameters())
        self.lambdas = LambdaSchedule.ones(model.system.t_steps)
        self.epoch = 0
        self.history: List[EpochMetrics] = []
        self.best_epoch: Optional[int] = None
        self.best_val_db: Optional[float] = None
        self._subset: Optional[np.ndarray] = None

    def lambda_subset(self, planes: np.ndarray) -> np.ndarray:
        """Fixed indices of the samples lambda is estimated on."""
        if self._subset is None:
            # drawn from a fresh copy of the stream so a resumed run picks the same subset
            rng = make_rngs(self.cfg.seed)["subset"]
            size = min(len(planes), self.cfg.lambda_subset_batches * self.cfg.batch_size)
            self._subset = np.sort(rng.permutation(len(planes))[:size])
        return self._subset

    def refresh_lambda(self, planes: np.ndarray) -> LambdaSchedule:
        subset = planes[self.lambda_subset(planes)]
        with self.monitor.track("lambda"):
            self.lambdas = estimate_lambda(self.model, subset, batch_size=self.cfg.batch_size)
        return self.lambdas

    def run_epoch(self, planes: np.ndarray, val_planes: Optional[np.ndarray] = None) -> EpochMetrics:
        self.refresh_lambda(planes)
        lr = cosine_lr(self.epoch, self.cfg.epochs, self.cfg.learning_rate)
        metrics = train_epoch(
            self.model,
            planes,
            self.cfg,
            self.optimizer,
            self.lambdas,
            lr=lr,
            rngs=self.rngs,
            epoch=self.epoch,
            monitor=self.monitor,
        )
        if val_planes is not None:
            report = evaluate(self.model, val_planes, self.lambdas, batch_size=self.cfg.batch_size)
            metrics.val_nmse_db = report.final_nmse_db
            if self.best_val_db is None or report.final_nmse_db < self.best_val_db:
                self.best_val_db = report.final_nmse_db
                self.best_epoch = self.epoch
        self.model.eval()
        self.history.append(metrics)
        self.epoch += 1
        logger.info(
            f"Epoch {metrics.epoch + 1}/{self.cfg.epochs}: lr {metrics.learning_rate:.6g}, "
            f"loss {metrics.loss:.6g}, final NMSE {metrics.step_nmse_db[-1]:.3f} dB, "
            f"lambda {[round(v, 4) for v in metrics.lambdas]}"
        )
        return metrics

    def fit(
        self,
        dataset: ChannelDataset,
        *,
        val_dataset: Optional[ChannelDataset] = None,
        on_epoch: Optional[EpochCallback] = None,
        stop_after: Optional[int] = None,
    ) -> List[EpochMetrics]:
        """Train until ``cfg.epochs``, resuming from ``self.epoch``.

        ``stop_after`` ends this call after that many epochs; a later call
        picks up where it stopped. The schedule is re-estimated on the
        trained parameters at the end so a checkpoint carries the lambda
        that matches them.
        """
        dataset.check_system(self.model.system)
        if val_dataset is not None:
            val_dataset.check_system(self.model.system)
        planes = dataset.planes
        val_planes = val_dataset.planes if val_dataset is not None else None
        completed: List[EpochMetrics] = []
        while self.epoch < self.cfg.epochs and (stop_after is None or len(completed) < stop_after):
            metrics = self.run_epoch(planes, val_planes)
            completed.append(metrics)
            if on_epoch is not None:
                on_epoch(metrics, self)
        self.refresh_lambda(planes)
        self.model.eval()
        return completed
