"""
Energy accounting: MACs for analog layers, ACs for spike-driven layers,
measured firing rates and E = E_mac * N_mac + E_ac * N_ac.

The link figure covers one encoder pass and one decoder pass per step.
The UT's virtual decoder only has to produce steps 1..T-1 (the last output
forms no further residual); its cost is reported separately as "UT extra".
"""

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .codec import CONV_HIDDEN_CHANNELS, CodecState, FeedbackTrace, SpikingCSINet, pr_feedback
    from .errors import ConfigError
    from .models import EnergyModel, LambdaSchedule, SystemConfig
except ImportError:
    from codec import CONV_HIDDEN_CHANNELS, CodecState, FeedbackTrace, SpikingCSINet, pr_feedback
    from errors import ConfigError
    from models import EnergyModel, LambdaSchedule, SystemConfig

logger = logging.getLogger(__name__)

CODEWORD = "codeword"
DECODER_HIDDEN = "decoder_hidden"

# Published budget of the full-size indoor link (32x32, CR=8, T=6, D=4096).
REFERENCE_LINK_J = 13.52e-6
REFERENCE_LINK = ((32, 32, 8, 6), 4096)

# Layers whose AC count scales with the codeword firing rate.
CODEWORD_DRIVEN_LAYERS = ("decoder.hidden", "decoder.skip")


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one synaptic layer; BN is folded into the layer before it."""
    name: str
    kind: str  # "fc" or "conv3x3"
    in_features: int
    out_features: int
    height: int = 1
    width: int = 1


def count_mac_analog(spec: LayerSpec) -> int:
    """MACs of one analog pass: FC in*out, conv 9*in*out*H*W."""
    if spec.kind == "fc":
        return spec.in_features * spec.out_features
    if spec.kind == "conv3x3":
        return 9 * spec.in_features * spec.out_features * spec.height * spec.width
    raise ConfigError(f"Unknown layer kind {spec.kind!r}")


def count_ac_spike_fc(rho: float, m_in: int, m_out: int) -> float:
    """Expected ACs of a spike-driven FC: rho * M_in * M_out."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"Firing rate must lie in [0, 1], got {rho}")
    return rho * m_in * m_out


def count_ac_exact(spikes: np.ndarray, m_out: int) -> int:
    """ACs triggered by an actual binary input: one row of M_out per spike."""
    return int(np.count_nonzero(spikes)) * m_out


def encoder_layers(system: SystemConfig) -> List[LayerSpec]:
    n_s, n_t = system.n_s, system.n_t
    c = CONV_HIDDEN_CHANNELS
    return [
        LayerSpec("encoder.conv1", "conv3x3", 2, c, n_s, n_t),
        LayerSpec("encoder.conv2", "conv3x3", c, 2, n_s, n_t),
        LayerSpec("encoder.fc", "fc", system.flat_size, system.codeword_width),
    ]


@dataclass
class OpEntry:
    layer: str
    step: int
    op_type: str  # "MAC" or "AC"
    count: float
    rho: Optional[float] = None


@dataclass
class OpCounters:
    entries: List[OpEntry] = field(default_factory=list)

    def add(self, layer: str, step: int, op_type: str, count: float, rho: Optional[float] = None) -> None:
        if count < 0:
            raise ConfigError(f"Negative operation count for {layer}")
        self.entries.append(OpEntry(layer, step, op_type, count, rho))

    @property
    def n_mac(self) -> float:
        return math.fsum(e.count for e in self.entries if e.op_type == "MAC")

    @property
    def n_ac(self) -> float:
        return math.fsum(e.count for e in self.entries if e.op_type == "AC")

    def merge(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(entries=self.entries + other.entries)


def entry_joules(entry: OpEntry, model: EnergyModel) -> float:
    return entry.count * (model.e_mac if entry.op_type == "MAC" else model.e_ac)


def total_energy(counters: OpCounters, model: EnergyModel) -> float:
    """E_mac * N_mac + E_ac * N_ac, summed entry by entry."""
    return math.fsum(entry_joules(e, model) for e in counters.entries)


@dataclass
class LayerFiring:
    """Spike counts of one LIF layer, kept per step so shards can be merged."""
    neurons: int
    step_spikes: List[int]
    samples: int = 0

    @property
    def rate(self) -> float:
        steps = len(self.step_spikes)
        if self.samples == 0 or steps == 0:
            return 0.0
        return sum(self.step_spikes) / (self.neurons * steps * self.samples)

    def step_rates(self) -> List[float]:
        if self.samples == 0:
            return [0.0] * len(self.step_spikes)
        return [s / (self.neurons * self.samples) for s in self.step_spikes]

    def merge(self, other: "LayerFiring") -> "LayerFiring":
        if other.neurons != self.neurons or len(other.step_spikes) != len(self.step_spikes):
            raise ConfigError("Cannot merge firing counts of different layers")
        return LayerFiring(
            neurons=self.neurons,
            step_spikes=[a + b for a, b in zip(self.step_spikes, other.step_spikes)],
            samples=self.samples + other.samples,
        )


@dataclass
class FiringStats:
    layers: Dict[str, LayerFiring] = field(default_factory=dict)

    def rate(self, layer: str) -> float:
        return self.layers[layer].rate

    def merge(self, other: "FiringStats") -> "FiringStats":
        merged = dict(self.layers)
        for name, firing in other.layers.items():
            merged[name] = merged[name].merge(firing) if name in merged else firing
        return FiringStats(layers=merged)


def _layer_firing(frames: Sequence[np.ndarray]) -> LayerFiring:
    return LayerFiring(
        neurons=frames[0].shape[1],
        step_spikes=[int(np.count_nonzero(f)) for f in frames],
        samples=frames[0].shape[0],
    )


def measure_firing(traces: Iterable[FeedbackTrace]) -> FiringStats:
    """Mean spike probability per neuron per step for the codeword and decoder LIF layers."""
    stats = FiringStats()
    seen = False
    for trace in traces:
        seen = True
        stats = stats.merge(
            FiringStats(
                layers={
                    CODEWORD: _layer_firing([s.data for s in trace.spikes]),
                    DECODER_HIDDEN: _layer_firing([s.data for s in trace.hidden_spikes]),
                }
            )
        )
    if not seen:
        raise ConfigError("measure_firing needs at least one trace")
    return stats


def assemble_counters(
    system: SystemConfig,
    hidden_width: int,
    codeword_rates: Sequence[float],
    hidden_rates: Sequence[float],
) -> Tuple[OpCounters, OpCounters]:
    """Per-step link counters and the UT virtual-decoder extra.

    Rates are per step (length T); a single value is repeated.
    """
    t_steps = system.t_steps
    codeword_rates = _per_step(codeword_rates, t_steps, "codeword")
    hidden_rates = _per_step(hidden_rates, t_steps, "hidden")
    m, flat, d = system.codeword_width, system.flat_size, hidden_width

    link, ut_extra = OpCounters(), OpCounters()
    layers = encoder_layers(system)
    for t in range(1, t_steps + 1):
        for spec in layers:
            link.add(spec.name, t, "MAC", count_mac_analog(spec))
        rho_c, rho_h = codeword_rates[t - 1], hidden_rates[t - 1]
        decoder = [
            ("decoder.hidden", rho_c, count_ac_spike_fc(rho_c, m, d)),
            ("decoder.output", rho_h, count_ac_spike_fc(rho_h, d, flat)),
            ("decoder.skip", rho_c, count_ac_spike_fc(rho_c, m, flat)),
        ]
        for name, rho, count in decoder:
            link.add(name, t, "AC", count, rho)
            if t < t_steps:
                ut_extra.add(f"ut.{name}", t, "AC", count, rho)
    return link, ut_extra


def _per_step(rates: Sequence[float], t_steps: int, what: str) -> List[float]:
    values = [float(r) for r in rates]
    if len(values) == 1:
        values = values * t_steps
    if len(values) != t_steps:
        raise ConfigError(f"Expected {t_steps} {what} rates, got {len(values)}")
    return values


@dataclass
class EnergyReport:
    system: SystemConfig
    hidden_width: int
    energy_model: EnergyModel
    link: OpCounters
    ut_extra: OpCounters
    firing: Optional[FiringStats] = None
    sample_count: int = 0

    @property
    def total_joules(self) -> float:
        return total_energy(self.link, self.energy_model)

    @property
    def ut_extra_joules(self) -> float:
        return total_energy(self.ut_extra, self.energy_model)

    @property
    def codeword_driven_joules(self) -> float:
        return math.fsum(
            entry_joules(e, self.energy_model) for e in self.link.entries if e.layer in CODEWORD_DRIVEN_LAYERS
        )

    @property
    def codeword_rate(self) -> float:
        """Mean codeword firing rate over the steps, as counted into the link."""
        rates = [e.rho for e in self.link.entries if e.layer == "decoder.hidden" and e.rho is not None]
        return sum(rates) / len(rates) if rates else 0.0

    @property
    def is_reference_link(self) -> bool:
        s = self.system
        return ((s.n_s, s.n_t, s.cr, s.t_steps), self.hidden_width) == REFERENCE_LINK

    def reference_gap(self) -> float:
        """Link energy minus the published full-size budget, in joules."""
        return self.total_joules - REFERENCE_LINK_J

    def rows(self) -> List[Tuple[str, int, str, float, Optional[float], float]]:
        return [
            (e.layer, e.step, e.op_type, e.count, e.rho, entry_joules(e, self.energy_model))
            for e in self.link.entries + self.ut_extra.entries
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "step", "op_type", "count", "rho", "joules"])
        for layer, step, op_type, count, rho, joules in self.rows():
            writer.writerow([layer, step, op_type, repr(count), "" if rho is None else repr(rho), repr(joules)])
        return buf.getvalue()

    def to_text(self) -> str:
        s = self.system
        lines = [
            f"configuration: N_s={s.n_s} N_t={s.n_t} CR={s.cr} M={s.codeword_width} "
            f"T={s.t_steps} D={self.hidden_width}",
            f"E_mac = {self.energy_model.e_mac * 1e12:g} pJ, E_ac = {self.energy_model.e_ac * 1e12:g} pJ",
            f"MACs per feedback: {self.link.n_mac:,.0f}",
            f"ACs per feedback: {self.link.n_ac:,.1f}",
        ]
        if self.firing is not None:
            lines.append(f"samples measured: {self.sample_count}")
            for name, firing in self.firing.layers.items():
                per_step = ", ".join(f"{r:.4f}" for r in firing.step_rates())
                lines.append(f"firing rate {name}: {firing.rate:.4f} (per step: {per_step})")
        lines.append(
            "codeword firing rate drives the hidden and skip FC AC counts; "
            "decoder firing rate drives the output FC"
        )
        lines.append(f"total energy (encoder + decoder): {self.total_joules * 1e6:.4f} uJ")
        lines.append(f"UT extra (virtual decoder, steps 1..T-1): {self.ut_extra_joules * 1e6:.4f} uJ")
        lines.append(
            f"codeword-driven ACs (hidden + skip FC) at codeword rate {self.codeword_rate:.4f}: "
            f"{self.codeword_driven_joules * 1e6:.4f} uJ"
        )
        if self.is_reference_link:
            gap = self.reference_gap()
            lines.append(
                f"gap to the {REFERENCE_LINK_J * 1e6:.2f} uJ reference: {gap * 1e6:+.4f} uJ "
                f"({gap / REFERENCE_LINK_J:+.2%}); encoder MACs are fixed at this size, "
                f"so the gap follows the codeword firing rate"
            )
        else:
            lines.append(
                f"gap to the {REFERENCE_LINK_J * 1e6:.2f} uJ reference not reported: "
                f"it applies to N_s=N_t=32, CR=8, T=6, D=4096 only"
            )
        return "\n".join(lines) + "\n"

    def write(self, prefix: Union[str, Path]) -> Tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_name(prefix.name + ".csv")
        txt_path = prefix.with_name(prefix.name + ".txt")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        txt_path.write_text(self.to_text(), encoding="utf-8")
        logger.info(f"Wrote energy report to {csv_path} and {txt_path}")
        return csv_path, txt_path


def _measure_shard(
    model: SpikingCSINet,
    planes: np.ndarray,
    lambdas: LambdaSchedule,
    batch_size: int,
) -> FiringStats:
    stats = FiringStats()
    for start in range(0, len(planes), batch_size):
        batch = planes[start:start + batch_size].astype(model.dtype)
        trace = pr_feedback(batch, model, lambdas, state=CodecState())
        stats = stats.merge(measure_firing([trace]))
    return stats


def audit_model(
    model: SpikingCSINet,
    planes: np.ndarray,
    lambdas: LambdaSchedule,
    energy_model: Optional[EnergyModel] = None,
    *,
    batch_size: int = 200,
    workers: int = 1,
) -> EnergyReport:
    """Measure firing rates by inference and assemble the energy report.

    Samples are split into contiguous shards, one per worker; shard counts
    are merged in shard order. Parameters and the model's own state are
    left untouched.
    """
    planes = np.asarray(planes)
    if planes.ndim != 4 or len(planes) == 0:
        raise ConfigError("Energy audit needs a non-empty sample set")
    energy_model = energy_model or EnergyModel()
    was_training = model.training
    model.eval()
    try:
        shards = [s for s in np.array_split(planes, max(1, min(workers, len(planes)))) if len(s)]
        if len(shards) == 1:
            results = [_measure_shard(model, shards[0], lambdas, batch_size)]
        else:
            with ThreadPoolExecutor(max_workers=len(shards), thread_name_prefix="energy-audit") as executor:
                futures = [executor.submit(_measure_shard, model, s, lambdas, batch_size) for s in shards]
                results = [f.result() for f in futures]
    finally:
        model.train(was_training)

    firing = FiringStats()
    for shard_stats in results:
        firing = firing.merge(shard_stats)

    link, ut_extra = assemble_counters(
        model.system,
        model.model_cfg.hidden_width,
        firing.layers[CODEWORD].step_rates(),
        firing.layers[DECODER_HIDDEN].step_rates(),
    )
    report = EnergyReport(
        system=model.system,
        hidden_width=model.model_cfg.hidden_width,
        energy_model=energy_model,
        link=link,
        ut_extra=ut_extra,
        firing=firing,
        sample_count=len(planes),
    )
    logger.info(
        f"Audited {len(planes)} samples: codeword rate {firing.rate(CODEWORD):.4f}, "
        f"decoder rate {firing.rate(DECODER_HIDDEN):.4f}, total {report.total_joules * 1e6:.4f} uJ"
    )
    return report
