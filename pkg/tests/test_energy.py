"""
Tests for operation counting, firing-rate measurement and the energy report.
"""

import csv
import io

import numpy as np
import pytest

from src.autograd import Tensor
from src.codec import CodecState, FeedbackTrace, SpikingCSINet, pr_feedback
from src.energy import (
    CODEWORD,
    DECODER_HIDDEN,
    REFERENCE_LINK_J,
    EnergyReport,
    LayerSpec,
    OpCounters,
    assemble_counters,
    audit_model,
    count_ac_exact,
    count_ac_spike_fc,
    count_mac_analog,
    encoder_layers,
    measure_firing,
    total_energy,
)
from src.errors import ConfigError
from src.models import EnergyModel, LambdaSchedule, ModelConfig, SystemConfig

FULL_SYSTEM = SystemConfig(n_t=32, n_c=1024, n_s=32, cr=8, t_steps=6)
INDOOR_DECODER_RATE = 0.0421


def _trace(spike_frames, hidden_frames):
    return FeedbackTrace(
        t_steps=len(spike_frames),
        lambdas=[1.0] * len(spike_frames),
        spikes=[Tensor(f) for f in spike_frames],
        hidden_spikes=[Tensor(f) for f in hidden_frames],
    )


class TestOperationCounts:
    """Test cases for MAC and AC counting."""

    def test_encoder_fc(self):
        assert count_mac_analog(LayerSpec("fc", "fc", 2048, 256)) == 524_288

    def test_conv(self):
        assert count_mac_analog(LayerSpec("conv", "conv3x3", 2, 4, 32, 32)) == 73_728

    def test_zero_size_layer(self):
        assert count_mac_analog(LayerSpec("empty", "fc", 0, 256)) == 0

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            count_mac_analog(LayerSpec("pool", "maxpool", 1, 1))

    def test_encoder_per_step(self):
        assert sum(count_mac_analog(s) for s in encoder_layers(FULL_SYSTEM)) == 671_744

    def test_silent_input(self):
        assert count_ac_spike_fc(0.0, 256, 4096) == 0

    def test_dense_limit(self):
        assert count_ac_spike_fc(1.0, 256, 4096) == 1_048_576

    def test_indoor_rate(self):
        assert count_ac_spike_fc(INDOOR_DECODER_RATE, 4096, 2048) == pytest.approx(353_160.4, abs=0.05)

    @pytest.mark.parametrize("rho", [-0.1, 1.5])
    def test_rate_out_of_range(self, rho):
        with pytest.raises(ConfigError):
            count_ac_spike_fc(rho, 4, 4)

    def test_expected_count_matches_exact_count(self):
        spikes = np.zeros(64)
        spikes[[1, 5, 9, 40]] = 1
        assert count_ac_exact(spikes, 100) == 400
        assert count_ac_spike_fc(4 / 64, 64, 100) == pytest.approx(400)


class TestTotalEnergy:
    """Test cases for total_energy."""

    def test_empty(self):
        assert total_energy(OpCounters(), EnergyModel()) == 0.0

    def test_encoder_step(self):
        counters = OpCounters()
        counters.add("encoder", 1, "MAC", 671_744)
        assert total_energy(counters, EnergyModel()) == pytest.approx(2.150e-6, rel=1e-3)

    def test_linear_arithmetic(self):
        counters = OpCounters()
        counters.add("a", 1, "MAC", 1000)
        counters.add("b", 1, "AC", 2000)
        assert counters.n_mac == 1000 and counters.n_ac == 2000
        assert total_energy(counters, EnergyModel()) == pytest.approx(3.4e-9)

    def test_negative_count(self):
        with pytest.raises(ConfigError):
            OpCounters().add("a", 1, "AC", -1)

    def test_merge(self):
        a, b = OpCounters(), OpCounters()
        a.add("x", 1, "MAC", 5)
        b.add("y", 2, "AC", 7)
        merged = a.merge(b)
        assert merged.n_mac == 5 and merged.n_ac == 7


class TestFiring:
    """Test cases for measure_firing."""

    def test_silent(self):
        stats = measure_firing([_trace([np.zeros((2, 8))] * 3, [np.zeros((2, 16))] * 3)])
        assert stats.rate(CODEWORD) == 0.0 and stats.rate(DECODER_HIDDEN) == 0.0

    def test_saturated(self):
        stats = measure_firing([_trace([np.ones((2, 8))] * 3, [np.ones((2, 16))] * 3)])
        assert stats.rate(CODEWORD) == 1.0 and stats.rate(DECODER_HIDDEN) == 1.0

    def test_single_spike(self):
        hidden = [np.zeros((1, 4096)) for _ in range(6)]
        hidden[2][0, 17] = 1
        stats = measure_firing([_trace([np.zeros((1, 8))] * 6, hidden)])
        assert stats.rate(DECODER_HIDDEN) == pytest.approx(1 / 24576)
        assert stats.layers[DECODER_HIDDEN].step_rates()[2] == pytest.approx(1 / 4096)

    def test_merge_is_order_independent(self):
        rng = np.random.default_rng(0)
        traces = [
            _trace(
                [(rng.random((3, 8)) < 0.4).astype(float) for _ in range(2)],
                [(rng.random((3, 16)) < 0.1).astype(float) for _ in range(2)],
            )
            for _ in range(4)
        ]
        forward = measure_firing(traces)
        backward = measure_firing(traces[::-1])
        assert forward.rate(CODEWORD) == backward.rate(CODEWORD)
        assert forward.layers[DECODER_HIDDEN].step_spikes == backward.layers[DECODER_HIDDEN].step_spikes

    def test_empty(self):
        with pytest.raises(ConfigError):
            measure_firing([])


class TestAssembly:
    """Test cases for the analytic audit."""

    def test_full_size_link_near_reference_budget(self):
        for codeword_rate in (0.0, 0.25, 0.5, 1.0):
            link, _ = assemble_counters(FULL_SYSTEM, 4096, [codeword_rate], [INDOOR_DECODER_RATE])
            total = total_energy(link, EnergyModel())
            assert abs(total - 13.52e-6) / 13.52e-6 < 0.20, codeword_rate
        assert link.n_mac == 671_744 * 6

    def test_doubling_steps_doubles_encoder_energy(self):
        short = SystemConfig(n_t=32, n_c=1024, n_s=32, cr=8, t_steps=3)
        link_short, _ = assemble_counters(short, 4096, [0.2], [0.05])
        link_long, _ = assemble_counters(FULL_SYSTEM, 4096, [0.2], [0.05])
        assert link_long.n_mac == 2 * link_short.n_mac
        assert link_long.n_ac == pytest.approx(2 * link_short.n_ac)

    def test_linear_in_decoder_rate(self):
        energy = EnergyModel()
        totals = [
            total_energy(assemble_counters(FULL_SYSTEM, 4096, [0.3], [rho])[0], energy)
            for rho in (0.0, 0.05, 0.1)
        ]
        assert totals[2] - totals[1] == pytest.approx(totals[1] - totals[0], rel=1e-9)

    def test_silent_decoder_removes_output_acs(self):
        link, _ = assemble_counters(FULL_SYSTEM, 4096, [0.3], [0.0])
        assert all(e.count == 0 for e in link.entries if e.layer == "decoder.output")

    def test_ut_extra_covers_first_t_minus_one_steps(self):
        _, ut_extra = assemble_counters(FULL_SYSTEM, 4096, [0.3], [0.05])
        assert sorted({e.step for e in ut_extra.entries}) == [1, 2, 3, 4, 5]
        assert all(e.layer.startswith("ut.") for e in ut_extra.entries)

    def test_rate_count_mismatch(self):
        with pytest.raises(ConfigError):
            assemble_counters(FULL_SYSTEM, 4096, [0.1, 0.2], [0.05])


class TestReferenceGap:
    """The report states its distance to the full-size budget."""

    @staticmethod
    def _report(system, hidden_width, codeword_rate):
        link, ut_extra = assemble_counters(system, hidden_width, [codeword_rate], [INDOOR_DECODER_RATE])
        return EnergyReport(
            system=system, hidden_width=hidden_width, energy_model=EnergyModel(), link=link, ut_extra=ut_extra
        )

    def test_gap_is_total_minus_reference(self):
        report = self._report(FULL_SYSTEM, 4096, 0.25)
        assert report.is_reference_link
        assert report.reference_gap() == pytest.approx(report.total_joules - 13.52e-6)
        assert REFERENCE_LINK_J == 13.52e-6

    def test_gap_grows_with_codeword_rate_only(self):
        low, high = self._report(FULL_SYSTEM, 4096, 0.1), self._report(FULL_SYSTEM, 4096, 0.6)
        delta = high.reference_gap() - low.reference_gap()
        assert delta == pytest.approx(high.codeword_driven_joules - low.codeword_driven_joules, rel=1e-9)
        assert high.codeword_rate == pytest.approx(0.6)

    def test_text_names_gap_and_codeword_rate(self):
        report = self._report(FULL_SYSTEM, 4096, 0.25)
        text = report.to_text()
        gap_line = next(line for line in text.splitlines() if line.startswith("gap to the 13.52 uJ reference:"))
        printed = float(gap_line.split(":", 1)[1].split()[0])
        assert printed == pytest.approx(report.reference_gap() * 1e6, abs=1e-4)
        assert "codeword firing rate" in gap_line
        assert "codeword-driven ACs (hidden + skip FC) at codeword rate 0.2500" in text

    def test_other_configurations_skip_the_gap(self, tiny_system):
        text = self._report(tiny_system, 64, 0.25).to_text()
        assert "reference not reported" in text
        assert "gap to the 13.52 uJ reference:" not in text


class TestAudit:
    """Test cases for audit_model and the report."""

    @pytest.fixture
    def model(self, tiny_system, tiny_model_cfg):
        return SpikingCSINet(tiny_system, tiny_model_cfg, rng=np.random.default_rng(0)).eval()

    @pytest.fixture
    def schedule(self):
        return LambdaSchedule(values=[1.0, 0.5, 0.25])

    def test_breakdown_sums_to_total(self, model, tiny_planes, schedule):
        report = audit_model(model, tiny_planes, schedule)
        link_rows = [row for row in report.rows() if not row[0].startswith("ut.")]
        assert sum(row[5] for row in link_rows) == pytest.approx(report.total_joules, rel=1e-12)

    def test_measured_rates_match_direct_count(self, model, tiny_planes, schedule):
        report = audit_model(model, tiny_planes, schedule)
        trace = pr_feedback(tiny_planes, model, schedule, state=CodecState())
        direct = measure_firing([trace])
        assert report.firing.rate(CODEWORD) == direct.rate(CODEWORD)
        assert report.firing.rate(DECODER_HIDDEN) == direct.rate(DECODER_HIDDEN)

    def test_workers_give_same_report(self, model, tiny_planes, schedule):
        single = audit_model(model, tiny_planes, schedule, batch_size=8, workers=1)
        sharded = audit_model(model, tiny_planes, schedule, batch_size=8, workers=3)
        assert single.total_joules == sharded.total_joules
        assert single.to_csv() == sharded.to_csv()

    def test_side_effect_free(self, model, tiny_planes, schedule):
        before = {name: p.data.copy() for name, p in model.parameters().items()}
        model.train()
        audit_model(model, tiny_planes, schedule)
        assert model.training
        assert model.state.encoder.at_rest and model.state.decoder.at_rest
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[name])

    def test_silent_decoder_has_no_output_energy(self, model, tiny_planes, schedule):
        model.decoder.hidden.weight.data[...] = 0
        model.decoder.hidden.bias.data[...] = -1
        report = audit_model(model, tiny_planes, schedule)
        assert report.firing.rate(DECODER_HIDDEN) == 0.0
        output_rows = [row for row in report.rows() if row[0] == "decoder.output"]
        assert all(row[5] == 0.0 for row in output_rows)

    def test_csv_and_text(self, model, tiny_planes, schedule, tmp_path):
        report = audit_model(model, tiny_planes, schedule)
        csv_path, txt_path = report.write(tmp_path / "audit")
        rows = list(csv.reader(io.StringIO(csv_path.read_text())))
        assert rows[0] == ["layer", "step", "op_type", "count", "rho", "joules"]
        assert len(rows) - 1 == len(report.rows())
        text = txt_path.read_text()
        assert "total energy" in text and "UT extra" in text and "firing rate codeword" in text

    def test_empty_sample_set(self, model, schedule):
        with pytest.raises(ConfigError):
            audit_model(model, np.zeros((0, 2, 8, 8)), schedule)

    def test_no_pr_model(self, tiny_system, tiny_planes):
        model = SpikingCSINet(tiny_system, ModelConfig(hidden_width=64, progressive=False))
        report = audit_model(model, tiny_planes, LambdaSchedule.ones(3))
        assert report.sample_count == len(tiny_planes)
