"""
Tests for the spiking codec, progressive residual feedback and lambda estimation.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.autograd import Tensor
from src.channel import ChannelSample, nmse_db
from src.codec import (
    CodecState,
    SpikingCSINet,
    bs_reconstruct,
    estimate_lambda,
    expected_parameter_count,
    feedback_bits,
    frame_bytes,
    pack_codeword,
    pr_feedback,
    receive,
    reset_codec_state,
    transmit,
    unpack_codeword,
)
from src.errors import ConfigError, ContractError, DataFormatError, DimensionError, RangeError
from src.models import LAMBDA_FLOOR, LambdaSchedule, ModelConfig, SystemConfig
from src.snn import LIFState


def _zero_all(model):
    for tensor in model.parameters().values():
        tensor.data[...] = 0


def _build(system, model_cfg, seed=0, dtype=np.float64):
    return SpikingCSINet(system, model_cfg, rng=np.random.default_rng(seed), dtype=dtype).eval()


class TestFeedbackBits:
    """Test cases for the feedback bit budget."""

    def test_cr8_t6(self):
        assert feedback_bits(SystemConfig(cr=8, t_steps=6)) == 1536

    def test_cr4_t2(self):
        assert feedback_bits(SystemConfig(cr=4, t_steps=2)) == 1024

    def test_single_step(self):
        system = SystemConfig(cr=4, t_steps=1)
        assert system.codeword_width == 512
        assert feedback_bits(system) == 512

    def test_non_dividing_cr_rejected(self):
        with pytest.raises(ValidationError):
            SystemConfig(cr=4096)


class TestParameterCount:
    """Test cases for the structural parameter count."""

    def test_base_variant(self):
        expected = expected_parameter_count(SystemConfig(cr=8, t_steps=6), 4096)
        assert expected == 10_495_180
        assert abs(expected - 10.49e6) / 10.49e6 < 0.01

    def test_large_variant(self):
        expected = expected_parameter_count(SystemConfig(cr=8, t_steps=6), 8192)
        assert expected == 19_936_460
        assert abs(expected - 19.93e6) / 19.93e6 < 0.01

    def test_built_model_matches_formula(self):
        system = SystemConfig(cr=8, t_steps=6)
        model = SpikingCSINet(system, ModelConfig(hidden_width=4096))
        assert model.parameter_count() == expected_parameter_count(system, 4096)

    def test_layer_groups(self, tiny_system, tiny_model_cfg):
        groups = _build(tiny_system, tiny_model_cfg).layer_groups()
        assert set(groups) == {
            "encoder.conv.1", "encoder.conv.2", "encoder.conv.3",
            "encoder.fc", "decoder.hidden", "decoder.output", "decoder.skip",
        }
        assert len(groups["encoder.conv.2"]) == 8


class TestEncodeStep:
    """Test cases for encode_step."""

    def test_quiescent_network(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 8, 8)))
        spikes, _ = model.encode_step(x, 1, LIFState())
        assert not spikes.data.any()

    def test_large_bias_fires_every_step(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        model.encoder.fc.bias.data[...] = 2.0
        state = LIFState()
        x = Tensor(np.zeros((1, 2, 8, 8)))
        for t in range(1, 4):
            spikes, state = model.encode_step(x, t, state)
            assert spikes.data.shape == (1, 16)
            assert np.all(spikes.data == 1)

    @pytest.mark.parametrize("cr", [4, 8, 16, 32, 64])
    def test_codeword_width(self, cr):
        system = SystemConfig(n_t=8, n_c=8, n_s=8, cr=cr, t_steps=1)
        model = _build(system, ModelConfig(hidden_width=8))
        spikes, _ = model.encode_step(Tensor(np.ones((1, 2, 8, 8))), 1, LIFState())
        assert spikes.shape == (1, 128 // cr)

    @pytest.mark.parametrize("t", [0, 4])
    def test_step_out_of_range(self, tiny_system, tiny_model_cfg, t):
        model = _build(tiny_system, tiny_model_cfg)
        with pytest.raises(RangeError):
            model.encode_step(Tensor(np.zeros((1, 2, 8, 8))), t, LIFState())

    def test_wrong_input_shape(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        with pytest.raises(DimensionError):
            model.encode_step(Tensor(np.zeros((1, 2, 4, 8))), 1, LIFState())


class TestDecodeStep:
    """Test cases for decode_step."""

    def test_silent_codeword_gives_zero(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        for layer in (model.decoder.hidden, model.decoder.output, model.decoder.skip):
            layer.bias.data[...] = 0
        y, hidden, _ = model.decode_step(Tensor(np.zeros((3, 16))), LIFState())
        assert y.shape == (3, 2, 8, 8)
        assert not y.data.any() and not hidden.data.any()

    def test_skip_branch_is_spike_indexed_dictionary(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        columns = np.random.default_rng(1).standard_normal((128, 16))
        model.decoder.skip.weight.data[...] = columns
        s = np.zeros((1, 16))
        s[0, [2, 9]] = 1
        y, _, _ = model.decode_step(Tensor(s), LIFState())
        np.testing.assert_allclose(y.data.ravel(), columns[:, 2] + columns[:, 9])

    def test_membranes_persist_between_steps(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        model.decoder.hidden.bias.data[...] = 0.7
        model.decoder.output.weight.data[...] = 1.0
        s = Tensor(np.ones((1, 16)))
        y1, _, state = model.decode_step(s, LIFState())
        y2, _, _ = model.decode_step(s, state)
        assert not y1.data.any()
        assert np.all(y2.data == 64)

    def test_non_binary_codeword(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        with pytest.raises(ContractError):
            model.decode_step(Tensor(np.full((1, 16), 0.5)), LIFState())

    def test_wrong_width(self, tiny_system, tiny_model_cfg):
        model = _build(tiny_system, tiny_model_cfg)
        with pytest.raises(DimensionError):
            model.decode_step(Tensor(np.zeros((1, 15))), LIFState())


class TestPrFeedback:
    """Test cases for the progressive residual loop."""

    @pytest.fixture
    def model(self, tiny_system, tiny_model_cfg):
        return _build(tiny_system, tiny_model_cfg, seed=3)

    @pytest.fixture
    def schedule(self):
        return LambdaSchedule(values=[1.0, 0.5, 0.25])

    def test_trace_structure(self, model, schedule, tiny_planes):
        trace = pr_feedback(tiny_planes[:4], model, schedule, state=CodecState())
        assert trace.complete
        assert len(trace.spikes) == 3 and len(trace.outputs) == 3
        assert not trace.partials[0].data.any()
        assert trace.frames().shape == (3, 4, 16)

    def test_reconstruction_identity(self, model, schedule, tiny_planes):
        trace = pr_feedback(tiny_planes[:4], model, schedule, state=CodecState())
        total = sum(lam * y.data for lam, y in zip(schedule.values, trace.outputs))
        np.testing.assert_allclose(trace.final.data, total, rtol=1e-6, atol=1e-9)
        for t in range(1, 4):
            step = trace.partials[t - 1].data + schedule[t] * trace.outputs[t - 1].data
            np.testing.assert_array_equal(trace.partials[t].data, step)

    def test_null_codec_is_zero_db(self, model, schedule, tiny_planes):
        for layer in (model.decoder.output, model.decoder.skip):
            layer.weight.data[...] = 0
            layer.bias.data[...] = 0
        trace = pr_feedback(tiny_planes[:4], model, schedule, state=CodecState())
        assert not trace.final.data.any()
        assert nmse_db(tiny_planes[:4], trace.final.data) == pytest.approx(0.0, abs=1e-12)

    def test_single_step_codec(self, tiny_model_cfg, tiny_planes):
        system = SystemConfig(n_t=8, n_c=16, n_s=8, cr=8, t_steps=1)
        model = _build(system, tiny_model_cfg)
        trace = pr_feedback(tiny_planes[:2], model, LambdaSchedule(values=[1.0]), state=CodecState())
        np.testing.assert_array_equal(trace.final.data, trace.outputs[0].data)

    def test_sample_input(self, model, schedule, tiny_planes):
        sample = ChannelSample.from_planes(tiny_planes[0])
        trace = pr_feedback(sample, model, schedule, state=CodecState())
        assert trace.final.shape == (1, 2, 8, 8)

    def test_lambda_below_floor_rejected(self, model, tiny_planes):
        bad = LambdaSchedule.model_construct(values=[1.0, 0.0, 1.0], subset_size=0)
        with pytest.raises(ConfigError):
            pr_feedback(tiny_planes[:2], model, bad, state=CodecState())

    def test_missing_schedule(self, model, tiny_planes):
        with pytest.raises(ConfigError):
            pr_feedback(tiny_planes[:2], model, None, state=CodecState())

    def test_too_many_steps(self, model, schedule, tiny_planes):
        with pytest.raises(RangeError):
            pr_feedback(tiny_planes[:2], model, schedule, state=CodecState(), steps=4)

    def test_statefulness_witness(self, model, schedule, tiny_planes):
        """Clearing LIF state between steps must change the trace for some input."""
        x = tiny_planes[:8]
        carried = pr_feedback(x, model, schedule, state=CodecState())
        outputs = []
        h_bar = np.zeros_like(x, dtype=np.float64)
        for t in range(1, 4):
            residual = Tensor((x - h_bar) / schedule[t])
            spikes, _ = model.encode_step(residual, t, LIFState())
            y, _, _ = model.decode_step(spikes, LIFState())
            h_bar = h_bar + schedule[t] * y.data
            outputs.append(y.data)
        assert any(not np.array_equal(a.data, b) for a, b in zip(carried.outputs, outputs))

    def test_reset_between_samples_matches_fresh_model(self, tiny_system, tiny_model_cfg, schedule, tiny_planes):
        model = _build(tiny_system, tiny_model_cfg, seed=5)
        pr_feedback(tiny_planes[:3], model, schedule)
        reset_codec_state(model)
        second = pr_feedback(tiny_planes[3:6], model, schedule)

        fresh = _build(tiny_system, tiny_model_cfg, seed=5)
        expected = pr_feedback(tiny_planes[3:6], fresh, schedule)
        np.testing.assert_array_equal(second.final.data, expected.final.data)
        np.testing.assert_array_equal(second.frames(), expected.frames())

    def test_reset_is_idempotent(self, model):
        reset_codec_state(model)
        reset_codec_state(model)
        assert model.state.encoder.at_rest and model.state.decoder.at_rest

    def test_no_pr_ablation_encodes_h_every_step(self, tiny_system, tiny_planes):
        model = _build(tiny_system, ModelConfig(hidden_width=64, progressive=False))
        trace = pr_feedback(tiny_planes[:2], model, None, state=CodecState())
        assert trace.lambdas == [1.0, 1.0, 1.0]
        np.testing.assert_allclose(
            trace.final.data, sum(y.data for y in trace.outputs), rtol=1e-12
        )


class TestVirtualDecoder:
    """The UT's virtual decoder and the BS decoder must agree bit for bit."""

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_bs_matches_ut(self, tiny_system, tiny_model_cfg, tiny_planes, dtype):
        model = _build(tiny_system, tiny_model_cfg, seed=9, dtype=dtype)
        schedule = LambdaSchedule(values=[1.0, 0.4, 0.2])
        trace = pr_feedback(tiny_planes, model, schedule, state=CodecState())
        partials = bs_reconstruct(trace.frames(), model, schedule)
        assert len(partials) == 4
        for ut, bs in zip(trace.partials, partials):
            np.testing.assert_array_equal(ut.data, bs)

    @pytest.fixture(scope="class")
    def desk_link(self):
        system = SystemConfig(n_t=16, n_c=32, n_s=16, cr=16, t_steps=4)
        model = _build(system, ModelConfig(hidden_width=1024), seed=11, dtype=np.float32)
        planes = np.random.default_rng(12).uniform(-5, 5, size=(1000, 2, 16, 16)).astype(np.float32)
        schedule = LambdaSchedule(values=[1.0, 0.5, 0.3, 0.2])
        trace = pr_feedback(planes, model, schedule, state=CodecState())
        return model, schedule, trace

    def test_desk_scale_batch_matches_ut(self, desk_link):
        model, schedule, trace = desk_link
        frames = trace.frames()
        assert frames.shape == (4, 1000, 32) and frames.any()
        partials = bs_reconstruct(frames, model, schedule)
        for ut, bs in zip(trace.partials, partials):
            np.testing.assert_array_equal(ut.data, bs)

    def test_each_sample_decodes_alone(self, desk_link):
        model, schedule, trace = desk_link
        frames = trace.frames()
        for i in range(0, 1000, 20):
            partials = bs_reconstruct(frames[:, i:i + 1, :], model, schedule)
            assert np.array_equal(partials[-1][0], trace.final.data[i]), i

    def test_batch_partition_does_not_matter(self, desk_link):
        model, schedule, trace = desk_link
        frames = trace.frames()
        chunks = [
            bs_reconstruct(frames[:, start:start + 137, :], model, schedule)[-1]
            for start in range(0, 1000, 137)
        ]
        np.testing.assert_array_equal(np.concatenate(chunks), trace.final.data)

    def test_over_the_wire(self, tiny_system, tiny_model_cfg, tiny_planes):
        model = _build(tiny_system, tiny_model_cfg, seed=9, dtype=np.float32)
        schedule = LambdaSchedule(values=[1.0, 0.4, 0.2])
        trace = pr_feedback(tiny_planes, model, schedule, state=CodecState())
        payloads = transmit(trace, 16)
        assert all(len(p) == 3 * 2 for p in payloads)
        frames = receive(payloads, 16, 3)
        np.testing.assert_array_equal(frames, trace.frames())
        np.testing.assert_array_equal(bs_reconstruct(frames, model, schedule)[-1], trace.final.data)


class TestCodeword:
    """Test cases for the packed codeword format."""

    def test_frame_bytes(self):
        assert frame_bytes(256) == 32
        assert frame_bytes(13) == 2

    def test_lsb_first(self):
        frames = np.zeros((2, 13))
        frames[0, 0] = 1
        frames[1, 8] = 1
        frames[1, 12] = 1
        assert pack_codeword(frames) == bytes([0x01, 0x00, 0x00, 0x11])

    def test_unpack_inverts_pack(self):
        frames = (np.random.default_rng(0).random((6, 21)) < 0.3).astype(np.float32)
        np.testing.assert_array_equal(unpack_codeword(pack_codeword(frames), 21, 6), frames)

    def test_non_binary_rejected(self):
        with pytest.raises(DataFormatError):
            pack_codeword(np.full((1, 8), 2.0))

    def test_wrong_payload_length(self):
        with pytest.raises(DataFormatError):
            unpack_codeword(b"\x00" * 5, 16, 3)


class TestEstimateLambda:
    """Test cases for estimate_lambda."""

    def test_first_factor_is_one(self, tiny_system, tiny_model_cfg, tiny_planes):
        lambdas = estimate_lambda(_build(tiny_system, tiny_model_cfg), tiny_planes)
        assert lambdas.values[0] == 1.0
        assert len(lambdas) == 3
        assert all(v >= LAMBDA_FLOOR for v in lambdas.values)
        assert lambdas.subset_size == len(tiny_planes)

    def test_oracle_decoder_hits_floor(self, tiny_system, tiny_model_cfg, tiny_planes):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        model.encoder.fc.bias.data[...] = 2.0
        h = tiny_planes[:1].astype(np.float64)
        model.decoder.skip.bias.data[...] = h.ravel()
        lambdas = estimate_lambda(model, h)
        assert lambdas.values[1] == LAMBDA_FLOOR

    def test_oracle_decoder_reproduces_channel(self, tiny_system, tiny_model_cfg, tiny_planes):
        model = _build(tiny_system, tiny_model_cfg)
        _zero_all(model)
        model.encoder.fc.bias.data[...] = 2.0
        h = tiny_planes[:1].astype(np.float64)
        model.decoder.skip.bias.data[...] = h.ravel()
        trace = pr_feedback(h, model, LambdaSchedule(values=[1.0, LAMBDA_FLOOR, 1.0]), state=CodecState(), steps=1)
        np.testing.assert_array_equal(trace.final.data, h)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_duplicated_subset_leaves_lambda_unchanged(self, tiny_system, tiny_model_cfg, tiny_planes, dtype):
        model = _build(tiny_system, tiny_model_cfg, seed=4, dtype=dtype)
        planes = tiny_planes.astype(dtype)
        once = estimate_lambda(model, planes)
        twice = estimate_lambda(model, np.concatenate([planes, planes]))
        np.testing.assert_allclose(once.values, twice.values, rtol=1e-10)

    def test_duplication_across_batches_float32(self):
        system = SystemConfig(n_t=16, n_c=32, n_s=16, cr=16, t_steps=4)
        model = _build(system, ModelConfig(hidden_width=256), seed=6, dtype=np.float32)
        planes = np.random.default_rng(13).uniform(-5, 5, size=(150, 2, 16, 16)).astype(np.float32)
        once = estimate_lambda(model, planes, batch_size=64)
        twice = estimate_lambda(model, np.concatenate([planes, planes]), batch_size=64)
        np.testing.assert_allclose(once.values, twice.values, rtol=1e-10)

    def test_restores_training_mode(self, tiny_system, tiny_model_cfg, tiny_planes):
        model = _build(tiny_system, tiny_model_cfg).train()
        estimate_lambda(model, tiny_planes)
        assert model.training

    def test_empty_subset(self, tiny_system, tiny_model_cfg):
        with pytest.raises(ConfigError):
            estimate_lambda(_build(tiny_system, tiny_model_cfg), np.zeros((0, 2, 8, 8)))

    def test_zero_energy_subset(self, tiny_system, tiny_model_cfg):
        with pytest.raises(ConfigError):
            estimate_lambda(_build(tiny_system, tiny_model_cfg), np.zeros((2, 2, 8, 8)))

    def test_no_pr_schedule_is_all_ones(self, tiny_system, tiny_planes):
        model = _build(tiny_system, ModelConfig(hidden_width=64, progressive=False))
        assert estimate_lambda(model, tiny_planes).values == [1.0, 1.0, 1.0]
