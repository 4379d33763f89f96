from fractions import Fraction

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import layered_jscc.schemes as schemes
from conftest import CIFAR_N, NOISELESS, gen, make
from layered_jscc.channel import ChannelKind, ChannelSpec, average_power
from layered_jscc.errors import EmptyBatch, InvalidM, ShapeMismatch
from layered_jscc.schemes import (Feedback, LayerPlan, MaskSample, SchemeKind, baseline_forward,
                                  estimate_receiver_output, forward_layers, multi_decoder_forward,
                                  multi_layer_loss, residual_forward, residual_trace, sample_mask,
                                  single_decoder_forward)
from layered_jscc.training import batch_loss

SNR5 = ChannelSpec(snr_db=5.0)


class TestLayerPlan:
    def test_from_ratios(self, plan2):
        assert plan2.bandwidths == (256, 256)
        assert plan2.ratios == (Fraction(1, 12), Fraction(1, 12))
        assert plan2.total == 512 and plan2.cumulative == (256, 512)

    def test_rejects_fractional_symbols(self):
        with pytest.raises(ValueError):
            LayerPlan.from_ratios(["1/7"], CIFAR_N)

    @pytest.mark.parametrize("bad", [(), (0,), (256, -1)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            LayerPlan(bad, CIFAR_N)

    def test_dict_round_trip(self, plan2):
        assert LayerPlan.from_dict(plan2.to_dict()) == plan2


class TestStructure:
    def test_component_counts(self):
        plan = LayerPlan((256,) * 3, CIFAR_N)
        multi = make("multi_decoder", plan)
        assert (len(multi.encoders), len(multi.decoders)) == (1, 3)
        res = make("residual", plan)
        assert (len(res.encoders), len(res.decoders)) == (3, 3)
        single = make("single_decoder", plan)
        assert (len(single.encoders), len(single.decoders)) == (1, 1)
        assert single.decoders[0].input_width == 2 * 768
        base = make("single_layer_baseline", plan)
        assert base.plan.bandwidths == (768,)
        assert base.decoders[0].input_width == 2 * 768

    def test_five_layer_decoder_width(self):
        model = make("multi_decoder", LayerPlan.from_ratios(["1/12"] * 5, CIFAR_N))
        assert model.decoders[-1].input_width == 2 * 1280

    def test_baseline_smaller_than_two_decoders(self, plan2):
        assert make("single_layer_baseline", plan2).parameter_count() < make("multi_decoder", plan2).parameter_count()

    def test_seeded_construction(self, plan2):
        a, b = make("residual", plan2, seed=4), make("residual", plan2, seed=4)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        c = make("residual", plan2, seed=5)
        assert not torch.equal(a.encoders[0].net[0].weight, c.encoders[0].net[0].weight)

    def test_construction_leaves_global_rng(self, plan2):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        make("multi_decoder", plan2)
        assert torch.equal(torch.rand(3), expected)

    def test_wrong_kind_rejected(self, plan2, images):
        with pytest.raises(ValueError):
            multi_decoder_forward(make("residual", plan2), images, SNR5)
        with pytest.raises(ValueError):
            baseline_forward(make("multi_decoder", plan2), images, SNR5)


class TestMultiDecoder:
    def test_outputs(self, plan2, images):
        outs = multi_decoder_forward(make("multi_decoder", plan2), images, SNR5, gen())
        assert len(outs) == 2 and all(o.shape == images.shape for o in outs)

    def test_single_layer_equals_baseline(self, images):
        plan = LayerPlan((512,), CIFAR_N)
        multi = make("multi_decoder", plan, seed=3)
        base = make("single_layer_baseline", plan, seed=3)
        (a,) = multi_decoder_forward(multi, images, SNR5, gen(1))
        b = baseline_forward(base, images, SNR5, gen(1))
        assert torch.equal(a, b)

    def test_layer_decoder_ignores_later_blocks(self, plan2, images, monkeypatch):
        model = make("multi_decoder", plan2)
        seen = []
        orig = model.decoders[0].forward
        monkeypatch.setattr(model.decoders[0], "forward", lambda z: seen.append(z.shape) or orig(z))
        multi_decoder_forward(model, images, SNR5, gen())
        assert seen == [torch.Size([4, 512])]


def _record_power(monkeypatch):
    sent = []
    real = schemes.transmit

    def spy(blocks, *a, **kw):
        sent.extend(blocks)
        return real(blocks, *a, **kw)

    monkeypatch.setattr(schemes, "transmit", spy)
    return sent


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_per_layer_power(kind, plan2, images, monkeypatch):
    sent = _record_power(monkeypatch)
    model = make(kind, plan2)
    forward_layers(model, images, SNR5, gen(), m=2)
    assert sent
    for block in sent:
        torch.testing.assert_close(average_power(block), torch.ones(block.shape[0]), rtol=1e-6, atol=0)
    widths = {b.shape[1] for b in sent}
    assert widths == ({1024} if kind is SchemeKind.SINGLE_LAYER_BASELINE else {512})


class TestMultiLayerLoss:
    def test_zero_distortion(self, images):
        assert multi_layer_loss(images, [images, images.clone()]).item() == 0.0

    def test_layer_average(self):
        x = torch.zeros(5, 3, 4, 4, dtype=torch.float64)
        r1 = torch.full_like(x, 0.02 ** 0.5)
        r2 = torch.full_like(x, 0.01 ** 0.5)
        assert multi_layer_loss(x, [r1, r2]).item() == pytest.approx(0.015, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), layers=st.integers(1, 4), batch=st.integers(1, 5))
    def test_brute_force_double_sum(self, seed, layers, batch):
        g = gen(seed)
        x = torch.rand(batch, 3, 4, 4, dtype=torch.float64, generator=g)
        recons = [torch.rand(batch, 3, 4, 4, dtype=torch.float64, generator=g) for _ in range(layers)]
        n = x[0].numel()
        total = 0.0
        for i in range(layers):
            for j in range(batch):
                total += sum((float(a) - float(b)) ** 2 for a, b in
                             zip(x[j].flatten(), recons[i][j].flatten())) / n
        expected = total / (layers * batch)
        assert abs(multi_layer_loss(x, recons).item() - expected) < 1e-9

    def test_empty_batch(self):
        x = torch.zeros(0, 3, 4, 4)
        with pytest.raises(EmptyBatch):
            multi_layer_loss(x, [x])

    def test_shape_mismatch(self, images):
        with pytest.raises(ShapeMismatch):
            multi_layer_loss(images, [images[:, :, :16]])


class TestMask:
    def test_single_layer_always_full(self):
        plan = LayerPlan((512,), CIFAR_N)
        g = gen()
        assert {sample_mask(plan, g).prefix_symbols for _ in range(50)} == {512}

    def test_uniform_frequencies(self, plan2):
        g = gen(1)
        draws = [sample_mask(plan2, g).prefix_symbols for _ in range(10_000)]
        assert set(draws) == {256, 512}
        assert abs(draws.count(256) / len(draws) - 0.5) <= 0.02

    def test_weights(self, plan2):
        g = gen(2)
        draws = [sample_mask(plan2, g, weights=[0.9, 0.1]).prefix_symbols for _ in range(5000)]
        assert abs(draws.count(256) / len(draws) - 0.9) <= 0.02

    @given(bws=st.lists(st.integers(1, 40), min_size=1, max_size=6), seed=st.integers(0, 1000))
    def test_prefix_structure(self, bws, seed):
        plan = LayerPlan(tuple(bws), 3072)
        mask = sample_mask(plan, gen(seed))
        assert mask.prefix_symbols in plan.cumulative
        t = mask.as_tensor()
        ones = int(t.sum())
        assert ones == 2 * mask.prefix_symbols
        assert torch.all(t[:ones] == 1) and torch.all(t[ones:] == 0)


class TestSingleDecoder:
    def test_full_mask_bit_identical(self, plan2, images):
        model = make("single_decoder", plan2)
        full = MaskSample(512, 512)
        a = single_decoder_forward(model, images, SNR5, full, gen(8))
        b = single_decoder_forward(model, images, SNR5, None, gen(8))
        assert torch.equal(a, b)

    def test_masked_symbols_get_no_gradient(self, plan2, images):
        model = make("single_decoder", plan2)
        out = single_decoder_forward(model, images, SNR5, MaskSample(256, 512), gen())
        out.sum().backward()
        first = model.decoders[0].net[0].weight  # (in_depth, out, k, k)
        assert torch.all(first.grad[8:] == 0)
        assert first.grad[:8].abs().sum() > 0

    def test_mask_size_checked(self, plan2, images):
        with pytest.raises(ShapeMismatch):
            single_decoder_forward(make("single_decoder", plan2), images, SNR5, MaskSample(10, 20))

    def test_layers_share_one_transmission(self, plan2, images):
        model = make("single_decoder", plan2)
        outs = forward_layers(model, images, SNR5, gen(3))
        assert torch.equal(outs[1], single_decoder_forward(model, images, SNR5, None, gen(3)))
        assert torch.equal(outs[0], single_decoder_forward(model, images, SNR5, MaskSample(256, 512), gen(3)))


class TestResidual:
    def test_perfect_feedback_telescoping(self, plan2, images):
        model = make("residual", LayerPlan((256, 256, 256), CIFAR_N)).double()
        x = images.double()
        trace = residual_trace(model, x, NOISELESS, gen(), Feedback.PERFECT)
        for i in range(1, 3):
            running = sum(trace.contributions[:i])
            assert (trace.inputs[i] - (x - running)).abs().max().item() < 1e-12
            torch.testing.assert_close(trace.reconstructions[i - 1], running.clamp(0, 1))

    def test_residual_is_input_minus_first_output(self, plan2, images):
        model = make("residual", plan2)
        trace = residual_trace(model, images, NOISELESS, gen(), Feedback.PERFECT)
        # unclamped first contribution already lies in [0, 1]
        assert (trace.inputs[1] - (images - trace.reconstructions[0])).abs().max().item() < 1e-6

    def test_estimated_feedback_uses_average(self, plan2, images):
        model = make("residual", plan2)
        trace = residual_trace(model, images, SNR5, gen(1), Feedback.ESTIMATED, m=3)
        # replay: layer-1 transmission draws first, then the seed of the estimation generator
        g = gen(1)
        schemes._send(model, [model.encoders[0](images)], SNR5, g)
        est_seed = int(torch.randint(0, 2**62, (1,), generator=g))
        est = estimate_receiver_output(model, images, 1, SNR5, 3, gen(est_seed))
        torch.testing.assert_close(trace.inputs[1], images - est)

    def test_estimate_m1_is_one_realization(self, plan2, images):
        model = make("residual", plan2)
        est = estimate_receiver_output(model, images, 1, SNR5, 1, gen(4))
        (z_hat,) = schemes._send(model, [model.encoders[0](images)], SNR5, gen(4))
        assert torch.equal(est, model.decoders[0](z_hat))

    def test_estimate_noiseless_independent_of_m(self, plan2, images):
        model = make("residual", plan2)
        a = estimate_receiver_output(model, images, 2, NOISELESS, 1, gen())
        b = estimate_receiver_output(model, images, 2, NOISELESS, 7, gen())
        torch.testing.assert_close(a, b)

    @pytest.mark.slow
    def test_estimate_variance_scales_with_m(self, plan2, images):
        model = make("residual", plan2, seed=1).double()
        x = images.double()
        spec = ChannelSpec(snr_db=0.0)
        g = gen(9)
        with torch.no_grad():
            ones = torch.stack([estimate_receiver_output(model, x, 1, spec, 1, g) for _ in range(40)])
            hundreds = torch.stack([estimate_receiver_output(model, x, 1, spec, 100, g) for _ in range(40)])
        ratio = (ones.var(dim=0).mean() / hundreds.var(dim=0).mean()).item()
        assert 50 <= ratio <= 200

    def test_invalid_m(self, plan2, images):
        model = make("residual", plan2)
        with pytest.raises(InvalidM):
            estimate_receiver_output(model, images, 1, SNR5, 0)
        with pytest.raises(InvalidM):
            residual_forward(model, images, SNR5, m=0)

    def test_reconstructions_clamped(self, plan2, images):
        outs = residual_forward(make("residual", plan2), images, SNR5, m=2, generator=gen())
        assert all(o.min() >= 0 and o.max() <= 1 for o in outs)

    def test_later_decoders_are_signed(self, plan2):
        model = make("residual", plan2)
        assert model.decoders[0].output.value == "sigmoid"
        assert model.decoders[1].output.value == "signed_sigmoid"

    def test_fading_gain_shared_between_layers(self, plan2, images, monkeypatch):
        gains = []
        real = schemes.transmit

        def spy(blocks, spec, generator, power, independent, gain):
            gains.append(gain)
            return real(blocks, spec, generator, power, independent, gain)

        monkeypatch.setattr(schemes, "transmit", spy)
        model = make("residual", plan2, channel_kind=ChannelKind.RAYLEIGH_SLOW)
        residual_trace(model, images, ChannelSpec(ChannelKind.RAYLEIGH_SLOW, 10.0), gen(), Feedback.PERFECT)
        assert len(gains) == 2 and gains[0] is not None and gains[0] is gains[1]


def test_degenerate_schemes_agree(images):
    """With one layer every scheme is the same graph with the same initial loss."""
    plan = LayerPlan((256,), CIFAR_N)
    models = {k: make(k, plan, seed=11) for k in SchemeKind}
    ref = models[SchemeKind.MULTI_DECODER]
    for model in models.values():
        sd_a, sd_b = ref.state_dict(), model.state_dict()
        assert [v.shape for v in sd_a.values()] == [v.shape for v in sd_b.values()]
        assert all(torch.equal(a, b) for a, b in zip(sd_a.values(), sd_b.values()))
    losses = {k: batch_loss(m, images, SNR5, gen(2), gen(3), stage=1).item() for k, m in models.items()}
    assert len(set(losses.values())) == 1, losses
