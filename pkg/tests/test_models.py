import numpy as np
import pytest

from qpde import engine, models, quant, spectral
from qpde.errors import ConfigurationError, DimensionError
from qpde.models import ModelSpec, build_model

from helpers import fd_gradcheck


def small_fno(**kw):
    base = dict(architecture="fno1d", grid_size=16, in_fields=1, out_fields=1,
                input_steps=1, output_steps=1, layers=2, width=4, modes=4)
    base.update(kw)
    return ModelSpec(**base)


def small_unet(**kw):
    base = dict(architecture="unet1d", grid_size=16, in_fields=1, out_fields=1,
                input_steps=1, output_steps=1, hidden_channels=2)
    base.update(kw)
    return ModelSpec(**base)


class TestBuild:
    def test_fno_param_count_matches_hand_formula(self):
        spec = small_fno(layers=4, width=8, modes=4, grid_size=64)
        model = build_model(spec, 0)
        # hand count: fc0 1*8+8, 4 spectral blocks 8*8*2*4 each, 4 pointwise
        # 8*8+8 each, fc1 8*128+128, fc2 128*1+1
        hand = (8 + 8) + 4 * 512 + 4 * 72 + (1024 + 128) + 129
        assert model.param_count() == hand
        assert models.fno_param_count(spec) == hand

    def test_same_seed_bit_identical(self):
        a = build_model(small_fno(), 42)
        b = build_model(small_fno(), 42)
        for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a = build_model(small_fno(), 1)
        b = build_model(small_fno(), 2)
        assert any(not np.array_equal(ta.data, tb.data)
                   for (_, ta), (_, tb) in zip(a.parameters(), b.parameters()))

    def test_too_many_modes_rejected(self):
        with pytest.raises(ConfigurationError):
            build_model(small_fno(grid_size=64, modes=40), 0)

    def test_unet_grid_divisibility(self):
        with pytest.raises(ConfigurationError):
            build_model(small_unet(grid_size=20), 0)

    def test_unknown_architecture(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(architecture="mlp", grid_size=16).validate()


class TestFNOForward:
    def test_zero_input_zero_final_layer_gives_zero(self):
        model = build_model(small_fno(), 0)
        model.fc2.weight.data[:] = 0.0
        model.fc2.bias.data[:] = 0.0
        out = model.forward(engine.tensor(np.zeros((1, 16))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_channel_mix_full_modes_is_identity(self):
        rng = np.random.default_rng(0)
        layer = models.SpectralConv1d("s", rng, 3, 3, modes=9)  # full modes for n=16
        w = np.zeros((3, 3, 2, 9), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, :] = 1.0
        layer.weight.data = w
        x = rng.normal(size=(3, 16))
        out = layer.forward(engine.tensor(np.array(x, dtype=np.float64)))
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_not_shift_invariant_smoke(self):
        model = build_model(small_fno(), 0)
        x = np.random.default_rng(1).normal(size=(1, 16)).astype(np.float32)
        a = model.forward(engine.tensor(x)).data
        b = model.forward(engine.tensor(x + 1.0)).data
        assert not np.allclose(a, b)

    def test_high_modes_do_not_contribute(self):
        rng = np.random.default_rng(2)
        layer = models.SpectralConv1d("s", rng, 1, 1, modes=4)
        n = 32
        tone = np.cos(2 * np.pi * 9 * np.arange(n) / n)  # bin 9 > modes 4
        out = layer.forward(engine.tensor(tone[None]))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_wrong_channel_count(self):
        model = build_model(small_fno(), 0)
        with pytest.raises(DimensionError):
            model.forward(engine.tensor(np.zeros((2, 16))))

    def test_batched_equals_single(self):
        model = build_model(small_fno(), 3)
        x = np.random.default_rng(3).normal(size=(4, 1, 16)).astype(np.float32)
        full = model.forward(engine.tensor(x)).data
        for i in range(4):
            np.testing.assert_allclose(model.forward(engine.tensor(x[i])).data,
                                       full[i], rtol=2e-5, atol=1e-6)

    def test_forward_pure(self):
        model = build_model(small_fno(), 4)
        x = engine.tensor(np.random.default_rng(4).normal(size=(1, 16)).astype(np.float32))
        np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)

    def test_fd_through_model(self):
        spec = small_fno(grid_size=8, modes=3, layers=1, width=3)
        model = build_model(spec, 5)
        names = [n for n, _ in model.parameters()]
        arrays = [np.array(t.data, dtype=np.float64) for _, t in model.parameters()]
        x = np.random.default_rng(5).normal(size=(1, 8))

        def build(ts):
            m = build_model(spec, 5)
            m.load_param_arrays({n: t.data for n, t in zip(names, ts)})
            for _, p in m.parameters():
                p.requires_grad = False
            # route the probe tensors into the graph by swapping them in
            for (n, p), t in zip(m.parameters(), ts):
                _swap(m, n, t)
            out = m.forward(engine.tensor(x))
            return engine.tsum(engine.mul(out, out))

        def _swap(m, name, t):
            for layer in m._mac:
                for pn, pt in layer.parameters():
                    if pn == name:
                        if pn.endswith("weight"):
                            layer.weight = t
                        else:
                            layer.bias = t

        fd_gradcheck(build, arrays, n_probes=50, h=1e-6)


class TestUNetForward:
    def test_shape_contract(self):
        spec = small_unet(grid_size=64, in_fields=1, input_steps=5, hidden_channels=2)
        model = build_model(spec, 0)
        out = model.forward(engine.tensor(np.zeros((5, 64), dtype=np.float32)))
        assert out.shape == (1, 64)

    def test_deterministic_forward(self):
        model = build_model(small_unet(), 1)
        x = engine.tensor(np.random.default_rng(6).normal(size=(1, 16)).astype(np.float32))
        np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)

    def test_indivisible_length_rejected(self):
        model = build_model(small_unet(grid_size=16), 0)
        with pytest.raises(ConfigurationError):
            model.forward(engine.tensor(np.zeros((1, 12), dtype=np.float32)))

    def test_fd_on_a_weight(self):
        spec = small_unet(grid_size=8, hidden_channels=2)
        model = build_model(spec, 7)
        x = np.random.default_rng(7).normal(size=(1, 8))
        w0 = np.array(model.head.weight.data, dtype=np.float64)

        def build(ts):
            m = build_model(spec, 7)
            m.head.weight = ts[0]
            out = m.forward(engine.tensor(x))
            return engine.tsum(engine.mul(out, out))

        fd_gradcheck(build, [w0], n_probes=2)


class TestEnumeration:
    def test_mac_layer_order_fno(self):
        model = build_model(small_fno(layers=2), 0)
        names = [l.name for l in model.mac_layers()]
        assert names == ["fc0", "block0.spectral", "block0.pointwise",
                         "block1.spectral", "block1.pointwise", "fc1", "fc2"]

    def test_parameters_stable_and_unique(self):
        model = build_model(small_unet(), 0)
        names = [n for n, _ in model.parameters()]
        assert len(names) == len(set(names))
        assert names == [n for n, _ in model.parameters()]


class TestQuantizedModel:
    def test_attach_exempts_first_and_last(self):
        model = build_model(small_fno(layers=2), 0)
        quant.attach_quantizers(model, quant.QuantRegime(8, 8))
        mac = model.mac_layers()
        assert mac[0].quant is None and mac[-1].quant is None
        assert all(l.quant is not None for l in mac[1:-1])

    def test_too_few_layers_rejected(self):
        class Stub:
            def mac_layers(self):
                return [1, 2]

        with pytest.raises(ConfigurationError):
            quant.quantizable_mask(2)

    def test_disabled_quantizers_bit_identical(self):
        model = build_model(small_fno(), 1)
        x = engine.tensor(np.random.default_rng(8).normal(size=(1, 16)).astype(np.float32))
        ref = model.forward(x).data.copy()
        batches = [x]
        cal = quant.calibrate_model(model, batches, quant.QuantRegime(8, 8))
        quant.attach_quantizers(model, quant.QuantRegime(8, 8), cal)
        quant.set_quantizers_enabled(model, False)
        np.testing.assert_array_equal(model.forward(x).data, ref)

    def test_w16a16_close_to_float_on_fixed_batch(self):
        model = build_model(small_fno(grid_size=32, width=8, modes=8), 2)
        rng = np.random.default_rng(9)
        x = engine.tensor(rng.normal(size=(8, 1, 32)).astype(np.float32))
        target = rng.normal(size=(8, 1, 32)).astype(np.float32)
        ref = model.forward(x).data
        mse_float = float(np.mean((ref - target) ** 2))
        cal = quant.calibrate_model(model, [x], quant.QuantRegime(16, 16))
        quant.attach_quantizers(model, quant.QuantRegime(16, 16), cal)
        mse_q = float(np.mean((model.forward(x).data - target) ** 2))
        assert mse_q == pytest.approx(mse_float, rel=1e-6)

    def test_calibration_observes_spectral_input(self):
        model = build_model(small_fno(), 3)
        x = engine.tensor(np.random.default_rng(10).normal(size=(2, 1, 16)).astype(np.float32))
        collected = quant.collect_layer_inputs(model, [x])
        assert "block0.spectral" in collected
        assert collected["block0.spectral"].size > 0
