import numpy as np
import pytest

from qpde import engine, rescale
from qpde.errors import ConfigurationError
from qpde.models import ModelSpec, build_model
from qpde.rescale import ScaleSpec, resize_bilinear, resize_circular, resize_linear

from helpers import fd_gradcheck


def t64(a):
    return engine.tensor(np.array(a, dtype=np.float64))


class TestResizeLinear:
    def test_endpoint_alignment(self):
        out = resize_linear(t64([0.0, 1.0]), 3)
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])

    def test_constant_preserved(self):
        out = resize_linear(t64(np.full((3, 7), 2.5)), 13)
        np.testing.assert_allclose(out.data, 2.5)

    def test_identity_when_same_size(self):
        x = np.random.default_rng(0).normal(size=(2, 9))
        np.testing.assert_array_equal(resize_linear(t64(x), 9).data, x)

    def test_reproduces_affine_functions(self):
        xs = np.linspace(0.0, 1.0, 11)
        f = 3.0 * xs - 1.2
        out = resize_linear(t64(f), 31).data
        expect = 3.0 * np.linspace(0.0, 1.0, 31) - 1.2
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        u, v = rng.normal(size=12), rng.normal(size=12)
        a, b = 1.7, -0.4
        lhs = resize_linear(t64(a * u + b * v), 30).data
        rhs = a * resize_linear(t64(u), 30).data + b * resize_linear(t64(v), 30).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_up_then_down_identity(self):
        # identity holds when the fine grid contains the coarse knots
        # (M-1 a multiple of N-1); between refined knots that straddle a
        # coarse kink the interpolant takes a chord, so general M >= N fails.
        rng = np.random.default_rng(2)
        x = rng.normal(size=16)
        for m in (31, 46, 61):
            back = resize_linear(resize_linear(t64(x), m), 16)
            np.testing.assert_allclose(back.data, x, atol=1e-12)

    def test_down_then_up_not_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=32)
        down = resize_linear(t64(x), 8)
        back = resize_linear(down, 32)
        assert not np.allclose(back.data, x)

    def test_target_too_small(self):
        with pytest.raises(ConfigurationError):
            resize_linear(t64([1.0, 2.0]), 1)

    def test_fd(self):
        rng = np.random.default_rng(4)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(resize_linear(ts[0], 11),
                                              resize_linear(ts[0], 11))),
            [rng.normal(size=(2, 6))], n_probes=12)


class TestResizeCircular:
    def test_constant_preserved(self):
        out = resize_circular(t64(np.full(8, 1.5)), 12)
        np.testing.assert_allclose(out.data, 1.5)

    def test_identity_when_same_size(self):
        x = np.random.default_rng(5).normal(size=8)
        np.testing.assert_array_equal(resize_circular(t64(x), 8).data, x)

    def test_periodicity_preserved(self):
        # a sampled sinusoid stays a sampled sinusoid of the same frequency
        n, m = 16, 24
        x = np.sin(2 * np.pi * np.arange(n) / n)
        out = resize_circular(t64(x), m).data
        # interpolation error is bounded, and the wrap sample keeps out[0]=x[0]
        assert out[0] == pytest.approx(0.0, abs=1e-12)

    def test_fd(self):
        rng = np.random.default_rng(6)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(resize_circular(ts[0], 10),
                                              resize_circular(ts[0], 10))),
            [rng.normal(size=(2, 6))], n_probes=12)


class TestResizeBilinear:
    def test_constant(self):
        out = resize_bilinear(t64(np.full((5, 7), 3.3)), (9, 4))
        np.testing.assert_allclose(out.data, 3.3)
        assert out.shape == (9, 4)

    def test_reproduces_bilinear_functions(self):
        xs = np.linspace(0, 1, 9)
        ys = np.linspace(0, 1, 7)
        f = 2.0 * xs[:, None] - 0.5 * ys[None, :] + 1.1 * xs[:, None] * ys[None, :]
        out = resize_bilinear(t64(f), (17, 13)).data
        xs2 = np.linspace(0, 1, 17)
        ys2 = np.linspace(0, 1, 13)
        expect = 2.0 * xs2[:, None] - 0.5 * ys2[None, :] + 1.1 * xs2[:, None] * ys2[None, :]
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_up_down_identity_batched(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 5))
        up = resize_bilinear(t64(x), (11, 9))
        back = resize_bilinear(up, (6, 5))
        np.testing.assert_allclose(back.data, x, atol=1e-12)

    def test_fd(self):
        rng = np.random.default_rng(8)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(resize_bilinear(ts[0], (7, 5)),
                                              resize_bilinear(ts[0], (7, 5)))),
            [rng.normal(size=(4, 3))], n_probes=12)


class TestScaleSpec:
    def test_snapping_fno(self):
        s = ScaleSpec.for_model(0.7, 64, "fno1d")
        assert s.network_size == 32  # round(44.8)=45; |45-32| < |45-64|
        assert ScaleSpec.for_model(0.2, 64, "fno1d").network_size == 16

    def test_snapping_unet(self):
        assert ScaleSpec.for_model(0.7, 64, "unet1d").network_size == 48
        assert ScaleSpec.for_model(0.5, 64, "unet1d").network_size == 32

    def test_tie_snaps_downward(self):
        # round(0.75*32)=24 is equidistant from 16 and 32 -> 16
        assert ScaleSpec.for_model(0.75, 32, "fno1d").network_size == 16

    def test_factor_one_is_identity(self):
        s = ScaleSpec.for_model(1.0, 48, "unet1d")
        assert s.identity and s.network_size == 48

    def test_bad_factor(self):
        with pytest.raises(ConfigurationError):
            ScaleSpec.for_model(0.0, 64, "fno1d")
        with pytest.raises(ConfigurationError):
            ScaleSpec.for_model(1.5, 64, "fno1d")


class TestScaledModel:
    def _model(self):
        spec = ModelSpec(architecture="fno1d", grid_size=32, width=4, modes=4, layers=2)
        return build_model(spec, 0)

    def test_identity_wrapper_bit_identical(self):
        model = self._model()
        wrapped = rescale.wrap_scaled_model(model, ScaleSpec.for_model(1.0, 32, "fno1d"))
        x = engine.tensor(np.random.default_rng(9).normal(size=(1, 32)).astype(np.float32))
        np.testing.assert_array_equal(wrapped.forward(x).data, model.forward(x).data)

    def test_scaled_forward_shapes(self):
        model = self._model()
        wrapped = rescale.wrap_scaled_model(model, ScaleSpec.for_model(0.5, 32, "fno1d"))
        x = engine.tensor(np.zeros((1, 32), dtype=np.float32))
        assert wrapped.forward(x).shape == (1, 32)

    def test_unsupported_size_rejected(self):
        model = self._model()
        with pytest.raises(ConfigurationError):
            rescale.wrap_scaled_model(model, ScaleSpec(0.5, 32, 20))

    def test_fd_through_wrapper(self):
        spec = ModelSpec(architecture="fno1d", grid_size=16, width=3, modes=3, layers=1)
        model = build_model(spec, 1)
        wrapped = rescale.wrap_scaled_model(model, ScaleSpec.for_model(0.5, 16, "fno1d"))

        def build(ts):
            m = build_model(spec, 1)
            m.fc0.weight = ts[0]
            w = rescale.wrap_scaled_model(m, ScaleSpec.for_model(0.5, 16, "fno1d"))
            out = w.forward(ts[1])
            return engine.tsum(engine.mul(out, out))

        rng = np.random.default_rng(10)
        fd_gradcheck(build, [np.array(wrapped.inner.fc0.weight.data, dtype=np.float64),
                             rng.normal(size=(1, 16))], n_probes=20)

    def test_resize_op_instrumented(self):
        model = self._model()
        wrapped = rescale.wrap_scaled_model(model, ScaleSpec.for_model(0.5, 32, "fno1d"))
        c = engine.OpCounter()
        with engine.count_ops(c):
            wrapped.forward(engine.tensor(np.zeros((1, 32), dtype=np.float32)))
        assert c.kind_events("resize") == 2
        # 2 multiplies and 4 adds per output point (16 down, 32 up)
        assert c.by_kind["resize"] == [2 * (16 + 32), 4 * (16 + 32)]
