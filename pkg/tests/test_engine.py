import numpy as np
import pytest

from qpde import engine
from qpde.errors import ConfigurationError, DimensionError, UsageError

from helpers import fd_gradcheck


def t64(a, rg=False):
    return engine.tensor(np.array(a, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        eye = t64(np.eye(2))
        out = engine.matmul(eye, a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        out = engine.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_grad_of_sum_is_ones_bt(self):
        a = t64(np.random.default_rng(0).normal(size=(3, 4)), rg=True)
        b = t64(np.random.default_rng(1).normal(size=(4, 2)))
        loss = engine.tsum(engine.matmul(a, b))
        engine.backward(loss)
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            engine.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_fd(self):
        rng = np.random.default_rng(2)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(engine.matmul(ts[0], ts[1]),
                                              engine.matmul(ts[0], ts[1]))),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])


class TestConv1d:
    def test_scaling_kernel(self):
        out = engine.conv1d(t64([[1.0, 2.0, 3.0]]), t64([[[2.0]]]))
        np.testing.assert_array_equal(out.data, [[2.0, 4.0, 6.0]])

    def test_shift_kernel_zero_pad(self):
        out = engine.conv1d(t64([[5.0, 6.0, 7.0]]), t64([[[1.0, 0.0, 0.0]]]), padding="zero")
        np.testing.assert_array_equal(out.data, [[0.0, 5.0, 6.0]])

    def test_circular_average_constant(self):
        k = np.full((1, 1, 3), 1.0 / 3.0)
        out = engine.conv1d(t64(np.full((1, 8), 4.0)), t64(k), padding="circular")
        np.testing.assert_allclose(out.data, np.full((1, 8), 4.0), rtol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            engine.conv1d(t64(np.ones((1, 4))), t64(np.ones((1, 1, 2))))

    def test_delta_kernel_identity(self):
        x = np.random.default_rng(3).normal(size=(2, 8))
        k = np.zeros((2, 2, 3))
        k[0, 0, 1] = 1.0
        k[1, 1, 1] = 1.0
        out = engine.conv1d(t64(x), t64(k), padding="circular")
        np.testing.assert_allclose(out.data, x, rtol=1e-12)

    @pytest.mark.parametrize("padding", ["zero", "circular"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_fd(self, padding, stride):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 8))
        w = rng.normal(size=(5, 3, 3))
        b = rng.normal(size=(5,))
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(
                engine.conv1d(ts[0], ts[1], ts[2], padding=padding, stride=stride),
                engine.conv1d(ts[0], ts[1], ts[2], padding=padding, stride=stride))),
            [x, w, b], n_probes=60)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3, 8))
        w = rng.normal(size=(2, 3, 3))
        full = engine.conv1d(t64(x), t64(w)).data
        for i in range(4):
            single = engine.conv1d(t64(x[i]), t64(w)).data
            np.testing.assert_allclose(full[i], single, rtol=1e-12)


class TestElementwise:
    def test_gelu_zero(self):
        assert engine.gelu(t64([0.0])).data[0] == 0.0

    def test_mean(self):
        assert engine.mean(t64([1.0, 2.0, 3.0])).item() == pytest.approx(2.0)

    def test_group_norm_constant_is_zero(self):
        x = t64(np.full((1, 4, 8), 3.5))
        out = engine.group_norm(x, num_groups=2)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_trailing_broadcast_ok(self):
        out = engine.add(t64(np.ones((2, 3, 4))), t64(np.ones((3, 4))))
        assert out.shape == (2, 3, 4)

    def test_mutual_expansion_rejected(self):
        with pytest.raises(DimensionError):
            engine.add(t64(np.ones((3, 1))), t64(np.ones((1, 3))))

    @pytest.mark.parametrize("op", [engine.add, engine.sub, engine.mul])
    def test_binary_fd(self, op):
        rng = np.random.default_rng(6)
        fd_gradcheck(lambda ts: engine.tsum(engine.mul(op(ts[0], ts[1]), op(ts[0], ts[1]))),
                     [rng.normal(size=(3, 4)), rng.normal(size=(4,))], n_probes=32)

    @pytest.mark.parametrize("op", [engine.gelu, engine.relu, engine.tanh, engine.neg])
    def test_unary_fd(self, op):
        rng = np.random.default_rng(7)
        fd_gradcheck(lambda ts: engine.tsum(engine.mul(op(ts[0]), op(ts[0]))),
                     [rng.normal(size=(40,)) + 0.05], n_probes=40)

    def test_power_fd(self):
        rng = np.random.default_rng(8)
        fd_gradcheck(lambda ts: engine.tsum(engine.power(ts[0], 1.7)),
                     [rng.uniform(0.5, 2.0, size=(20,))], n_probes=20)

    def test_group_norm_fd(self):
        rng = np.random.default_rng(9)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mul(
                engine.group_norm(ts[0], 2, weight=ts[1], bias=ts[2]),
                engine.group_norm(ts[0], 2, weight=ts[1], bias=ts[2]))),
            [rng.normal(size=(2, 4, 6)), rng.normal(size=(4,)), rng.normal(size=(4,))],
            n_probes=60)


class TestStructural:
    @pytest.mark.parametrize("make", [
        lambda ts: engine.concat([ts[0], ts[0]], axis=1),
        lambda ts: engine.narrow(ts[0], 1, 1, 2),
        lambda ts: engine.pad_axis(ts[0], -1, 7, start=2),
        lambda ts: engine.upsample_nearest(ts[0], 3),
        lambda ts: engine.reshape(ts[0], (4, 3)),
        lambda ts: engine.transpose(ts[0], (1, 0)),
    ])
    def test_fd(self, make):
        rng = np.random.default_rng(10)
        fd_gradcheck(lambda ts: engine.tsum(engine.mul(make(ts), make(ts))),
                     [rng.normal(size=(3, 4))], n_probes=12)

    def test_mean_sum_fd(self):
        rng = np.random.default_rng(11)
        fd_gradcheck(
            lambda ts: engine.tsum(engine.mean(engine.mul(ts[0], ts[0]), axis=0)),
            [rng.normal(size=(3, 5))], n_probes=15)
        fd_gradcheck(
            lambda ts: engine.mean(engine.tsum(engine.mul(ts[0], ts[0]), axis=1, keepdims=True)),
            [rng.normal(size=(3, 5))], n_probes=15)


class TestBackward:
    def test_square_at_three(self):
        x = t64([3.0], rg=True)
        y = engine.tsum(engine.mul(x, x))
        engine.backward(y)
        assert x.grad[0] == pytest.approx(6.0)

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0], rg=True)
        with pytest.raises(UsageError):
            engine.backward(engine.mul(x, x))

    def test_grad_accumulates_across_uses(self):
        x = t64([2.0], rg=True)
        y = engine.add(engine.mul(x, x), engine.mul(x, 3.0))
        engine.backward(engine.tsum(y))
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


class TestImmutability:
    def test_ops_do_not_mutate_inputs(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 4, 8))
        w = rng.normal(size=(3, 4, 3))
        xs, ws = x.copy(), w.copy()
        xt, wt = t64(x, rg=True), t64(w, rg=True)
        out = engine.conv1d(xt, wt, padding="circular")
        out = engine.gelu(out)
        out = engine.group_norm(out, 1)
        engine.backward(engine.tsum(engine.mul(out, out)))
        np.testing.assert_array_equal(xt.data, xs)
        np.testing.assert_array_equal(wt.data, ws)


class TestDtype:
    def test_default_float32(self):
        assert engine.tensor([1.0, 2.0]).dtype == np.float32

    def test_float64_preserved(self):
        assert t64([1.0]).dtype == np.float64

    def test_reduction_accumulates_in_float64(self):
        # 1 + 2^-24 is not representable in float32; float64 accumulation keeps
        # the sum of many such terms from collapsing.
        x = engine.tensor(np.full(1 << 12, np.float32(2 ** -24)))
        big = engine.tensor(np.array([1.0], dtype=np.float32))
        s = engine.tsum(engine.concat([big, x], axis=0))
        assert s.item() > 1.0


class TestCounter:
    def test_matmul_counts(self):
        c = engine.OpCounter()
        with engine.count_ops(c):
            engine.matmul(t64(np.ones((2, 3))), t64(np.ones((3, 5))))
        assert c.kind_mults("matmul") == 2 * 3 * 5

    def test_conv_counts(self):
        c = engine.OpCounter()
        with engine.count_ops(c):
            engine.conv1d(t64(np.ones((3, 8))), t64(np.ones((5, 3, 3))),
                          bias=t64(np.ones(5)))
        assert c.kind_mults("conv") == 5 * 3 * 3 * 8
        assert c.by_kind["conv"][1] == 5 * 3 * 3 * 8
