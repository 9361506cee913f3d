"""Tensor core: finite-difference gradient checks, layer oracles, Adam and checkpoints."""

import numpy as np
import pytest

from helpers import fd_relative_error, leaf
from invsfm.errors import DegenerateBatch, MalformedRecord, MissingFile, NoForwardTrace, ShapeMismatch
from invsfm.nn import (
    AdamState,
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    adam_step,
    load_adam,
    load_arrays,
    load_module,
    no_grad,
    save_adam,
    save_arrays,
    save_module,
    xavier_init,
)
from invsfm.nn import functional as F
from invsfm.nn.tensor import exp, where_mask

TOL = 1e-4


def weighted(out, rng_seed=0):
    """A scalar with a generic gradient: sum(out * R) for a fixed random R."""
    r = np.random.default_rng(rng_seed).uniform(-1, 1, out.shape)
    return (out * Tensor(r)).sum()


def check(fn, *tensors, seed=0):
    rng = np.random.default_rng(seed)
    err = fd_relative_error(lambda: weighted(fn()), list(tensors), rng)
    assert err < TOL, err


def away_from_zero(rng, *shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, requires_grad=True)


class TestElementwiseGradients:
    def test_add_broadcast(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 4), leaf(rng, 1, 4)
        check(lambda: a + b, a, b)

    def test_sub_and_rsub(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 2, 3), leaf(rng, 3)
        check(lambda: (a - b) + (2.0 - a), a, b)

    def test_mul_broadcast(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 1)
        check(lambda: a * b, a, b)

    def test_div(self):
        rng = np.random.default_rng(3)
        a, b = leaf(rng, 5), leaf(rng, 5, lo=0.5, hi=2.0)
        check(lambda: a / b + a / 3.0, a, b)

    def test_neg_pow(self):
        rng = np.random.default_rng(4)
        a = leaf(rng, 6, lo=0.2, hi=2.0)
        check(lambda: -(a ** 3) + a ** 0.5, a)

    def test_abs(self):
        a = away_from_zero(np.random.default_rng(5), 8)
        check(lambda: a.abs(), a)

    def test_log_exp(self):
        rng = np.random.default_rng(6)
        a = leaf(rng, 7, lo=0.1, hi=3.0)
        check(lambda: a.log() + exp(a), a)

    def test_clamp(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.choice([-1.5, -0.5, 0.3, 0.9, 2.0], 12) + rng.uniform(-0.05, 0.05, 12), requires_grad=True)
        check(lambda: a.clamp(-1.0, 1.0), a)

    def test_where_mask(self):
        rng = np.random.default_rng(8)
        a = leaf(rng, 4, 4)
        mask = rng.random((4, 4)) < 0.5
        check(lambda: where_mask(a, mask), a)


class TestReductionGradients:
    @pytest.mark.parametrize("axis, keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
    def test_sum_mean(self, axis, keepdims):
        a = leaf(np.random.default_rng(9), 3, 4, 2)
        check(lambda: a.sum(axis, keepdims) + a.mean(axis, keepdims) * 2.0, a)

    def test_reshape(self):
        a = leaf(np.random.default_rng(10), 2, 6)
        check(lambda: a.reshape(3, 4) * a.reshape((3, 4)), a)

    def test_shared_input_accumulates(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        (a * a + a).sum().backward()
        np.testing.assert_allclose(a.grad, [7.0])


class TestLayerGradients:
    @pytest.mark.parametrize("kernel, stride", [(3, 1), (4, 2)])
    def test_conv2d(self, kernel, stride):
        rng = np.random.default_rng(11)
        conv = Conv2d(3, 4, kernel, stride).init_parameters(1, np.float64)
        x = leaf(rng, 2, 3, 7, 6)
        check(lambda: conv(x), x, conv.weight, conv.bias)

    def test_conv2d_no_bias(self):
        rng = np.random.default_rng(12)
        x, w = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3)
        check(lambda: F.conv2d(x, w, None, 1, 1), x, w)

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, training):
        rng = np.random.default_rng(13)
        bn = BatchNorm2d(3).init_parameters(0, np.float64)
        bn.gamma.data = rng.uniform(0.5, 1.5, 3)
        bn.beta.data = rng.uniform(-0.5, 0.5, 3)
        bn.running_mean = rng.normal(size=3)
        bn.running_var = rng.uniform(0.5, 2.0, 3)
        bn.train(training).freeze_stats()
        x = leaf(rng, 4, 3, 3, 3)
        check(lambda: bn(x), x, bn.gamma, bn.beta)

    def test_batch_norm_2d_input(self):
        rng = np.random.default_rng(14)
        g, b = leaf(rng, 5, lo=0.5, hi=1.5), leaf(rng, 5)
        x = leaf(rng, 6, 5)
        check(lambda: F.batch_norm(x, g, b, np.zeros(5), np.ones(5), True, update_stats=False), x, g, b)

    @pytest.mark.parametrize("op", [F.relu, F.leaky_relu])
    def test_rectifiers(self, op):
        a = away_from_zero(np.random.default_rng(15), 3, 5)
        check(lambda: op(a), a)

    def test_tanh(self):
        a = leaf(np.random.default_rng(16), 10, lo=-2, hi=2)
        check(lambda: F.tanh(a), a)

    @pytest.mark.parametrize("op", [F.softmax, F.log_softmax])
    @pytest.mark.parametrize("axis", [-1, 0])
    def test_softmax(self, op, axis):
        a = leaf(np.random.default_rng(17), 4, 3, lo=-3, hi=3)
        check(lambda: op(a, axis), a)

    def test_upsample(self):
        a = leaf(np.random.default_rng(18), 2, 2, 3, 2)
        check(lambda: F.upsample_nearest2x(a), a)

    def test_maxpool(self):
        rng = np.random.default_rng(19)
        # distinct values keep the argmax away from ties
        a = Tensor(rng.permutation(48).reshape(1, 3, 4, 4) / 10.0, requires_grad=True)
        check(lambda: F.maxpool2x2(a), a)

    def test_linear(self):
        rng = np.random.default_rng(20)
        lin = Linear(5, 3).init_parameters(2, np.float64)
        x = leaf(rng, 4, 5)
        check(lambda: lin(x), x, lin.weight, lin.bias)

    def test_concat(self):
        rng = np.random.default_rng(21)
        a, b = leaf(rng, 2, 1, 3, 3), leaf(rng, 2, 4, 3, 3)
        check(lambda: F.concat([a, b]) * F.concat([b, a]), a, b)


def naive_conv(x, w, b, stride, pad):
    (pt, pb), (pl, pr) = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    N, C, H, W = xp.shape
    O, _, kh, kw = w.shape
    Ho, Wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


class TestForwardOracles:
    @pytest.mark.parametrize("kernel, stride, H, W", [(3, 1, 5, 6), (4, 2, 6, 6), (4, 2, 7, 5)])
    def test_conv_matches_nested_loops(self, kernel, stride, H, W):
        rng = np.random.default_rng(22)
        conv = Conv2d(3, 2, kernel, stride).init_parameters(3, np.float64)
        conv.bias.data = rng.normal(size=2)
        x = rng.normal(size=(2, 3, H, W))
        got = conv(Tensor(x)).data
        pad = conv.padding(H, W)
        pad = ((pad, pad), (pad, pad)) if isinstance(pad, int) else pad
        np.testing.assert_allclose(got, naive_conv(x, conv.weight.data, conv.bias.data, stride, pad), atol=1e-12)
        assert got.shape[2:] == (((H + 1) // 2, (W + 1) // 2) if stride == 2 else (H, W))

    def test_batch_norm_train_statistics(self):
        rng = np.random.default_rng(23)
        bn = BatchNorm2d(2).init_parameters(0, np.float64)
        x = rng.normal(3.0, 2.0, (4, 2, 3, 3))
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_batch_norm_constant_channel(self):
        bn = BatchNorm2d(1).init_parameters(0, np.float64)
        out = bn(Tensor(np.full((2, 1, 2, 2), 5.0))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_batch_norm_frozen_stats(self):
        bn = BatchNorm2d(2).freeze_stats()
        bn(Tensor(np.random.default_rng(0).normal(size=(2, 2, 2, 2)).astype(np.float32)))
        np.testing.assert_array_equal(bn.running_mean, 0)
        np.testing.assert_array_equal(bn.running_var, 1)

    def test_batch_norm_eval_uses_running(self):
        bn = BatchNorm2d(1).init_parameters(0, np.float64).eval()
        bn.running_mean, bn.running_var = np.array([1.0]), np.array([4.0])
        out = bn(Tensor(np.full((1, 1, 1, 1), 5.0))).data
        np.testing.assert_allclose(out, 4.0 / np.sqrt(4.0 + 1e-5))

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            BatchNorm2d(3)(Tensor(np.ones((1, 3, 1, 1), np.float32)))

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.array([[1000.0, 1000.0], [-5.0, 5.0]]))
        np.testing.assert_allclose(F.softmax(x).data.sum(axis=1), 1.0)
        np.testing.assert_allclose(F.log_softmax(x).data[0], np.log(0.5))

    def test_maxpool_and_upsample(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(F.maxpool2x2(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
        up = F.upsample_nearest2x(Tensor(np.array([[[[1.0, 2.0]]]]))).data
        np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ShapeMismatch):
            F.concat([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])
        with pytest.raises(ShapeMismatch):
            F.maxpool2x2(Tensor(np.zeros((1, 1, 3, 2))))
        with pytest.raises(ShapeMismatch):
            F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestGraph:
    def test_backward_without_trace(self):
        with pytest.raises(NoForwardTrace):
            Tensor(np.ones(2)).sum().backward()

    def test_second_backward_fails(self):
        a = Tensor(np.ones(2), requires_grad=True)
        out = (a * 2.0).sum()
        out.backward()
        with pytest.raises(NoForwardTrace):
            out.backward()

    def test_no_grad(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad
        with pytest.raises(NoForwardTrace):
            out.backward()

    def test_non_scalar_needs_gradient(self):
        a = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_grads_accumulate_across_calls(self):
        a = Tensor(np.ones(2), requires_grad=True)
        (a * 3.0).sum().backward()
        (a * 3.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [6.0, 6.0])


class TestInitAndModules:
    def test_xavier_bound(self):
        w = xavier_init((64, 32, 3, 3), [0, 1])
        bound = np.sqrt(6.0 / (32 * 9 + 64 * 9))
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.95 * bound
        assert abs(w.mean()) < 0.01 * bound

    def test_seeded_init(self):
        a = Conv2d(2, 3).init_parameters(5)
        b = Conv2d(2, 3).init_parameters(5)
        c = Conv2d(2, 3).init_parameters(6)
        np.testing.assert_array_equal(a.weight.data, b.weight.data)
        assert (a.weight.data != c.weight.data).any()
        assert not a.bias.data.any()

    def test_state_dict_round_trip(self, tmp_path):
        class Net(Module):
            def __init__(self):
                self.conv = Conv2d(2, 3)
                self.bn = BatchNorm2d(3)
                self.heads = [Linear(3, 2), Linear(2, 1)]

        a = Net().init_parameters(1)
        a.bn.running_mean[:] = [1, 2, 3]
        save_module(a, tmp_path / "n.ckpt")
        b = load_module(Net().init_parameters(2), tmp_path / "n.ckpt")
        for (name, x), (_, y) in zip(sorted(a.state_dict().items()), sorted(b.state_dict().items())):
            np.testing.assert_array_equal(x, y, err_msg=name)
        assert "heads.1.weight" in a.state_dict()
        assert a.num_parameters() == 2 * 3 * 9 + 3 + 3 + 3 + 3 * 2 + 2 + 2 + 1

    def test_load_rejects_bad_state(self):
        lin = Linear(2, 2)
        with pytest.raises(KeyError):
            lin.load_state_dict({"weight": np.zeros((2, 2))})
        with pytest.raises(ValueError):
            lin.load_state_dict({"weight": np.zeros((3, 2)), "bias": np.zeros(2)})

    def test_unsupported_conv(self):
        with pytest.raises(ValueError):
            Conv2d(1, 1, 5, 1)


class TestAdam:
    def test_first_step(self):
        p = Linear(2, 1).init_parameters(0, np.float64).weight
        p.name = "w"
        before = p.data.copy()
        p.grad = np.array([[0.5, -2.0]])
        state = AdamState(lr=0.1)
        adam_step([p], state)
        # after bias correction m_hat = g and v_hat = g^2
        np.testing.assert_allclose(before - p.data, 0.1 * p.grad / (np.abs(p.grad) + 1e-8))

    def test_two_steps_by_hand(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.name = "p"
        state = AdamState(lr=0.01)
        m = v = 0.0
        x = 1.0
        for t, g in enumerate([0.3, -0.1], 1):
            p.grad = np.array([g])
            adam_step([p], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, [x], rtol=1e-14)

    def test_skips_params_without_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.name = "p"
        adam_step([p], AdamState())
        assert p.data[0] == 1.0

    def test_state_round_trip(self, tmp_path):
        p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        p.name = "p"
        p.grad = np.array([0.1, -0.2], np.float32)
        state = AdamState(lr=1e-3)
        adam_step([p], state)
        save_adam(state, tmp_path / "a")
        back = load_adam(tmp_path / "a", AdamState(lr=1e-3))
        assert back.step == 1 and back.lr == 1e-3
        np.testing.assert_array_equal(back.m["p"], state.m["p"])
        np.testing.assert_array_equal(back.v["p"], state.v["p"])


class TestCheckpointFiles:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b/ü": np.float32(3.5) * np.ones(())}
        save_arrays(arrays, tmp_path / "c")
        back = load_arrays(tmp_path / "c")
        assert list(back) == ["a", "b/ü"]
        np.testing.assert_array_equal(back["a"], arrays["a"])
        assert back["b/ü"].shape == ()

    def test_errors(self, tmp_path):
        with pytest.raises(MissingFile):
            load_arrays(tmp_path / "nope")
        (tmp_path / "bad").write_bytes(b"XXXX")
        with pytest.raises(MalformedRecord):
            load_arrays(tmp_path / "bad")
        save_arrays({"a": np.ones(4, np.float32)}, tmp_path / "c")
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-2])
        with pytest.raises(MalformedRecord):
            load_arrays(tmp_path / "c")
        (tmp_path / "c").write_bytes(raw + b"\0")
        with pytest.raises(MalformedRecord):
            load_arrays(tmp_path / "c")
