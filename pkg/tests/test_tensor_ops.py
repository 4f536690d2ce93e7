import numpy as np
import pytest

from services.nn import functional as F
from services.nn.gradcheck import check_gradients
from services.nn.module import Module
from services.nn.tensor import ContractError, DimensionError, Tensor, float64_mode, no_grad, parameter


def _weighted_sum(out: Tensor, seed: int = 123) -> Tensor:
    # 随机权重求和，避免对称性让梯度误差互相抵消
    w = np.random.default_rng(seed).normal(size=out.shape)
    return F.sum(F.mul_const(out, w))


def _assert_ok(results):
    bad = [r for r in results if not r.ok]
    assert not bad, bad


def _naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return out


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)])
def test_conv2d_matches_direct_loop(k, stride, pad):
    rng = np.random.default_rng(0)
    with float64_mode():
        x = Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = Tensor(rng.normal(size=(4, 3, k, k)))
        b = Tensor(rng.normal(size=(4,)))
        out = F.conv2d(x, w, b, stride=stride, pad=pad)
    expected = _naive_conv(x.data, w.data, b.data, stride, pad)
    assert out.shape == expected.shape
    assert out.shape[2] == (8 + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_conv2d_identity_kernel():
    x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 5, 5)))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    out = F.conv2d(x, Tensor(w), pad=1)
    np.testing.assert_allclose(out.data, x.data)


def test_conv2d_channel_mismatch():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    w = Tensor(np.zeros((2, 4, 3, 3)))
    with pytest.raises(DimensionError) as e:
        F.conv2d(x, w, pad=1)
    assert e.value.axis == "in_channels"


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 2, 0)])
def test_conv2d_gradients(k, stride, pad):
    rng = np.random.default_rng(2)
    with float64_mode():
        x = parameter(rng.normal(size=(2, 3, 6, 6)))
        w = parameter(rng.normal(size=(4, 3, k, k)))
        b = parameter(rng.normal(size=(4,)))
    _assert_ok(check_gradients(lambda: _weighted_sum(F.conv2d(x, w, b, stride=stride, pad=pad)), [x, w, b]))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = np.random.default_rng(3)
    with float64_mode():
        x = parameter(rng.normal(size=(3, 4, 5, 5)))
        gamma = parameter(rng.uniform(0.5, 1.5, size=4))
        beta = parameter(rng.normal(size=4))
    mean = rng.normal(size=4)
    var = rng.uniform(0.5, 2.0, size=4)

    def fn():
        return _weighted_sum(F.batchnorm(x, gamma, beta, mean.copy(), var.copy(), training=training))

    _assert_ok(check_gradients(fn, [x, gamma, beta]))


def test_batchnorm_identity_when_stats_are_unit():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 4, 4)))
    out = F.batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), eps=0.0)
    np.testing.assert_allclose(out.data, x.data)


def test_batchnorm_updates_running_stats_in_training():
    x = Tensor(np.random.default_rng(5).normal(loc=2.0, size=(4, 2, 3, 3)))
    mean = np.zeros(2, dtype=np.float32)
    var = np.ones(2, dtype=np.float32)
    F.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True, momentum=0.9)
    np.testing.assert_allclose(mean, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)), rtol=1e-5)


def test_batchnorm_rejects_negative_eps():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        F.batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), eps=-1.0)


@pytest.mark.parametrize("kind", ["silu", "sigmoid", "relu"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(6)
    data = rng.normal(size=(2, 3, 4))
    # relu 在 0 处不可导，离开 0 一段距离
    data = np.where(np.abs(data) < 0.05, 0.5, data)
    with float64_mode():
        x = parameter(data)
    _assert_ok(check_gradients(lambda: _weighted_sum(F.activation(x, kind)), [x]))


@pytest.mark.parametrize("op", ["softmax", "log_softmax"])
def test_softmax_gradients(op):
    with float64_mode():
        x = parameter(np.random.default_rng(7).normal(size=(3, 4, 6)))
    fn = getattr(F, op)
    _assert_ok(check_gradients(lambda: _weighted_sum(fn(x, axis=-1)), [x]))


def test_softmax_sums_to_one():
    x = Tensor(np.random.default_rng(8).normal(size=(5, 17)) * 10)
    np.testing.assert_allclose(F.softmax(x).data.sum(axis=-1), 1.0, rtol=1e-6)


def test_maxpool_keeps_shape_and_gradients():
    rng = np.random.default_rng(9)
    # 元素间隔 0.01，远大于差分步长，最大值位置不会跳变
    data = rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.01
    with float64_mode():
        x = parameter(data)
    out = F.maxpool2d(x, 5)
    assert out.shape == x.shape
    _assert_ok(check_gradients(lambda: _weighted_sum(F.maxpool2d(x, 5)), [x]))


def test_maxpool_matches_sliding_max():
    data = np.random.default_rng(10).normal(size=(1, 1, 6, 6))
    out = F.maxpool2d(Tensor(data), 3).data
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    expected = np.array([[padded[0, 0, i : i + 3, j : j + 3].max() for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(out[0, 0], expected, rtol=1e-6)


@pytest.mark.parametrize("kind", ["global_avg", "nearest_upsample_2x"])
def test_pool_and_resize_gradients(kind):
    with float64_mode():
        x = parameter(np.random.default_rng(11).normal(size=(2, 3, 4, 4)))
    _assert_ok(check_gradients(lambda: _weighted_sum(F.pool_and_resize(kind, x)), [x]))


def test_upsample_shape():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = F.upsample_nearest2x(x)
    assert out.shape == (1, 1, 4, 4)
    assert out.data[0, 0, 3, 3] == 3.0


def test_channel_scale_mul_and_concat_gradients():
    rng = np.random.default_rng(12)
    with float64_mode():
        a = parameter(rng.normal(size=(2, 3, 4, 4)))
        s = parameter(rng.normal(size=(2, 3, 1, 1)))
        b = parameter(rng.normal(size=(2, 2, 4, 4)))

    def fn():
        return _weighted_sum(F.concat([F.mul(a, s), b], axis=1))

    _assert_ok(check_gradients(fn, [a, s, b]))


def test_div_take_and_reductions_gradients():
    rng = np.random.default_rng(13)
    with float64_mode():
        x = parameter(rng.normal(size=(5, 4)))
        y = parameter(rng.uniform(1.0, 2.0, size=(5, 4)))
    idx = np.array([0, 2, 2, 4])

    def fn():
        z = F.take(F.div(x, y), idx, axis=0)
        return F.add(F.sum(F.mul(z, z)), F.mean(F.exp(F.column(x, 1))))

    _assert_ok(check_gradients(fn, [x, y]))


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_concat_checks_other_axes():
    with pytest.raises(DimensionError):
        F.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 4)))], axis=1)


def test_backward_needs_scalar():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        F.mul_const(x, 2.0).backward()


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_shared_subexpression_accumulates():
    with float64_mode():
        x = parameter(np.array([1.5, -2.0]))
        loss = F.sum(F.mul(x, x))
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_across_calls():
    x = parameter(np.array([1.0, 2.0]))
    F.sum(x).backward()
    F.sum(x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


def test_no_grad_builds_no_graph():
    x = parameter(np.ones(3))
    with no_grad():
        y = F.sum(F.mul_const(x, 3.0))
    assert not y.requires_grad
    with pytest.raises(ContractError):
        y.backward()


def test_deep_chain_does_not_recurse():
    x = parameter(np.ones(2))
    y = x
    for _ in range(5000):
        y = F.add_const(y, 0.0)
    F.sum(y).backward()
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


class _Pair(Module):
    def __init__(self):
        super().__init__()
        self.w = parameter(np.arange(6.0).reshape(2, 3))
        self.parts = [_Leaf(), _Leaf()]


class _Leaf(Module):
    def __init__(self):
        super().__init__()
        self.b = parameter(np.zeros(3))
        self.register_buffer("stat", np.ones(3, dtype=np.float32))


def test_module_state_dict_round_trip():
    src = _Pair()
    src.parts[1].b.data[...] = 7.0
    src.parts[0]._buffers["stat"][...] = 3.0
    state = src.state_dict()
    assert set(state) == {"w", "parts.0.b", "parts.1.b", "parts.0.stat", "parts.1.stat"}

    dst = _Pair()
    assert dst.load_state_dict(state) == []
    np.testing.assert_array_equal(dst.parts[1].b.data, 7.0)
    np.testing.assert_array_equal(dst.parts[0]._buffers["stat"], 3.0)


def test_module_load_state_dict_strict():
    dst = _Pair()
    state = dst.state_dict()
    del state["w"]
    with pytest.raises(KeyError):
        dst.load_state_dict(state)
    bad = _Pair().state_dict()
    bad["w"] = np.zeros((3, 2))
    with pytest.raises(DimensionError):
        dst.load_state_dict(bad)
