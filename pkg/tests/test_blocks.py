import numpy as np
import pytest

from services.fixtures import randomize_module
from services.model.blocks import (
    ESE,
    SPP,
    Conv,
    ConvBN,
    CSPRepResStage,
    ReparamError,
    RepResBlock,
    StageConfigError,
    fuse_conv_bn,
    pad_1x1_to_3x3,
    profile_convs,
    reparameterize,
)
from services.nn import functional as F
from services.nn.gradcheck import check_gradients
from services.nn.tensor import DimensionError, Tensor, float64_mode, no_grad


def _weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return F.sum(F.mul_const(out, w))


def _assert_ok(results):
    bad = [r for r in results if not r.ok]
    assert not bad, bad


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (1, 1)])
def test_fuse_conv_bn_matches_sequential(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    with float64_mode():
        layer = ConvBN(5, 7, k, stride=stride, act=None)
        randomize_module(layer, rng)
        layer.eval()
        conv = layer.to_conv()
        worst = 0.0
        for _ in range(100):
            x = Tensor(rng.normal(size=(1, 5, 6, 6)))
            with no_grad():
                worst = max(worst, float(np.abs(layer(x).data - conv(x).data).max()))
    assert isinstance(conv, Conv)
    assert worst < 1e-5


def test_fuse_conv_bn_formula():
    layer = ConvBN(2, 3, 1, act=None)
    layer.weight.data[...] = 2.0
    layer.bn_gamma.data[...] = np.array([1.0, 2.0, 4.0])
    layer.bn_beta.data[...] = 1.0
    layer.bn_mean[...] = 3.0
    layer.bn_var[...] = 4.0
    layer.eps = 0.0
    w, b = fuse_conv_bn(layer)
    np.testing.assert_allclose(w[:, 0, 0, 0], [1.0, 2.0, 4.0])
    np.testing.assert_allclose(b, [1.0 - 1.5, 1.0 - 3.0, 1.0 - 6.0])


def test_pad_1x1_to_3x3_centers_kernel():
    k = np.arange(6.0).reshape(3, 2, 1, 1)
    out = pad_1x1_to_3x3(k)
    assert out.shape == (3, 2, 3, 3)
    np.testing.assert_array_equal(out[:, :, 1, 1], k[:, :, 0, 0])
    out[:, :, 1, 1] = 0
    assert not out.any()
    with pytest.raises(DimensionError):
        pad_1x1_to_3x3(np.zeros((3, 2, 3, 3)))


def test_reparameterize_keeps_outputs_float64():
    rng = np.random.default_rng(2024)
    worst = 0.0
    with float64_mode():
        for i in range(100):
            block = RepResBlock(6, 6, act="silu", shortcut=bool(i % 2))
            randomize_module(block, rng)
            block.eval()
            fused = reparameterize(block)
            x = Tensor(rng.normal(size=(10, 6, 5, 5)))
            with no_grad():
                worst = max(worst, float(np.abs(block(x).data - fused(x).data).max()))
    assert worst < 1e-5


def test_reparameterize_keeps_outputs_float32():
    rng = np.random.default_rng(7)
    block = RepResBlock(8, 8)
    randomize_module(block, rng)
    block.eval()
    fused = reparameterize(block)
    x = Tensor(rng.normal(size=(4, 8, 8, 8)))
    with no_grad():
        dev = np.abs(block(x).data - fused(x).data).max()
    assert dev < 1e-4


def test_reparameterize_structure_and_original_untouched():
    block = RepResBlock(4, 4)
    randomize_module(block, np.random.default_rng(3))
    before = block.state_dict()
    fused = reparameterize(block)
    assert not block.is_fused
    assert fused.is_fused
    assert fused.branch3 is None and fused.branch1 is None
    convs = [m for _, m in fused.named_modules() if isinstance(m, (Conv, ConvBN))]
    assert len(convs) == 2
    assert all(isinstance(c, Conv) and c.weight.shape[2:] == (3, 3) for c in convs)
    for k, v in block.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_reparameterize_twice_refused():
    fused = reparameterize(RepResBlock(4, 4))
    with pytest.raises(ReparamError):
        reparameterize(fused)
    with pytest.raises(ReparamError):
        fused.fuse_()


def test_rep_res_block_shortcut_needs_same_width():
    with pytest.raises(StageConfigError):
        RepResBlock(4, 6, shortcut=True)
    assert RepResBlock(4, 6, shortcut=False) is not None


def test_conv_bn_gradients_in_training_mode():
    rng = np.random.default_rng(5)
    with float64_mode():
        layer = ConvBN(3, 4, 3, stride=2)
        randomize_module(layer, rng)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    params = [x] + layer.parameters()
    _assert_ok(check_gradients(lambda: _weighted_sum(layer(x)), params))


def test_rep_res_block_gradients():
    rng = np.random.default_rng(6)
    with float64_mode():
        block = RepResBlock(4, 4)
        randomize_module(block, rng)
        block.eval()
        x = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
    _assert_ok(check_gradients(lambda: _weighted_sum(block(x)), [x] + block.parameters()))


def test_ese_gradients_and_channel_check():
    rng = np.random.default_rng(8)
    with float64_mode():
        ese = ESE(4)
        randomize_module(ese, rng)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
    _assert_ok(check_gradients(lambda: _weighted_sum(ese(x)), [x] + ese.parameters()))
    with pytest.raises(DimensionError):
        ese(Tensor(np.zeros((1, 5, 3, 3))))


def test_spp_keeps_spatial_size():
    spp = SPP(4, 6)
    randomize_module(spp, np.random.default_rng(9))
    spp.eval()
    with no_grad():
        out = spp(Tensor(np.random.default_rng(10).normal(size=(1, 4, 7, 7))))
    assert out.shape == (1, 6, 7, 7)
    assert spp.conv.weight.shape == (6, 16, 1, 1)
    with pytest.raises(StageConfigError):
        SPP(4, 4, kernel_sizes=(5, 8))


@pytest.mark.parametrize("bias, expect_pass", [(20.0, True), (-20.0, False)])
def test_ese_gate_saturates(bias, expect_pass):
    ese = ESE(4)
    ese.fc.weight.data[...] = 0.0
    ese.fc.bias.data[...] = bias
    x = Tensor(np.random.default_rng(12).normal(size=(2, 4, 5, 5)))
    with no_grad():
        y = ese(x).data
    if expect_pass:
        np.testing.assert_allclose(y, x.data, rtol=1e-7, atol=0)
    else:
        assert np.abs(y).max() <= 1e-8 * np.abs(x.data).max()


def test_ese_gate_stays_inside_unit_interval():
    rng = np.random.default_rng(13)
    for _ in range(10):
        ese = ESE(6)
        randomize_module(ese, rng)
        with no_grad():
            gate = ese.gate(Tensor(rng.normal(0.0, 3.0, size=(3, 6, 4, 4)))).data
        assert gate.shape == (3, 6, 1, 1)
        assert np.all(gate > 0.0) and np.all(gate < 1.0)


def test_spp_dilates_a_single_bright_pixel():
    spp = SPP(1, 4, act=None)
    spp.conv.weight.data[...] = np.eye(4).reshape(4, 4, 1, 1)
    spp.eval()
    x = np.zeros((1, 1, 17, 17))
    x[0, 0, 8, 8] = 1.0
    x[0, 0, 1, 2] = 1.0
    with no_grad():
        out = spp(Tensor(x)).data[0]
    rows, cols = np.mgrid[0:17, 0:17]
    for branch, k in enumerate((1, 5, 9, 13)):
        r = k // 2
        expect = ((np.abs(rows - 8) <= r) & (np.abs(cols - 8) <= r)) | ((np.abs(rows - 1) <= r) & (np.abs(cols - 2) <= r))
        np.testing.assert_array_equal(out[branch] > 0.5, expect, err_msg=f"k={k}")
        assert out[branch].max() == pytest.approx(1.0, abs=1e-4)
        assert out[branch].min() == 0.0


def test_stage_shapes():
    stage = CSPRepResStage(8, 16, 2, downsample=True)
    neck_stage = CSPRepResStage(8, 12, 1, downsample=False, use_ese=False, shortcut=False, spp=True)
    x = Tensor(np.random.default_rng(11).normal(size=(1, 8, 8, 8)))
    with no_grad():
        assert stage(x).shape == (1, 16, 4, 4)
        assert neck_stage(x).shape == (1, 12, 8, 8)
    assert any(isinstance(b, SPP) for b in neck_stage.blocks)
    with pytest.raises(DimensionError):
        stage(Tensor(np.zeros((1, 4, 8, 8))))


def test_stage_rejects_bad_config():
    with pytest.raises(StageConfigError):
        CSPRepResStage(8, 15, 1)
    with pytest.raises(StageConfigError):
        CSPRepResStage(8, 16, 0)


def test_stage_gradients():
    rng = np.random.default_rng(12)
    with float64_mode():
        stage = CSPRepResStage(4, 8, 1, downsample=True)
        randomize_module(stage, rng)
        stage.eval()
        x = Tensor(rng.normal(size=(1, 4, 8, 8)), requires_grad=True)
    _assert_ok(check_gradients(lambda: _weighted_sum(stage(x)), [x] + stage.parameters(), max_entries=16))


def test_profile_convs_records_every_conv():
    stage = CSPRepResStage(8, 16, 1)
    with no_grad(), profile_convs(stage) as records:
        stage(Tensor(np.zeros((2, 8, 8, 8))))
    names = [r.name for r in records]
    assert names[0] == "downsample"
    assert "out_conv" in names
    down = records[0]
    assert down.stride == 2
    assert down.out_shape == (2, 12, 4, 4)
    assert down.macs == 2 * 12 * 4 * 4 * 8 * 9
    with no_grad():
        stage(Tensor(np.zeros((1, 8, 8, 8))))
    assert len(records) == len(names)
