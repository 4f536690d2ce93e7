import numpy as np
import pytest

from main import reparam_deviation, reference_input
from services.model.blocks import ConvBN, ReparamError, RepResBlock, StageConfigError, profile_convs
from services.model.detector import (
    SCALE_PRESETS,
    DetectorModel,
    ModelConfig,
    ModelScale,
    architecture_report,
    build_model,
    count_params,
    reparameterize_model,
    resolve_scale,
    scale_config,
)
from services.nn.tensor import DimensionError, Tensor, no_grad

TINY = ModelScale(0.125, 0.33, "tiny")


def _config(scale: ModelScale, num_classes: int = 80) -> ModelConfig:
    return scale_config(ModelConfig(num_classes=num_classes), scale)


def _perturb_bn_stats(model: DetectorModel, seed: int) -> None:
    rng = np.random.default_rng(seed)
    for name, buf in model.named_buffers():
        if name.endswith("bn_var"):
            buf[...] = rng.uniform(0.8, 1.2, size=buf.shape)
        else:
            buf[...] = rng.normal(0.0, 0.05, size=buf.shape)


def test_scale_config_widths_and_depths():
    s = _config(SCALE_PRESETS["s"])
    assert s.backbone_widths == (32, 64, 128, 256, 512)
    assert s.backbone_depths == (1, 2, 2, 1)
    assert s.neck_widths == (96, 192, 384)
    assert s.neck_depth == 1

    tiny = _config(TINY)
    assert tiny.backbone_widths[0] == 8
    assert all(w % 2 == 0 and w >= 8 for w in tiny.backbone_widths + tiny.neck_widths)

    odd = _config(ModelScale(0.26, 1.0))
    assert odd.backbone_widths[0] == 18


def test_resolve_scale_overrides():
    assert resolve_scale("m") is SCALE_PRESETS["m"]
    custom = resolve_scale("s", alpha=0.25)
    assert (custom.alpha, custom.beta, custom.name) == (0.25, 0.33, "custom")
    assert resolve_scale().name == "l"
    with pytest.raises(StageConfigError):
        ModelScale(0.0, 1.0)


def test_model_config_validation():
    with pytest.raises(StageConfigError):
        ModelConfig(strides=(8, 16, 64))
    with pytest.raises(StageConfigError):
        ModelConfig(num_classes=0)
    with pytest.raises(StageConfigError):
        ModelConfig(reg_max=0)


def test_l_scale_parameter_count():
    model = DetectorModel(_config(SCALE_PRESETS["l"]))
    total = count_params(model)["total"]
    assert 49.59e6 <= total <= 54.81e6
    counts = count_params(model)
    assert counts["backbone"] + counts["neck"] + counts["head"] == total


def test_scales_are_ordered_in_params_and_flops():
    reports = []
    for name in ("s", "m", "l", "x"):
        model = DetectorModel(_config(SCALE_PRESETS[name]))
        reports.append(architecture_report(model, 640, name))
        del model
    params = [r.params["total"] for r in reports]
    flops = [r.flops for r in reports]
    assert params == sorted(params) and len(set(params)) == 4
    assert flops == sorted(flops) and len(set(flops)) == 4


def test_profile_scaling_matches_direct_run():
    model = build_model(_config(TINY, 3), seed=0)
    model.eval()
    report = architecture_report(model, 128, "tiny")
    with no_grad(), profile_convs(model) as records:
        model(Tensor(np.zeros((1, 3, 128, 128))))
    assert report.flops == sum(2 * r.macs for r in records)
    assert [row.name for row in report.layers] == [r.name for r in records]
    assert [row.out_shape for row in report.layers] == [r.out_shape for r in records]


def test_output_shapes():
    model = build_model(_config(TINY, 3), seed=1)
    model.eval()
    with no_grad():
        outs = model(Tensor(np.zeros((2, 3, 64, 96))))
        cls, reg, shapes = model.forward_flat(Tensor(np.zeros((2, 3, 64, 96))))
    assert [o.cls_logits.shape for o in outs] == [(2, 3, 8, 12), (2, 3, 4, 6), (2, 3, 2, 3)]
    assert outs[0].reg_logits.shape == (2, 4 * 17, 8, 12)
    assert shapes == [(8, 12), (4, 6), (2, 3)]
    assert cls.shape == (2, 96 + 24 + 6, 3)
    assert reg.shape == (2, 126, 4, 17)


def test_classification_prior():
    model = build_model(_config(TINY, 3), seed=1)
    model.eval()
    with no_grad():
        cls, _, _ = model.forward_flat(Tensor(np.zeros((1, 3, 64, 64))))
    # 权重和 BN 均为初始值时输入全零，cls 分支只剩 bias
    assert np.allclose(1.0 / (1.0 + np.exp(-cls.data)), 0.01, atol=5e-3)


@pytest.mark.parametrize("shape", [(1, 3, 64, 48), (1, 3, 50, 64), (1, 1, 64, 64)])
def test_bad_input_shapes(shape):
    model = build_model(_config(TINY, 3))
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros(shape)))


def test_init_is_deterministic():
    a = build_model(_config(TINY, 3), seed=5).state_dict()
    b = build_model(_config(TINY, 3), seed=5).state_dict()
    c = build_model(_config(TINY, 3), seed=6).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_reparameterize_model_small():
    model = build_model(_config(TINY, 3), seed=2)
    _perturb_bn_stats(model, 2)
    fused = reparameterize_model(model)
    assert fused.reparameterized and not model.reparameterized
    assert not [m for _, m in fused.named_modules() if isinstance(m, ConvBN)]
    assert all(m.is_fused for _, m in fused.named_modules() if isinstance(m, RepResBlock))
    assert count_params(fused)["total"] < count_params(model)["total"]
    assert reparam_deviation(model, fused, reference_input(size=64)) < 1e-4
    with pytest.raises(ReparamError):
        reparameterize_model(fused)


def test_reparameterize_l_models():
    sample = reference_input()
    worst = 0.0
    for seed in range(5):
        model = build_model(_config(SCALE_PRESETS["l"]), seed=seed)
        _perturb_bn_stats(model, seed)
        fused = reparameterize_model(model)
        worst = max(worst, reparam_deviation(model, fused, sample))
        del model, fused
    assert worst < 1e-4


def test_batch_equals_stacked_singles():
    model = build_model(_config(TINY, 3), seed=4)
    _perturb_bn_stats(model, 4)
    model.eval()
    images = np.random.default_rng(4).uniform(0.0, 1.0, size=(2, 3, 64, 96)).astype(np.float32)
    with no_grad():
        cls, reg, _ = model.forward_flat(Tensor(images))
        singles = [model.forward_flat(Tensor(images[i : i + 1])) for i in range(2)]
    np.testing.assert_allclose(cls.data, np.concatenate([s[0].data for s in singles]), rtol=0, atol=1e-5)
    np.testing.assert_allclose(reg.data, np.concatenate([s[1].data for s in singles]), rtol=0, atol=1e-5)
