import math

import numpy as np
import pytest
from scipy.special import log_softmax

from services.assign.anchors import anchor_points_for_image
from services.assign.types import AnchorPoints, AssignmentResult, GroundTruth
from services.losses.composite import (
    LossWeights,
    assign_batch,
    box_to_distances,
    composite_loss,
    decode_pred_boxes,
    detached_predictions,
    make_assigner,
)
from services.losses.dfl import distribution_focal_loss
from services.losses.giou import giou_loss, giou_numpy
from services.losses.vfl import varifocal_loss
from services.model.detector import ModelConfig, ModelScale, build_model, scale_config
from services.nn.gradcheck import check_gradients
from services.nn.tensor import ContractError, DimensionError, Tensor, float64_mode, parameter


def _assert_ok(results):
    bad = [r for r in results if not r.ok]
    assert not bad, bad


# ---- varifocal ----

def test_varifocal_positive_hand_value():
    with float64_mode():
        loss = varifocal_loss(Tensor(np.array([[0.5]])), np.array([[1.0]]))
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_varifocal_negative_hand_value():
    with float64_mode():
        loss = varifocal_loss(Tensor(np.array([[0.5]])), np.array([[0.0]]))
    assert loss.item() == pytest.approx(0.75 * 0.25 * math.log(2.0), abs=1e-12)


def test_varifocal_sums_elements():
    p = np.array([[0.5, 0.5], [0.5, 0.5]])
    q = np.array([[1.0, 0.0], [0.0, 0.0]])
    with float64_mode():
        loss = varifocal_loss(Tensor(p), q).item()
    assert loss == pytest.approx(math.log(2.0) + 3 * 0.75 * 0.25 * math.log(2.0), abs=1e-12)


def test_varifocal_clamps_log():
    with float64_mode():
        p = parameter(np.array([[0.0, 1.0]]))
        loss = varifocal_loss(p, np.array([[1.0, 0.0]]))
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(-math.log(1e-9) * 1.0 + 0.75 * -math.log(1e-9), rel=1e-9)
    loss.backward()
    assert np.all(np.isfinite(p.grad))


def test_varifocal_gradients():
    rng = np.random.default_rng(0)
    q = np.where(rng.uniform(size=(6, 3)) < 0.3, rng.uniform(0.1, 1.0, size=(6, 3)), 0.0)
    with float64_mode():
        p = parameter(rng.uniform(0.05, 0.95, size=(6, 3)))
    _assert_ok(check_gradients(lambda: varifocal_loss(p, q), [p], h=1e-5))


def test_varifocal_contract():
    p = Tensor(np.full((2, 2), 0.5))
    with pytest.raises(ContractError):
        varifocal_loss(p, np.full((2, 2), 1.5))
    with pytest.raises(DimensionError):
        varifocal_loss(p, np.zeros((2, 3)))
    with pytest.raises(ContractError):
        varifocal_loss(Tensor(np.full((1, 1), 1.5)), np.zeros((1, 1)))


# ---- distribution focal ----

def test_dfl_integer_target_is_cross_entropy():
    logits = np.random.default_rng(1).normal(size=(2, 4, 17))
    target = np.full((2, 4), 3.0)
    with float64_mode():
        loss = distribution_focal_loss(Tensor(logits), target).item()
    expected = -log_softmax(logits, axis=-1)[:, :, 3].mean(axis=1).sum()
    assert loss == pytest.approx(expected, rel=1e-12)


def test_dfl_interpolates_between_bins():
    logits = np.random.default_rng(2).normal(size=(1, 4, 9))
    target = np.full((1, 4), 2.25)
    weight = np.array([0.5])
    with float64_mode():
        loss = distribution_focal_loss(Tensor(logits), target, weight).item()
    ls = log_softmax(logits, axis=-1)
    expected = 0.5 * (-(0.75 * ls[0, :, 2] + 0.25 * ls[0, :, 3])).mean()
    assert loss == pytest.approx(expected, rel=1e-12)


def test_dfl_accepts_target_at_reg_max():
    logits = np.random.default_rng(3).normal(size=(1, 4, 17))
    with float64_mode():
        loss = distribution_focal_loss(Tensor(logits), np.full((1, 4), 16.0)).item()
    assert loss == pytest.approx(-log_softmax(logits, axis=-1)[0, :, 16].mean(), rel=1e-12)
    with pytest.raises(ContractError):
        distribution_focal_loss(Tensor(logits), np.full((1, 4), 16.5))


def test_dfl_gradients():
    rng = np.random.default_rng(4)
    target = rng.uniform(0.0, 8.0, size=(3, 4))
    weight = rng.uniform(0.2, 1.0, size=3)
    with float64_mode():
        logits = parameter(rng.normal(size=(3, 4, 9)))
    _assert_ok(check_gradients(lambda: distribution_focal_loss(logits, target, weight), [logits]))


# ---- GIoU ----

def test_giou_identical_boxes():
    box = np.array([[2.0, 3.0, 10.0, 7.0]])
    with float64_mode():
        assert giou_loss(Tensor(box), box).item() == pytest.approx(0.0, abs=1e-12)


def test_giou_disjoint_boxes():
    pred = np.array([[0.0, 0.0, 1.0, 1.0]])
    target = np.array([[2.0, 0.0, 3.0, 1.0]])
    with float64_mode():
        loss = giou_loss(Tensor(pred), target).item()
    assert loss == pytest.approx(1.0 + 1.0 / 3.0, rel=1e-12)
    np.testing.assert_allclose(giou_numpy(pred, target), [-1.0 / 3.0])


def test_giou_weights_and_numpy_agree():
    rng = np.random.default_rng(5)
    xy = rng.uniform(0, 50, size=(8, 2))
    pred = np.concatenate([xy, xy + rng.uniform(5, 20, size=(8, 2))], axis=1)
    xy = rng.uniform(0, 50, size=(8, 2))
    target = np.concatenate([xy, xy + rng.uniform(5, 20, size=(8, 2))], axis=1)
    w = rng.uniform(0, 1, size=8)
    with float64_mode():
        loss = giou_loss(Tensor(pred), target, w).item()
    assert loss == pytest.approx(float((w * (1 - giou_numpy(pred, target))).sum()), rel=1e-10)


def test_giou_gradients():
    rng = np.random.default_rng(6)
    xy = rng.uniform(0, 20, size=(5, 2))
    target = np.concatenate([xy, xy + rng.uniform(5, 15, size=(5, 2))], axis=1)
    with float64_mode():
        pred = parameter(target + rng.normal(0, 2.0, size=(5, 4)))
    _assert_ok(check_gradients(lambda: giou_loss(pred, target, np.linspace(0.2, 1.0, 5)), [pred], h=1e-5))


# ---- 总损失 ----

def _small_batch(seed, assigner="tal"):
    rng = np.random.default_rng(seed)
    points = anchor_points_for_image(32, 32)
    a = points.num_points
    with float64_mode():
        cls = parameter(rng.normal(-1.0, 1.0, size=(2, a, 2)))
        reg = parameter(rng.normal(0.0, 1.0, size=(2, a, 4, 5)))
    gts = [
        GroundTruth(np.array([[2.0, 3.0, 20.0, 18.0], [12.0, 10.0, 30.0, 31.0]]), np.array([0, 1])),
        GroundTruth(np.array([[5.0, 5.0, 27.0, 26.0]]), np.array([1])),
    ]
    assignments = assign_batch(cls, reg, points, gts, make_assigner(assigner))
    return cls, reg, points, assignments


@pytest.mark.parametrize("assigner", ["tal", "fcos"])
def test_composite_loss_gradients(assigner):
    cls, reg, points, assignments = _small_batch(7, assigner)
    assert sum(r.num_positives for r in assignments) > 0

    def fn():
        return composite_loss(cls, reg, assignments, points).total

    results = check_gradients(fn, [cls, reg], h=1e-4, tol=5e-3, max_entries=48)
    _assert_ok(results)


def test_full_detector_loss_gradients_on_sampled_parameters():
    with float64_mode():
        model = build_model(scale_config(ModelConfig(num_classes=2), ModelScale(0.125, 0.33, "tiny")), seed=3)
    model.eval()
    rng = np.random.default_rng(3)
    images = rng.uniform(0.0, 1.0, size=(2, 3, 64, 64))
    points = anchor_points_for_image(64, 64, model.cfg.strides)
    gts = [
        GroundTruth(np.array([[6.0, 8.0, 40.0, 36.0], [30.0, 28.0, 60.0, 58.0]]), np.array([0, 1])),
        GroundTruth(np.array([[12.0, 10.0, 50.0, 52.0]]), np.array([1])),
    ]

    def forward():
        cls, reg, _ = model.forward_flat(Tensor(images))
        return cls, reg

    with float64_mode():
        cls, reg = forward()
        assignments = assign_batch(cls, reg, points, gts, make_assigner("tal"))
    assert sum(r.num_positives for r in assignments) > 0

    # 20 个参数：骨干 7 个、neck 7 个、head 6 个，每个抽一个元素
    named = dict(model.named_parameters())
    picked: list[str] = []
    for part, count in (("backbone.", 7), ("neck.", 7), ("head.", 6)):
        names = [n for n in named if n.startswith(part)]
        picked += [names[i] for i in sorted(rng.choice(len(names), size=count, replace=False))]
    assert len(picked) == 20

    def fn():
        c, r = forward()
        return composite_loss(c, r, assignments, points).total

    results = check_gradients(fn, [named[n] for n in picked], h=1e-4, tol=5e-3, max_entries=1, names=picked)
    _assert_ok(results)


def test_composite_loss_parts_and_normalizer():
    cls, reg, points, assignments = _small_batch(8)
    weights = LossWeights()
    with float64_mode():
        out = composite_loss(cls, reg, assignments, points, weights)
    t_sum = sum(float(r.t_hat.sum()) for r in assignments)
    assert out.normalizer == pytest.approx(max(t_sum, 1.0))
    expected = (out.vfl + 2.5 * out.giou + 0.5 * out.dfl) / out.normalizer
    assert out.total.item() == pytest.approx(expected, rel=1e-12)
    assert out.num_positives == sum(r.num_positives for r in assignments)
    assert set(out.as_dict()) == {"loss", "vfl", "giou", "dfl", "normalizer"}


def test_composite_loss_without_positives():
    points = anchor_points_for_image(32, 32)
    rng = np.random.default_rng(9)
    with float64_mode():
        cls = parameter(rng.normal(size=(1, points.num_points, 3)))
        reg = parameter(rng.normal(size=(1, points.num_points, 4, 17)))
        assignments = assign_batch(cls, reg, points, [GroundTruth.empty()], make_assigner("tal"))
        out = composite_loss(cls, reg, assignments, points)
    assert out.num_positives == 0
    assert out.normalizer == 1.0
    assert out.giou == 0.0 and out.dfl == 0.0
    assert out.total.item() == pytest.approx(out.vfl)
    out.total.backward()
    assert np.all(np.isfinite(cls.grad))


def test_composite_loss_shape_checks():
    cls, reg, points, assignments = _small_batch(10)
    with pytest.raises(DimensionError):
        composite_loss(cls, reg, assignments[:1], points)
    with pytest.raises(ValueError):
        make_assigner("atss")


def test_box_distance_round_trip():
    points = anchor_points_for_image(64, 64)
    rng = np.random.default_rng(11)
    idx = rng.choice(points.num_points, size=10, replace=False)
    centers, strides = points.centers[idx], points.strides[idx]
    ltrb = rng.uniform(0.5, 6.0, size=(10, 4)) * strides[:, None]
    boxes = np.concatenate([centers - ltrb[:, :2], centers + ltrb[:, 2:]], axis=1)
    dist = box_to_distances(boxes, centers, strides)
    np.testing.assert_allclose(dist * strides[:, None], ltrb, rtol=1e-12)

    # 分布退化成 one-hot 时期望距离就是整数 bin
    logits = np.full((10, 4, 17), -60.0)
    k = rng.integers(0, 17, size=(10, 4))
    np.put_along_axis(logits, k[..., None], 60.0, axis=-1)
    with float64_mode():
        decoded = decode_pred_boxes(Tensor(logits), centers, strides).data
    expect = np.concatenate([centers - k[:, :2] * strides[:, None], centers + k[:, 2:] * strides[:, None]], axis=1)
    np.testing.assert_allclose(decoded, expect, atol=1e-4)


def test_detached_predictions_match_decoder():
    points = anchor_points_for_image(32, 32)
    rng = np.random.default_rng(12)
    cls = rng.normal(size=(points.num_points, 2))
    reg = rng.normal(size=(points.num_points, 4, 17))
    scores, boxes = detached_predictions(cls, reg, points)
    with float64_mode():
        decoded = decode_pred_boxes(Tensor(reg), points.centers, points.strides).data
    np.testing.assert_allclose(boxes, decoded, rtol=1e-10)
    np.testing.assert_allclose(scores, 1 / (1 + np.exp(-cls)))


def test_varifocal_negative_gradient_grows_with_p():
    grid = np.linspace(0.01, 0.99, 50)
    with float64_mode():
        p = parameter(grid.reshape(-1, 1))
        loss = varifocal_loss(p, np.zeros((50, 1)))
    loss.backward()
    mag = np.abs(p.grad[:, 0])
    assert np.all(np.diff(mag) > 0)


def test_composite_loss_invariant_to_anchor_order():
    cls, reg, points, assignments = _small_batch(13)
    perm = np.random.default_rng(13).permutation(points.num_points)
    permuted_points = AnchorPoints(points.centers[perm], points.strides[perm], points.level_shapes, points.level_strides)
    permuted = [
        AssignmentResult(
            assigned_class=r.assigned_class[perm],
            assigned_gt=r.assigned_gt[perm],
            target_box=r.target_box[perm],
            t_hat=r.t_hat[perm],
            positive_mask=r.positive_mask[perm],
        )
        for r in assignments
    ]
    with float64_mode():
        a = composite_loss(cls, reg, assignments, points).total.item()
        b = composite_loss(Tensor(cls.data[:, perm]), Tensor(reg.data[:, perm]), permuted, permuted_points).total.item()
    assert a == pytest.approx(b, rel=1e-10)
