import numpy as np
import pytest

from evblur import K
from evblur.losses import LossShapeError, masked_heatmap_loss, masked_offset_loss, smooth_l1, supervised_loss
from evblur.model import EVENT_ONLY, IMAGE_EVENT, FrameInput, ModelError, ToyPredictor, fuse_subteachers
from evblur.poses import PoseFieldSet
from evblur.pseudo import MaskSet
from gradcheck import check_end_to_end, check_heatmap_loss, check_offset_loss, small_instance


def test_loss_values():
    p = np.array([0.0, 1.0, 3.0])
    t = np.zeros(3)
    assert masked_heatmap_loss(p, t)[0] == pytest.approx((0 + 1 + 9) / 3)
    assert masked_heatmap_loss(p, t, np.array([1, 0, 0.1]))[0] == pytest.approx(0.9 / 3)
    np.testing.assert_allclose(smooth_l1(np.array([0.5, -2.0])), [0.125, 1.5])
    assert masked_offset_loss(p, t)[0] == pytest.approx((0 + 0.5 + 2.5) / 3)


def test_loss_shape_errors():
    with pytest.raises(LossShapeError):
        masked_heatmap_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(LossShapeError):
        masked_offset_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(4))


def test_zero_mask_gives_zero_loss_and_gradient(rng):
    w, h = 6, 5
    pred = PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), rng.normal(size=(2 * K, h, w)))
    tgt = PoseFieldSet.zeros(w, h)
    masks = MaskSet(np.zeros((1 + K, h, w)), np.zeros((K, h, w)))
    rep = supervised_loss(pred, tgt, masks)
    assert rep.total == 0 and not rep.grad_heatmaps.any() and not rep.grad_offsets.any()


def test_lambda_weights_offset_term(rng):
    w, h = 6, 5
    pred = PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), rng.normal(size=(2 * K, h, w)))
    tgt = PoseFieldSet.zeros(w, h)
    rep = supervised_loss(pred, tgt, lambda_g=0.03)
    assert rep.total == pytest.approx(rep.heatmap_loss + 0.03 * rep.offset_loss)


@pytest.mark.parametrize("check", [check_heatmap_loss, check_offset_loss, check_end_to_end])
def test_gradients_match_finite_differences(check, rng):
    errs = [check(rng) for _ in range(10)]
    assert max(errs) < 1e-4


def test_zero_weights_give_half_heat(rng):
    m = ToyPredictor(IMAGE_EVENT, 1, (2.0,))
    f = m.predict(FrameInput(rng.random((8, 8)), np.zeros((2, 8, 8))))
    assert np.all(f.center == 0.5) and np.all(f.keypoints == 0.5) and not f.offsets.any()


def test_event_only_ignores_image(rng):
    m = ToyPredictor.initial(EVENT_ONLY, 2, (2.0,), rng, 0.1)
    ev = rng.poisson(2.0, (2, 12, 12)).astype(float)
    a = m.predict(FrameInput(rng.random((12, 12)), ev))
    b = m.predict(FrameInput(np.zeros((12, 12)), ev))
    np.testing.assert_array_equal(a.to_tensor(), b.to_tensor())


def test_zero_lr_and_zero_masks_are_no_ops(rng):
    model, inp, target, masks = small_instance(rng)
    before = model.weights.copy(), model.bias.copy()
    model.train_step(inp, target, masks, lr=0.0)
    np.testing.assert_array_equal(model.weights, before[0])
    zero = MaskSet(np.zeros_like(masks.heatmap), np.zeros_like(masks.offset))
    model.train_step(inp, target, zero, lr=10.0)
    np.testing.assert_array_equal(model.weights, before[0])
    np.testing.assert_array_equal(model.bias, before[1])


def test_training_step_reduces_loss(rng):
    model, inp, target, masks = small_instance(rng)
    first = model.train_step(inp, target, masks, lr=1.0).total
    for _ in range(20):
        last = model.train_step(inp, target, masks, lr=1.0).total
    assert last < first


def test_checkpoint_round_trip(tmp_path, rng):
    model, inp, _, _ = small_instance(rng)
    model.save(tmp_path / "m.tnsr", stage=2, seed=5)
    back = ToyPredictor.load(tmp_path / "m.tnsr")
    assert back.meta["stage"] == 2 and back.meta["seed"] == 5 and back.modality == IMAGE_EVENT
    np.testing.assert_allclose(back.predict(inp).to_tensor(), model.predict(inp).to_tensor(), atol=1e-4)


def test_bad_modality():
    with pytest.raises(ModelError):
        ToyPredictor("audio")


def test_fusion_averages_heat_and_keeps_fused_offsets(rng):
    w, h = 5, 4
    a = PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), rng.normal(size=(2 * K, h, w)))
    b = PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), rng.normal(size=(2 * K, h, w)))
    f = fuse_subteachers(a, b)
    np.testing.assert_allclose(f.center, (a.center + b.center) / 2)
    np.testing.assert_array_equal(f.offsets, b.offsets)
