import numpy as np
import pytest

from evblur.events import EventSlice, EventStream, EventValidationError, accumulate, slice_window
from evblur.flow import FlowField, FlowParams, contrast, estimate_flow, warp_event_image
from flow_scenes import bar_scene, middle_slice, textured_translation, truth


def single_event_slice(x=5, y=6, t=50):
    s = EventStream.from_arrays(16, 16, [t], [x], [y], [1])
    return EventSlice(0, 100, s)


def test_zero_velocity_matches_accumulate():
    s = EventStream.from_arrays(8, 8, [1, 2, 3, 4], [1, 1, 5, 7], [2, 2, 0, 7], [1, 1, -1, 1])
    sl = EventSlice(0, 10, s)
    assert np.allclose(warp_event_image(sl, (0.0, 0.0)).counts, accumulate(s).counts)


def test_single_event_mass_is_conserved():
    img = warp_event_image(single_event_slice(), (1.3, -0.7)).counts
    assert np.count_nonzero(img) <= 4
    assert img.sum() == pytest.approx(1.0)
    # alpha = 0.5 moves the event by half the velocity
    ys, xs = np.nonzero(img)
    cx = (img[ys, xs] * xs).sum()
    cy = (img[ys, xs] * ys).sum()
    assert (cx, cy) == pytest.approx((5 - 0.65, 6 + 0.35))


def test_warp_errors():
    with pytest.raises(EventValidationError):
        warp_event_image(EventSlice(5, 5, EventStream.from_arrays(4, 4, [5], [0], [0], [1])), (0, 0))
    with pytest.raises(EventValidationError):
        warp_event_image(EventSlice(0, 5, EventStream.empty(4, 4)), (0, 0))


def test_contrast_closed_forms():
    assert contrast(np.zeros((5, 7))) == 0.0
    img = np.zeros((4, 5))
    img[2, 3] = 3.0
    n = img.size
    assert contrast(img) == pytest.approx((n - 1) * 9.0 / n ** 2)


def test_true_velocity_sharpens_edges():
    scene, stream = bar_scene((5.0, 0.0))
    sl = middle_slice(stream)
    v = truth(scene)
    assert contrast(warp_event_image(sl, v)) > contrast(warp_event_image(sl, (0.0, 0.0)))
    assert contrast(warp_event_image(sl, v)) > contrast(warp_event_image(sl, 0.5 * v))


def test_empty_slice_gives_invalid_zero_field():
    f = estimate_flow(EventSlice(0, 100, EventStream.empty(32, 32)))
    assert not f.valid.any() and not f.u.any() and not f.v.any()


def test_bar_velocity_and_direction_symmetry():
    scene, stream = bar_scene((5.0, 0.0))
    fwd = estimate_flow(middle_slice(stream, 1))
    bwd = estimate_flow(middle_slice(stream, -1))
    assert fwd.valid.any()
    err = np.hypot(fwd.u - 5.0, fwd.v)[fwd.valid] / 5.0
    assert err.max() < 0.1
    assert np.array_equal(bwd.u, -fwd.u) and np.array_equal(bwd.v, -fwd.v)
    assert np.array_equal(bwd.valid, fwd.valid)


def test_invalid_blocks_carry_zero_flow():
    scene, stream = bar_scene((5.0, 0.0))
    f = estimate_flow(middle_slice(stream))
    assert (~f.valid).any()
    assert not f.u[~f.valid].any() and not f.v[~f.valid].any()


def test_translation_equivariance():
    scene, stream = bar_scene((4.0, 0.0))
    base = estimate_flow(middle_slice(stream))
    moved = estimate_flow(middle_slice(stream.shifted(16, 0)))
    # the bar occupies blocks 1-2; after a one-block shift it occupies blocks 2-3
    assert np.allclose(moved.u[:, 32:48], base.u[:, 16:32], atol=1e-9)
    assert np.allclose(moved.v[:, 32:48], base.v[:, 16:32], atol=1e-9)


def test_textured_scene_recovery_at_moderate_speed():
    rng = np.random.default_rng(11)
    scene, stream = textured_translation(rng, (4.0, 3.0))
    f = estimate_flow(middle_slice(stream))
    v = truth(scene)
    err = np.hypot(f.u - v[0], f.v - v[1])[f.valid] / np.hypot(*v)
    assert np.median(err) < 0.1


def test_params_validation_and_tensor_round_trip():
    with pytest.raises(ValueError):
        FlowParams(block_size=2)
    with pytest.raises(ValueError):
        FlowParams(search_radius=0)
    f = FlowField.uniform(4, 3, 1.5, -2.0)
    g = FlowField.from_tensor(f.to_tensor())
    assert np.array_equal(g.u, f.u) and np.array_equal(g.valid, f.valid)
    assert f.to_tensor().shape == (3, 3, 4)
