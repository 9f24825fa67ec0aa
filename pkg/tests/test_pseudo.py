import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from evblur import K
from evblur.poses import InstanceBox, Pose, PoseFieldSet, encode_targets
from evblur.pseudo import (STUDENT, TEACHER, MaskParams, MaskSet, build_mutual_masks, build_single_masks,
                           confidence, generate_pseudo_labels, merge_poses, pixel_pose_index)
from mask_oracle import (RES, check_mutual_against_oracle, check_single_against_oracle, random_fields,
                         random_instance, ref_confidence)


# -- examples ---------------------------------------------------------------------------

def test_defaults_match_documented_constants():
    p = MaskParams()
    assert (p.threshold, p.near_side, p.background_value) == (0.1, 8, 0.1)


def test_near_square_membership_around_20_20():
    pose = Pose([20, 20], np.full((K, 2), 20.0))
    idx = pixel_pose_index([pose], (40, 40), 8)
    ys, xs = np.nonzero(idx[1, 0])
    assert xs.min() == 16 and xs.max() == 23 and ys.min() == 16 and ys.max() == 23
    assert idx[1, 0].sum() == 64
    assert pixel_pose_index([], (40, 40)).shape == (1 + K, 0, 40, 40)


def test_overlapping_squares_hold_both_indices():
    a = Pose([10, 10], np.full((K, 2), 10.0))
    b = Pose([13, 10], np.full((K, 2), 13.0))
    idx = pixel_pose_index([a, b], (30, 30))
    assert idx[3, :, 10, 11].tolist() == [True, True]
    assert idx[3, :, 10, 7].tolist() == [True, False]
    assert idx[3, :, 10, 16].tolist() == [False, True]


def test_single_pose_mask_values():
    pose = Pose([20, 16], np.full((K, 2), 20.0) + np.arange(K)[:, None] * [0.0, 0.0])
    box = InstanceBox(3.0, 4.0)
    m = build_single_masks([pose], [0.5], [box], MaskParams(), RES)
    assert m.heatmap[0, 16, 20] == 1.0 and m.heatmap[0, 0, 0] == 0.1
    assert set(np.unique(m.heatmap)) == {0.1, 1.0}
    assert m.offset[:, 16, 20] == pytest.approx(0.2)
    assert m.offset[:, 0, 0].max() == 0.0
    weak = build_single_masks([pose], [0.05], [box], MaskParams(), RES)
    assert weak.heatmap[0, 16, 20] == 0.0 and weak.heatmap[1, 20, 20] == 0.0


def test_missing_box_is_rejected(rng):
    pose = random_pose(rng, *RES)
    with pytest.raises(ValueError):
        build_single_masks([pose], [0.5], [None], MaskParams(), RES)
    with pytest.raises(ValueError):
        build_single_masks([pose], [0.5], [], MaskParams(), RES)


def test_confidence_examples(rng):
    w, h = RES
    pose = random_pose(rng, *RES)
    ones = PoseFieldSet(np.ones((h, w)), np.ones((K, h, w)), np.zeros((2 * K, h, w)))
    assert confidence(ones, pose) == pytest.approx(1.0)
    zc = PoseFieldSet(np.zeros((h, w)), np.ones((K, h, w)), np.zeros((2 * K, h, w)))
    assert confidence(zc, pose) == 0.0
    for _ in range(20):
        f = random_fields(rng)
        p = random_pose(rng, *RES)
        assert confidence(f, p) == pytest.approx(ref_confidence(f, p), abs=1e-12)


def test_mutual_gate_examples():
    w, h = RES
    pose = Pose([20, 16], np.full((K, 2), 20.0), provenance=TEACHER)
    box = [InstanceBox(10, 10)]

    def flat(v):
        return PoseFieldSet(np.full((h, w), v), np.ones((K, h, w)), np.zeros((2 * K, h, w)))

    m = build_mutual_masks([pose], flat(0.5), flat(0.05), box, MaskParams(), RES)
    assert m.heatmap[0, 16, 20] == 0.0
    m = build_mutual_masks([pose], flat(0.3), flat(0.3), box, MaskParams(), RES)
    assert m.heatmap[0, 16, 20] == 1.0


def test_merge_poses_keeps_provenance(rng):
    p = random_pose(rng, *RES, score=0.9)
    merged = merge_poses([p], [p.with_score(0.5)])
    assert len(merged) == 1 and merged[0].provenance == TEACHER
    far = p.translated(15, 0).with_score(0.4)
    merged = merge_poses([p], [far])
    assert sorted(x.provenance for x in merged) == [STUDENT, TEACHER]


def test_pseudo_labels_from_zero_fields():
    w, h = RES
    pl = generate_pseudo_labels(PoseFieldSet.zeros(w, h))
    assert pl.poses == []
    assert np.all(pl.masks.heatmap == 0.1) and np.all(pl.masks.offset == 0)
    assert np.all(pl.targets.to_tensor() == 0)


def test_pseudo_labels_reproduce_confident_pose():
    w, h = 48, 48
    kp = np.array([[24 + 6 * np.cos(a), 24 + 8 * np.sin(a)] for a in np.linspace(0, 2 * np.pi, K, endpoint=False)])
    pose = Pose([24, 24], kp)
    fields = encode_targets([pose], (w, h))
    pl = generate_pseudo_labels(fields)
    assert len(pl.poses) == 1
    np.testing.assert_allclose(pl.poses[0].keypoints, kp, atol=1e-6)
    assert np.abs(pl.targets.to_tensor() - fields.to_tensor()).max() < 1e-6
    assert pl.masks.heatmap[0, 24, 24] == 1.0


def test_mask_set_round_trip(tmp_path, rng):
    poses, boxes = random_instance(rng, 3)
    m = build_single_masks(poses, rng.random(3), boxes, MaskParams(), RES)
    m.save(tmp_path / "m.tnsr")
    back = MaskSet.load(tmp_path / "m.tnsr")
    # the tensor format stores float32
    np.testing.assert_array_equal(back.heatmap, m.heatmap.astype(np.float32))
    np.testing.assert_array_equal(back.offset, m.offset.astype(np.float32))


# -- formula oracles on randomized instances --------------------------------------------

def test_single_masks_match_oracle(rng):
    assert all(check_single_against_oracle(rng) for _ in range(40))


def test_mutual_masks_match_oracle(rng):
    assert all(check_mutual_against_oracle(rng, th=0.2) for _ in range(40))


# -- properties -------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), th1=st.floats(0.01, 0.98), dth=st.floats(0.0, 0.5))
def test_threshold_monotonicity(seed, th1, dth):
    rng = np.random.default_rng(seed)
    th2 = min(th1 + dth, 0.99)
    poses, boxes = random_instance(rng)
    conf = rng.random(len(poses))
    lo = build_single_masks(poses, conf, boxes, MaskParams(threshold=th1), RES)
    hi = build_single_masks(poses, conf, boxes, MaskParams(threshold=th2), RES)
    assert np.all(hi.heatmap <= lo.heatmap)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), th=st.floats(0.01, 0.5))
def test_mutual_mask_dominated_by_single(seed, th):
    rng = np.random.default_rng(seed)
    poses, boxes = random_instance(rng)
    poses = [Pose(p.center, p.keypoints, provenance=TEACHER if i % 2 else STUDENT) for i, p in enumerate(poses)]
    tf, sf = random_fields(rng), random_fields(rng)
    own = [confidence(tf if p.provenance == TEACHER else sf, p) for p in poses]
    single = build_single_masks(poses, own, boxes, MaskParams(threshold=th), RES)
    mutual = build_mutual_masks(poses, tf, sf, boxes, MaskParams(threshold=th), RES)
    assert np.all(mutual.heatmap <= single.heatmap)


def test_confidence_bounded(rng):
    for _ in range(30):
        c = confidence(random_fields(rng), random_pose(rng, *RES))
        assert 0.0 <= c <= 1.0
