import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from evblur import K
from evblur.metrics import oks
from evblur.poses import (DecodeParams, Pose, PoseFieldSet, decode_poses, encode_targets, load_poses,
                          pose_nms, save_poses, score_pose)

RES = (64, 64)


def ref_nms(poses, thr):
    # O(n^2) reference: walk in score order, keep if no kept pose is too similar
    idx = sorted(range(len(poses)), key=lambda i: (-poses[i].score, i))
    keep = []
    for i in idx:
        ok = True
        for j in keep:
            if oks(poses[i], poses[j], poses[j].box()) > thr:
                ok = False
        if ok:
            keep.append(i)
    return [poses[i] for i in keep]


def test_empty_pose_list_gives_zero_fields():
    f = encode_targets([], RES)
    assert not f.to_tensor().any()


def test_offset_example():
    kp = np.full((K, 2), 10.0)
    kp[3] = (7, 10)
    f = encode_targets([Pose([10, 10], kp)], (20, 20))
    assert f.offsets[6, 10, 7] == pytest.approx(3.0) and f.offsets[7, 10, 7] == pytest.approx(0.0)


def test_overlapping_heatmaps_take_pixelwise_max(rng):
    a, b = random_pose(rng), random_pose(rng)
    f = encode_targets([a, b], RES, sigma=2.0)
    ys, xs = np.mgrid[0:64, 0:64]

    def g(p):
        return np.exp(-((xs - p[0]) ** 2 + (ys - p[1]) ** 2) / 8.0)

    np.testing.assert_allclose(f.center, np.maximum(g(a.center), g(b.center)), atol=1e-12)
    np.testing.assert_allclose(f.keypoints[5], np.maximum(g(a.keypoints[5]), g(b.keypoints[5])), atol=1e-12)


def test_outside_pose_warns():
    kp = np.full((K, 2), 30.0)
    kp[0] = (-5, 30)
    with pytest.warns(RuntimeWarning):
        encode_targets([Pose([30, 30], kp)], RES)


def test_round_trip_single_pose(rng):
    for _ in range(30):
        p = random_pose(rng)
        got = decode_poses(encode_targets([p], RES))
        assert len(got) == 1
        assert np.abs(got[0].center - p.center).max() <= 0.5
        assert np.abs(got[0].keypoints - p.keypoints).max() <= 1.0


def test_two_separated_poses_decode_to_two():
    a = Pose([16, 20], np.full((K, 2), 16.0) + [0, 4])
    b = Pose([48, 40], np.full((K, 2), 48.0) - [0, 8])
    got = decode_poses(encode_targets([a, b], RES))
    assert len(got) == 2


def test_low_heat_gives_no_poses():
    h, w = 32, 32
    f = PoseFieldSet(np.full((h, w), 0.01), np.zeros((K, h, w)), np.zeros((2 * K, h, w)))
    assert decode_poses(f) == []


def test_max_centers_is_respected(rng):
    h, w = 40, 40
    f = PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), np.zeros((2 * K, h, w)))
    assert len(decode_poses(f, DecodeParams(max_centers=5))) <= 5


def test_score_pose_examples(rng):
    h, w = 32, 32
    p = random_pose(rng, w, h, spread=3)
    ones = PoseFieldSet(np.ones((h, w)), np.ones((K, h, w)), np.zeros((2 * K, h, w)))
    assert score_pose(ones, p) == pytest.approx(1.0)
    heat = np.zeros((K, h, w))
    heat[0] = 1.0
    f = PoseFieldSet(np.ones((h, w)), heat, np.zeros((2 * K, h, w)))
    assert score_pose(f, p) == pytest.approx(1 / 14)


def test_decode_translation_equivariance(rng):
    p = random_pose(rng, margin=20, spread=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = encode_targets([p], RES)
    t = f.to_tensor()
    dx, dy = 3, -2
    shifted = PoseFieldSet.from_tensor(np.roll(t, (dy, dx), axis=(1, 2)))
    a, b = decode_poses(f), decode_poses(shifted)
    assert len(a) == len(b) == 1
    np.testing.assert_allclose(b[0].keypoints, a[0].keypoints + [dx, dy], atol=1e-9)
    np.testing.assert_allclose(b[0].center, a[0].center + [dx, dy], atol=1e-9)


def test_nms_examples(rng):
    p = random_pose(rng)
    out = pose_nms([p.with_score(0.8), p.with_score(0.9)])
    assert len(out) == 1 and out[0].score == 0.9
    far = Pose(p.center + 40, p.keypoints + 40, score=0.5)
    assert len(pose_nms([p, far])) == 2


def test_nms_matches_reference_and_is_idempotent(rng):
    for _ in range(25):
        base = random_pose(rng)
        cluster = [Pose(base.center, base.keypoints + rng.normal(0, rng.uniform(0.5, 6), (K, 2)),
                        score=rng.random()) for _ in range(rng.integers(1, 8))]
        got = pose_nms(cluster, 0.5)
        ref = ref_nms(cluster, 0.5)
        assert [id(x) for x in got] == [id(x) for x in ref]
        assert [id(x) for x in pose_nms(got, 0.5)] == [id(x) for x in got]
        scores = [x.score for x in got]
        assert scores == sorted(scores, reverse=True)


def test_json_round_trip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(3)]
    save_poses(poses, tmp_path / "p.json")
    back = load_poses(tmp_path / "p.json")
    for a, b in zip(poses, back):
        np.testing.assert_allclose(a.keypoints, b.keypoints)
        assert a.score == b.score


def test_fieldset_tensor_round_trip(tmp_path, rng):
    f = encode_targets([random_pose(rng)], RES)
    f.save(tmp_path / "f.tnsr")
    g = PoseFieldSet.load(tmp_path / "f.tnsr")
    assert g.to_tensor().shape == (1 + 3 * K, 64, 64)
    np.testing.assert_allclose(g.to_tensor(), f.to_tensor(), atol=1e-5)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose([0, 0], np.zeros((K - 1, 2)))
    with pytest.raises(ValueError):
        Pose([0, 0], np.zeros((K, 2)), score=-1)
    with pytest.raises(ValueError):
        DecodeParams(center_threshold=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(0, 10), thr=st.floats(0.1, 0.9))
def test_nms_subset_property(seed, n, thr):
    rng = np.random.default_rng(seed)
    poses = [random_pose(rng) for _ in range(n)]
    out = pose_nms(poses, thr)
    assert all(any(o is p for p in poses) for o in out)
    assert len(pose_nms(out, thr)) == len(out)
