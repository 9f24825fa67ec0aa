import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from evblur import K
from evblur.metrics import EvalError, GroundTruth, evaluate, match_frame, oks
from evblur.poses import InstanceBox, Pose
from metric_cases import gt_pose, hand_frames, pred_of, ref_evaluate, ref_oks


def test_oks_examples(rng):
    g = gt_pose(20, 20)
    assert oks(g.pose, g.pose, g.box) == 1.0
    far = Pose([1e6, 1e6], g.pose.keypoints + 1e6)
    assert oks(far, g.pose, g.box) == 0.0
    for i in range(20):
        p = pred_of(g, 0.5, jitter=rng.uniform(0.1, 4), seed=i)
        assert oks(p, g.pose, g.box) == pytest.approx(ref_oks(p, g.pose, g.box), rel=1e-12)


def test_oks_undefined_without_visible_keypoints():
    g = gt_pose(20, 20, hidden=range(K))
    assert math.isnan(oks(g.pose, g.pose, g.box))


def test_hand_frames_match_reference():
    preds, gts = hand_frames()
    assert len(gts) == 20
    got = evaluate(preds, gts)
    m_ap, m_ar, rows = ref_evaluate(preds, gts)
    assert got.mAP == m_ap and got.mAR == m_ar
    for (t1, a1, r1), (t2, a2, r2) in zip(got.per_threshold, rows):
        assert t1 == pytest.approx(t2) and a1 == a2 and r1 == r2


def test_perfect_predictions_score_one():
    _, gts = hand_frames()
    preds = {f: [g.pose.with_score(0.5 + 0.01 * i) for i, g in enumerate(gs) if g.pose.visibility.any()]
             for f, gs in gts.items()}
    r = evaluate(preds, gts)
    assert r.mAP == 1.0 and r.mAR == 1.0


def test_empty_predictions_score_zero():
    _, gts = hand_frames()
    r = evaluate({}, gts)
    assert r.mAP == 0.0 and r.mAR == 0.0


def test_duplicate_frame_ids_rejected():
    g = gt_pose(20, 20)
    with pytest.raises(EvalError):
        evaluate([("a", [g.pose])], [("a", [g]), ("a", [g])])
    with pytest.raises(EvalError):
        evaluate([("a", [g.pose]), ("a", [])], [("a", [g])])


def test_predictions_for_unknown_frame_rejected():
    g = gt_pose(20, 20)
    with pytest.raises(EvalError):
        evaluate({"b": [g.pose]}, {"a": [g]})


def test_match_frame_takes_each_gt_once():
    g = gt_pose(20, 20)
    tp = match_frame([g.pose.with_score(0.9), g.pose.with_score(0.8)], [g], 0.5)
    assert tp == [True, False]


def test_score_rescaling_invariance():
    preds, gts = hand_frames()
    base = evaluate(preds, gts)
    scaled = {f: [p.with_score(0.1 + 3 * p.score ** 2) for p in ps] for f, ps in preds.items()}
    r = evaluate(scaled, gts)
    assert r.mAP == base.mAP and r.mAR == base.mAR


def test_duplicate_never_raises_ap():
    preds, gts = hand_frames()
    base = evaluate(preds, gts)
    for f, ps in preds.items():
        if not ps:
            continue
        top = max(ps, key=lambda p: p.score)
        dup = dict(preds)
        dup[f] = ps + [top.with_score(top.score * 0.5)]
        r = evaluate(dup, gts)
        for (_, a0, _), (_, a1, _) in zip(base.per_threshold, r.per_threshold):
            assert a1 <= a0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_ap_non_increasing_in_oks_threshold(seed):
    rng = np.random.default_rng(seed)
    gts, preds = {}, {}
    for f in range(rng.integers(1, 5)):
        people = [random_pose(rng) for _ in range(rng.integers(0, 4))]
        gts[f] = [GroundTruth(p, InstanceBox(rng.uniform(8, 30), rng.uniform(8, 30))) for p in people]
        preds[f] = [Pose(p.center, p.keypoints + rng.normal(0, rng.uniform(0, 3), (K, 2)), score=rng.random())
                    for p in people if rng.random() < 0.8]
        preds[f] += [random_pose(rng, score=rng.random()) for _ in range(rng.integers(0, 2))]
    r = evaluate(preds, gts)
    if r.n_gt == 0:
        assert math.isnan(r.mAP)
        return
    aps = [a for _, a, _ in r.per_threshold]
    assert all(x >= y - 1e-12 for x, y in zip(aps, aps[1:]))
    assert 0.0 <= r.mAP <= 1.0
