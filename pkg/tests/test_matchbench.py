import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from support import load, tilt_h, warp_image

from asr.descriptor import assign_orientations, describe
from asr.detect import DogParams, detect_dog
from asr.matchbench import (CURVE_HEADER, EmptyGroundTruthError, MatchPair,
                            SingularHomographyError, baseline_single_view, bench_timing,
                            curve_for, curve_to_csv, ground_truth_correspondences, local_scale,
                            match_nndr, project, read_homography, recall_at, recall_at_ratio,
                            recall_precision_curve, timing_to_csv, write_homography)
from asr.patch import Keypoint

# -- NNDR matching -------------------------------------------------------------------


def test_single_candidate_ratio_zero():
    a = [np.array([0.0, 1.0]), np.array([5.0, 5.0])]
    out = match_nndr(a, [np.array([1.0, 1.0])], 1e-9)
    assert [(m.index_a, m.index_b, m.ratio) for m in out] == [(0, 0, 0.0), (1, 0, 0.0)]


def test_zero_threshold_is_empty():
    a = [np.zeros(3)]
    assert match_nndr(a, [np.ones(3), np.zeros(3) + 2], 0.0) == []


def test_two_candidate_example():
    u = np.array([1.0, 2.0, 3.0])
    far = u + np.array([10.0, 0.0, 0.0])
    eps = np.array([0.0, 1.0, 0.0])  # |eps| / |u - far| = 0.1
    out = match_nndr([u], [u + eps, far], 0.8)
    assert [(m.index_a, m.index_b) for m in out] == [(0, 0)]
    assert out[0].ratio == pytest.approx(0.1)


def test_ties_prefer_lower_index_and_equal_distances_reject():
    a = [np.zeros(2)]
    b = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([3.0, 3.0])]
    assert match_nndr(a, b, 1.01)[0].index_b == 0
    assert match_nndr(a, b, 0.99) == []  # equal nearest distances give ratio 1


def test_failed_descriptors_are_skipped():
    a = [None, np.array([0.0, 0.0]), np.full(2, np.nan)]
    b = [np.array([0.1, 0.0]), None, np.array([5.0, 5.0])]
    out = match_nndr(a, b, 0.8)
    assert [(m.index_a, m.index_b) for m in out] == [(1, 0)]
    with pytest.raises(ValueError):
        match_nndr([None], b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_match_invariants(na, nb, thr, seed):
    r = np.random.default_rng(seed)
    a, b = list(r.standard_normal((na, 5))), list(r.standard_normal((nb, 5)))
    out = match_nndr(a, b, thr)
    assert len({m.index_a for m in out}) == len(out)
    for m in out:
        assert m.distance >= 0 and 0 <= m.ratio < thr <= 1
        d = np.linalg.norm(b - a[m.index_a], axis=1)
        assert m.distance == pytest.approx(d.min())


# -- homographies and ground truth ---------------------------------------------------------


def test_homography_io(tmp_path):
    h = np.array([[2.0, 0.1, 3], [0, 1.5, -2], [1e-4, 0, 1]]) * 2
    write_homography(h, tmp_path / "H")
    np.testing.assert_allclose(read_homography(tmp_path / "H"), h / 2, rtol=1e-9)
    (tmp_path / "bad").write_text("1 2 3")
    with pytest.raises(ValueError):
        read_homography(tmp_path / "bad")
    (tmp_path / "sing").write_text("1 2 3 2 4 6 0 0 1")
    with pytest.raises(SingularHomographyError):
        read_homography(tmp_path / "sing")


def test_project_and_local_scale():
    h = np.diag([2.0, 2.0, 1.0])
    assert project(h, 3, 4) == (6.0, 8.0)
    assert local_scale(h, 10, 10) == pytest.approx(2.0)
    t = np.diag([1.0, 0.5, 1.0])
    assert local_scale(t, 1, 1) == pytest.approx(math.sqrt(0.5))


def test_identity_ground_truth_is_perfect():
    kps = [Keypoint(10 * i, 5 * i, 1 + i) for i in range(8)]
    assert ground_truth_correspondences(kps, kps, np.eye(3)) == {(i, i) for i in range(8)}


def test_displaced_keypoint_excluded():
    a = [Keypoint(10, 10, 2.0)]
    assert ground_truth_correspondences(a, [Keypoint(15, 10, 2.0)], np.eye(3), 2.5) == set()
    assert ground_truth_correspondences(a, [Keypoint(12, 10, 2.0)], np.eye(3), 2.5) == {(0, 0)}


def test_scaling_homography_needs_scaled_keypoints():
    h = np.diag([2.0, 2.0, 1.0])
    a = [Keypoint(10, 10, 2.0), Keypoint(30, 20, 3.0)]
    b = [Keypoint(20, 20, 4.2), Keypoint(60, 40, 3.0)]
    # second pair lands exactly but its scale ratio is 2 > 1.8
    assert ground_truth_correspondences(a, b, h) == {(0, 0)}


def test_ground_truth_one_to_one_greedy():
    a = [Keypoint(10, 10, 2.0), Keypoint(11, 10, 2.0)]
    b = [Keypoint(10.5, 10, 2.0)]
    assert ground_truth_correspondences(a, b, np.eye(3)) == {(0, 0)}


# -- curves ---------------------------------------------------------------------------------


def pairs(*rows):
    return [MatchPair(i, j, 0.1, r) for i, j, r in rows]


def test_curve_all_correct():
    curve = recall_precision_curve(pairs((0, 0, 0.1), (1, 1, 0.2)), {(0, 0), (1, 1), (2, 2)})
    assert [p.one_minus_precision for p in curve] == [0.0, 0.0]
    assert curve[-1].recall == pytest.approx(2 / 3)


def test_curve_none_correct():
    curve = recall_precision_curve(pairs((0, 1, 0.1), (1, 0, 0.2)), {(0, 0)})
    assert all(p.recall == 0 for p in curve)


def test_curve_hand_example():
    curve = recall_precision_curve(pairs((0, 0, 0.1), (1, 2, 0.2), (2, 2, 0.3)),
                                   {(0, 0), (2, 2), (3, 3), (4, 4)})
    assert curve[-1].recall == pytest.approx(0.5)
    assert curve[-1].one_minus_precision == pytest.approx(1 / 3)
    assert recall_at(curve, 0.0) == pytest.approx(0.25)
    assert recall_at_ratio(curve, 0.25) == pytest.approx(0.25)


def test_curve_groups_ties_and_requires_order():
    curve = recall_precision_curve(pairs((0, 0, 0.1), (1, 5, 0.1), (2, 2, 0.3)), {(0, 0), (2, 2)})
    assert [p.matches for p in curve] == [2, 3]
    with pytest.raises(ValueError):
        recall_precision_curve(pairs((0, 0, 0.3), (1, 1, 0.1)), {(0, 0)})


def test_curve_empty_ground_truth():
    with pytest.raises(EmptyGroundTruthError):
        recall_precision_curve([], set())


def test_curve_csv():
    text = curve_to_csv(recall_precision_curve(pairs((0, 0, 0.5)), {(0, 0)}))
    assert text.splitlines() == [CURVE_HEADER, "0.500000,1,1,1.000000,0.000000"]


# -- baseline --------------------------------------------------------------------------


def test_baseline_dimension_and_gain_invariance(model, eval_images, eval_keypoints):
    img = eval_images["camera"]
    kps = assign_orientations(img, eval_keypoints["camera"][:20], model)
    base = baseline_single_view(img, kps, model)
    scaled = baseline_single_view(2.5 * img, kps, model)
    for d, s in zip(base, scaled):
        assert d.shape == (24,)
        assert np.linalg.norm(d) == pytest.approx(1.0)
        np.testing.assert_allclose(d, s, atol=1e-10)
    assert baseline_single_view(img, [Keypoint(-1, 0, 1)], model) == [None]


def _distractor_relative(x, y):
    """Distance to the true counterpart over distance to the nearest other counterpart."""
    d = np.linalg.norm(x[:, None] - y[None], axis=2)
    true = np.diag(d).copy()
    np.fill_diagonal(d, np.inf)
    return true / d.min(axis=1)


def test_baseline_not_invariant_to_tilt(model):
    # Raw distances live on different scales (unit vectors vs projector points), so each
    # descriptor's distance to its warped counterpart is measured relative to the nearest
    # non-corresponding warped descriptor -- the quantity nearest-neighbour matching uses.
    wins = total = 0
    for name in ("camera", "astronaut"):
        a = load(name)
        h = tilt_h(a.shape, 2.0, 0.5, persp=0.0)
        b = warp_image(a, h)
        ka = detect_dog(a, DogParams(contrast_threshold=0.01))[:150]
        kb = [Keypoint(*project(h, k.x, k.y), k.sigma * local_scale(h, k.x, k.y)) for k in ka]
        ka, kb = assign_orientations(a, ka, model), assign_orientations(b, kb, model)
        na, nb = describe(a, ka, model, "naive"), describe(b, kb, model, "naive")
        ba, bb = baseline_single_view(a, ka, model), baseline_single_view(b, kb, model)
        ok = [i for i in range(len(ka)) if all(v[i] is not None for v in (na, nb, ba, bb))]
        asr_rel = _distractor_relative(*(np.stack([v[i] for i in ok]) for v in (na, nb)))
        base_rel = _distractor_relative(*(np.stack([v[i] for i in ok]) for v in (ba, bb)))
        wins += int(np.sum(base_rel > asr_rel))
        total += len(ok)
    assert wins / total >= 0.6


# -- timing ---------------------------------------------------------------------------------


def test_bench_timing(model, eval_images, eval_keypoints):
    img = eval_images["astronaut"]
    kps = assign_orientations(img, eval_keypoints["astronaut"][:100], model)
    naive = bench_timing(img, kps, model, "naive", repetitions=20)
    fast = bench_timing(img, kps, model, "fast", repetitions=20)
    assert fast["warping"] == (0.0, 0.0)
    assert naive["warping"][0] > 0
    assert naive["total"][0] > fast["total"][0]
    lines = timing_to_csv(fast).splitlines()
    assert lines[0] == "stage,mean_ms,stddev_ms" and lines[1].startswith("warping,0.000000")
    with pytest.raises(ValueError):
        bench_timing(img, kps[:10], model, "fast")


def test_curve_for_self_match(model, eval_images, eval_keypoints):
    img = eval_images["coffee"]
    kps = assign_orientations(img, eval_keypoints["coffee"][:60], model)
    d = describe(img, kps, model, "fast")
    gt = ground_truth_correspondences(kps, kps, np.eye(3))
    curve = curve_for(d, d, gt)
    assert curve[-1].recall >= 0.95
