import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piseg import metrics as Mt

from oracles import hd95_all_pairs


def test_thresholds_are_the_ten_sweep_values():
    assert Mt.IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_dsc_cases():
    a = np.zeros((4, 4), int)
    a[0, :4] = 1
    assert Mt.dsc_metric(a, a, 1) == 100.0
    assert Mt.dsc_metric(a, np.roll(a, 2, axis=0), 1) == 0.0
    b = np.zeros((4, 4), int)
    b[0, 2:] = 1
    b[1, :2] = 1
    assert Mt.dsc_metric(a, b, 1) == 50.0
    assert Mt.dsc_metric(np.zeros((3, 3)), np.zeros((3, 3)), 1) == 100.0


def test_hd95_identical_zero_and_unit_shift():
    a = np.zeros((6, 6), int)
    a[2, 2] = 1
    assert Mt.hd95_metric(a, a, 1) == 0.0
    assert Mt.hd95_metric(a, np.roll(a, 1, axis=1), 1) == 1.0


def test_hd95_sentinels():
    a = np.zeros((3, 4), int)
    b = a.copy()
    b[1, 1] = 1
    assert Mt.hd95_with_flag(a, b, 1) == (5.0, "empty_pred")
    assert Mt.hd95_with_flag(b, a, 1) == (5.0, "empty_gt")
    assert Mt.hd95_with_flag(a, a, 1) == (0.0, "both_empty")


def test_boundary_excludes_interior():
    m = np.zeros((5, 5), bool)
    m[1:4, 1:4] = True
    b = Mt.boundary(m)
    assert b.sum() == 8 and not b[2, 2]
    full = np.ones((3, 3), bool)
    assert Mt.boundary(full).sum() == 8  # the image edge counts as background


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), h=st.integers(2, 16), w=st.integers(2, 16))
def test_hd95_matches_all_pairs_oracle(seed, h, w):
    rng = np.random.default_rng(seed)
    a = rng.random((h, w)) < rng.uniform(0.1, 0.7)
    b = rng.random((h, w)) < rng.uniform(0.1, 0.7)
    if not a.any() or not b.any():
        return
    got = Mt.hd95_metric(a.astype(int), b.astype(int), 1)
    assert got == hd95_all_pairs(a, b)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_dsc_and_hd95_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 3, (10, 10))
    b = rng.integers(0, 3, (10, 10))
    for c in (1, 2):
        assert Mt.dsc_metric(a, b, c) == Mt.dsc_metric(b, a, c)
        assert Mt.hd95_metric(a, b, c) == Mt.hd95_metric(b, a, c)
        assert 0 <= Mt.dsc_metric(a, b, c) <= 100


def test_miou_ground_truth_probabilities():
    gt = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(int)
    mean, per = Mt.miou_sweep(gt.astype(float), gt)
    assert mean == 1.0 and per == [1.0] * 10


def test_miou_constant_0_6():
    mean, per = Mt.miou_sweep(np.full((5, 5), 0.6), np.ones((5, 5), int))
    assert per == [1.0, 1.0] + [0.0] * 8
    assert abs(mean - 0.2) < 1e-15


def test_iou_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((6, 6)) > 0.4, rng.random((6, 6)) > 0.6
    assert Mt.iou(a, b) == Mt.iou(b, a)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_iou_sweep_non_increasing_with_threshold(seed):
    rng = np.random.default_rng(seed)
    gt = rng.random((8, 8)) > 0.5
    prob = np.clip(gt * 0.7 + rng.random((8, 8)) * 0.4, 0, 1)
    _, per = Mt.miou_sweep(prob, gt)
    # only holds when raising the threshold never drops an overlap pixel less than a false one;
    # here all gt pixels sit above 0.7 > any non-gt pixel's 0.4 ceiling
    assert all(a >= b for a, b in zip(per, per[1:]))


def test_summary_means_and_ranges():
    gt = np.zeros((8, 8), int)
    gt[2:6, 2:6] = 1
    pred = np.roll(gt, 1, axis=1)
    reps = [Mt.evaluate_case("a", gt, gt, 2), Mt.evaluate_case("b", pred, gt, 2)]
    s = Mt.summarize(reps, 2)
    assert s["mean"]["dsc"]["1"] == pytest.approx((100 + 75) / 2)
    assert s["mean"]["hd95"]["1"] == pytest.approx(0.5)  # case b: HD95 1, case a: 0
    assert len(s["cases"]) == 2 and s["thresholds"][0] == 0.5
    assert math.isclose(Mt.mean_foreground_dsc([gt, pred], [gt, gt], 2), 0.875)
