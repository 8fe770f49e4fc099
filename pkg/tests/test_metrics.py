import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfpformer.errors import UsageError
from cfpformer.metrics import dice, evaluate_masks, hausdorff
from oracles import dice_loops, hausdorff_loops

masks = arrays(np.uint8, (8, 8), elements=st.integers(0, 3))


def _pts(points, shape=(16, 16), c=1):
    m = np.zeros(shape, dtype=np.uint8)
    for p in points:
        m[p] = c
    return m


def test_dice_perfect_overlap():
    m = _pts([(1, 1), (2, 3), (5, 5)])
    assert dice(m, m, 1) == 1.0


def test_dice_disjoint():
    assert dice(_pts([(0, 0)]), _pts([(3, 3)]), 1) == 0.0


def test_dice_half_overlap():
    p = _pts([(0, 0), (0, 1), (0, 2), (0, 3)])
    g = _pts([(0, 2), (0, 3), (0, 4), (0, 5)])
    assert dice(p, g, 1) == 0.5


def test_dice_both_empty_is_one_and_one_empty_is_zero():
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert dice(empty, empty, 2) == 1.0
    assert dice(empty, _pts([(1, 1)], (4, 4), 2), 2) == 0.0


def test_hausdorff_identical_is_zero():
    m = _pts([(1, 1), (4, 7), (9, 2)])
    assert hausdorff(m, m, 1) == 0.0


def test_hausdorff_single_pair():
    assert hausdorff(_pts([(0, 0)]), _pts([(3, 4)]), 1) == 5.0


def test_hausdorff_empty_is_undefined():
    assert math.isnan(hausdorff(_pts([(0, 0)]), np.zeros((16, 16), np.uint8), 1))


def test_shape_mismatch_is_usage_error():
    with pytest.raises(UsageError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)), 1)
    with pytest.raises(UsageError):
        hausdorff(np.zeros((3, 3)), np.zeros((3, 4)), 1)


def test_random_20_pixel_sets_match_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cells = rng.choice(256, 40, replace=False)
        p = _pts([divmod(int(i), 16) for i in cells[:20]])
        g = _pts([divmod(int(i), 16) for i in cells[20:]])
        assert hausdorff(p, g, 1) == hausdorff_loops(p, g, 1)


@given(masks, masks, st.integers(0, 3))
def test_symmetry_and_ranges(p, g, c):
    d = dice(p, g, c)
    assert d == dice(g, p, c)
    assert 0.0 <= d <= 1.0
    h = hausdorff(p, g, c)
    h2 = hausdorff(g, p, c)
    assert (math.isnan(h) and math.isnan(h2)) or h == h2
    if not math.isnan(h):
        assert h >= 0
        assert (h == 0) == np.array_equal(p == c, g == c)


@given(masks, masks, st.integers(0, 3))
def test_property_matches_oracles(p, g, c):
    assert dice(p, g, c) == dice_loops(p, g, c)
    h, ref = hausdorff(p, g, c), hausdorff_loops(p, g, c)
    assert (math.isnan(h) and math.isnan(ref)) or h == ref


# -- report -----------------------------------------------------------------------------------

def test_perfect_predictions_report():
    rng = np.random.default_rng(1)
    gts = [rng.integers(0, 4, (8, 8)).astype(np.uint8) for _ in range(3)]
    rep = evaluate_masks(gts, gts, 4)
    assert all(rep.dice[c] == 1.0 for c in (1, 2, 3))
    assert all(rep.hd[c] == 0.0 for c in (1, 2, 3))
    assert rep.mean_dice == 1.0 and rep.mean_hd == 0.0


def test_single_sample_report_equals_sample_values():
    rng = np.random.default_rng(2)
    p = rng.integers(0, 4, (10, 10)).astype(np.uint8)
    g = rng.integers(0, 4, (10, 10)).astype(np.uint8)
    rep = evaluate_masks([p], [g], 4)
    for c in (1, 2, 3):
        assert rep.dice[c] == dice(p, g, c)
        assert rep.hd[c] == hausdorff(p, g, c)


def test_undefined_hd_is_excluded_from_means():
    g = _pts([(1, 1)], (4, 4), 1)
    p_empty = np.zeros((4, 4), np.uint8)
    rep = evaluate_masks([p_empty, g], [g, g], 2)
    assert rep.hd[1] == 0.0  # only the defined sample counts
    assert rep.dice[1] == 0.5


def test_report_csv_format_and_determinism():
    rng = np.random.default_rng(3)
    ps = [rng.integers(0, 4, (8, 8)).astype(np.uint8) for _ in range(2)]
    gs = [rng.integers(0, 4, (8, 8)).astype(np.uint8) for _ in range(2)]
    text = evaluate_masks(ps, gs, 4).to_csv()
    lines = text.splitlines()
    assert lines[0] == "class,dice,hd"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "2", "3", "mean"]
    for ln in lines[1:]:
        for field in ln.split(",")[1:]:
            assert field == "nan" or len(field.split(".")[1]) == 6
    assert text == evaluate_masks(ps, gs, 4).to_csv()


def test_empty_dataset():
    with pytest.raises(UsageError):
        evaluate_masks([], [], 4)
