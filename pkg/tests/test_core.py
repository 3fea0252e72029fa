import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitmask.core import (
    Box,
    BoxDelta,
    GeometryError,
    argmax_lowest,
    box_from_mask,
    box_iou,
    box_iou_matrix,
    decode_box_delta,
    decode_deltas,
    encode_box_delta,
    encode_deltas,
    mask_iou,
    validate_distribution,
)


def boxes_strategy(lo=0.0, hi=100.0):
    coord = st.floats(lo, hi, allow_nan=False, width=64)
    return st.builds(
        lambda x1, y1, w, h: Box(x1, y1, x1 + w, y1 + h),
        coord,
        coord,
        st.floats(0.5, 50.0),
        st.floats(0.5, 50.0),
    )


class TestBox:
    def test_degenerate_raises(self):
        with pytest.raises(GeometryError):
            Box(0, 0, 0, 10)
        with pytest.raises(GeometryError):
            Box(5, 5, 4, 10)
        with pytest.raises(GeometryError):
            Box(0, 0, float("nan"), 1)

    def test_area_and_center(self):
        b = Box(1, 2, 5, 10)
        assert b.area == 32
        assert b.center == (3, 6)

    def test_clipped(self):
        b = Box(-5, -5, 200, 50).clipped(128, 128)
        assert 0 <= b.x1 < b.x2 <= 128
        assert 0 <= b.y1 < b.y2 <= 128


class TestBoxIou:
    def test_identical(self):
        b = Box(0, 0, 10, 10)
        assert box_iou(b, b) == 1.0

    def test_disjoint(self):
        assert box_iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_partial_overlap_hand_computed(self):
        # intersection 5x5=25, union 100+100-25=175
        v = box_iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15))
        assert v == pytest.approx(25 / 175, abs=1e-12)

    @given(boxes_strategy(), boxes_strategy())
    def test_symmetric_and_bounded(self, a, b):
        ab, ba = box_iou(a, b), box_iou(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 <= ab <= 1.0

    @given(boxes_strategy())
    def test_self_iou_is_one(self, a):
        assert box_iou(a, a) == pytest.approx(1.0)

    @given(boxes_strategy(), st.floats(0.01, 5.0))
    def test_distinct_boxes_below_one(self, a, shift):
        b = Box(a.x1 + shift, a.y1, a.x2 + shift, a.y2)
        assert box_iou(a, b) < 1.0

    def test_matrix_matches_scalar(self, rng):
        a = [Box(x, y, x + w, y + h) for x, y, w, h in rng.uniform(1, 20, size=(8, 4))]
        b = [Box(x, y, x + w, y + h) for x, y, w, h in rng.uniform(1, 20, size=(5, 4))]
        m = box_iou_matrix(np.array([q.as_tuple() for q in a]), np.array([q.as_tuple() for q in b]))
        for i in range(8):
            for j in range(5):
                assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)


class TestMaskIou:
    def test_identical_nonempty(self):
        m = np.zeros((6, 6), dtype=bool)
        m[1:4, 2:5] = True
        assert mask_iou(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((6, 6), dtype=bool)
        b = np.zeros((6, 6), dtype=bool)
        a[0, 0] = True
        b[5, 5] = True
        assert mask_iou(a, b) == 0.0

    def test_half_overlap_brute_force(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[:, :2] = True  # left half, 8 px
        b[:2, :] = True  # top half, 8 px
        inter = int(np.sum(a & b))
        union = int(np.sum(a | b))
        assert (inter, union) == (4, 12)
        assert mask_iou(a, b) == pytest.approx(4 / 12)

    def test_both_empty_is_one(self):
        z = np.zeros((3, 3), dtype=bool)
        assert mask_iou(z, z) == 1.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(GeometryError):
            mask_iou(np.zeros((3, 3), dtype=bool), np.zeros((4, 3), dtype=bool))


class TestBoxDelta:
    def test_identity_encodes_to_zero(self):
        b = Box(3, 4, 10, 20)
        d = encode_box_delta(b, b)
        assert d.as_array() == pytest.approx(np.zeros(4), abs=1e-12)

    def test_hand_computed_example(self):
        d = encode_box_delta(Box(0, 0, 20, 10), Box(0, 0, 10, 10))
        assert d.dx == pytest.approx(0.5)
        assert d.dy == pytest.approx(0.0)
        assert d.dw == pytest.approx(np.log(2))
        assert d.dh == pytest.approx(0.0)

    def test_round_trip_1000_random_pairs(self, rng):
        worst = 0.0
        for _ in range(1000):
            x1, y1 = rng.uniform(0, 80, 2)
            t = Box(x1, y1, x1 + rng.uniform(0.5, 40), y1 + rng.uniform(0.5, 40))
            x1r, y1r = rng.uniform(0, 80, 2)
            r = Box(x1r, y1r, x1r + rng.uniform(0.5, 40), y1r + rng.uniform(0.5, 40))
            back = decode_box_delta(encode_box_delta(t, r), r)
            err = np.abs(back.as_array() - t.as_array()) / np.maximum(1.0, np.abs(t.as_array()))
            worst = max(worst, float(err.max()))
        assert worst < 1e-6

    @given(boxes_strategy(), boxes_strategy())
    def test_round_trip_property(self, t, r):
        back = decode_box_delta(encode_box_delta(t, r), r)
        err = np.abs(back.as_array() - t.as_array()) / np.maximum(1.0, np.abs(t.as_array()))
        assert float(err.max()) < 1e-6

    def test_non_finite_delta_raises(self):
        with pytest.raises(GeometryError):
            BoxDelta(float("inf"), 0, 0, 0)
        with pytest.raises(GeometryError):
            decode_deltas(np.array([[np.nan, 0, 0, 0]]), np.array([[0, 0, 10, 10]]))

    def test_vectorized_matches_scalar(self, rng):
        targets = rng.uniform(1, 30, size=(16, 2))
        refs = rng.uniform(1, 30, size=(16, 2))
        t_boxes = np.concatenate([targets, targets + rng.uniform(1, 20, size=(16, 2))], axis=1)
        r_boxes = np.concatenate([refs, refs + rng.uniform(1, 20, size=(16, 2))], axis=1)
        enc = encode_deltas(t_boxes, r_boxes)
        for i in range(16):
            d = encode_box_delta(Box(*t_boxes[i]), Box(*r_boxes[i]))
            assert enc[i] == pytest.approx(d.as_array(), abs=1e-12)
        dec = decode_deltas(enc, r_boxes)
        assert dec == pytest.approx(t_boxes, abs=1e-9)


class TestMaskBox:
    def test_box_from_mask_tight(self):
        m = np.zeros((10, 10), dtype=bool)
        m[2:5, 3:8] = True
        b = box_from_mask(m)
        assert b.as_tuple() == (3.0, 2.0, 8.0, 5.0)

    def test_empty_mask_raises(self):
        with pytest.raises(GeometryError):
            box_from_mask(np.zeros((4, 4), dtype=bool))


class TestDistribution:
    def test_valid(self):
        validate_distribution(np.array([0.2, 0.5, 0.3]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            validate_distribution(np.array([0.2, 0.2, 0.2]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            validate_distribution(np.array([-0.1, 0.6, 0.5]))

    def test_argmax_ties_go_low(self):
        assert argmax_lowest(np.array([0.2, 0.4, 0.4])) == 1
        assert argmax_lowest(np.array([0.5, 0.5])) == 0
