import numpy as np
import pytest

from splitmask.core import Box, Detection, box_from_mask
from splitmask.evalkit import (
    ApBreakdown,
    EvalError,
    EvalHalf,
    IncomparableReportsError,
    area_buckets,
    average_precision,
    compare_reports,
    evaluate,
    load_eval_half,
    match_detections,
    misrouting_from_records,
    plot_comparison,
    render_csv,
    render_table,
    save_eval_half,
)
from splitmask.shapesynth import InstanceAnnotation, SceneSample
from splitmask.switch_split import DispatchRecord

from oracles import exact_pr_integral, greedy_match_oracle


def make_det(mask, score, class_id=1):
    return Detection(box=box_from_mask(mask), class_id=class_id, score=score, mask=mask)


def make_gt(mask, class_id=1):
    return InstanceAnnotation(
        class_id=class_id, box=box_from_mask(mask), mask=mask, area=int(mask.sum())
    )


def square(size, rows, cols):
    m = np.zeros((size, size), dtype=bool)
    m[rows, cols] = True
    return m


class TestMatchDetections:
    def test_single_match(self):
        gt = make_gt(square(32, slice(4, 14), slice(4, 14)))
        det_mask = square(32, slice(5, 14), slice(4, 14))  # IoU 0.9
        tp = match_detections([make_det(det_mask, 0.8)], [gt], iou_thresh=0.5)
        assert tp.tolist() == [True]

    def test_duplicate_detection_single_gt(self):
        gt_mask = square(32, slice(4, 14), slice(4, 14))
        gt = make_gt(gt_mask)
        d1 = make_det(gt_mask, 0.9)
        d2 = make_det(gt_mask.copy(), 0.7)
        tp = match_detections([d2, d1], [gt], iou_thresh=0.5)
        # higher score wins regardless of list order
        assert tp.tolist() == [False, True]

    def test_mixed_classes_rejected(self):
        m = square(16, slice(2, 6), slice(2, 6))
        with pytest.raises(EvalError):
            match_detections([make_det(m, 0.5, class_id=1)], [make_gt(m, class_id=2)], 0.5)

    def test_randomized_vs_brute_force(self, rng):
        for _ in range(40):
            n_det, n_gt = int(rng.integers(1, 7)), int(rng.integers(1, 5))
            gts, dets = [], []
            for _ in range(n_gt):
                r0, c0 = rng.integers(0, 20, 2)
                gts.append(make_gt(square(32, slice(r0, r0 + 8), slice(c0, c0 + 8))))
            for _ in range(n_det):
                r0, c0 = rng.integers(0, 20, 2)
                dets.append(
                    make_det(
                        square(32, slice(r0, r0 + 8), slice(c0, c0 + 8)),
                        float(np.round(rng.uniform(0, 1), 2)),
                    )
                )
            got = match_detections(dets, gts, 0.35)
            from splitmask.core import mask_iou

            iou = np.array([[mask_iou(d.mask, g.mask) for g in gts] for d in dets])
            scores = np.array([d.score for d in dets])
            assert got.tolist() == greedy_match_oracle(iou, scores, 0.35).tolist()


class TestAveragePrecision:
    def test_perfect_detector(self):
        assert average_precision([True, True, True], [0.9, 0.8, 0.7], 3) == pytest.approx(1.0)

    def test_hand_built_half(self):
        # FP above a TP on a single ground truth: envelope is 0.5 everywhere
        assert average_precision([False, True], [0.9, 0.8], 1) == pytest.approx(0.5)

    def test_no_gt_undefined(self):
        assert average_precision([], [], 0) is None

    def test_no_detections_zero(self):
        assert average_precision([], [], 3) == 0.0

    def test_matches_exact_pr_integral(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 25))
            tp = rng.uniform(0, 1, n) < 0.5
            scores = np.round(rng.uniform(0, 1, n), 2)
            num_gt = int(tp.sum() + rng.integers(1, 6))
            got = average_precision(tp, scores, num_gt)
            want = exact_pr_integral(tp, scores, num_gt)
            assert abs(got - want) <= 0.01

    def test_tie_order_invariance(self, rng):
        tp = [True, False, True, False, True]
        scores = [0.5, 0.5, 0.5, 0.9, 0.2]
        base = average_precision(tp, scores, 4)
        for _ in range(10):
            perm = rng.permutation(5)
            assert average_precision([tp[i] for i in perm], [scores[i] for i in perm], 4) == base

    def test_adding_top_tp_never_decreases(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 15))
            tp = (rng.uniform(0, 1, n) < 0.5).tolist()
            scores = rng.uniform(0, 0.8, n).tolist()
            num_gt = int(sum(tp)) + int(rng.integers(1, 4))
            base = average_precision(tp, scores, num_gt)
            grown = average_precision(tp + [True], scores + [0.95], num_gt)
            assert grown >= base - 1e-12

    def test_adding_bottom_fp_never_increases(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 15))
            tp = (rng.uniform(0, 1, n) < 0.5).tolist()
            scores = rng.uniform(0.2, 1.0, n).tolist()
            num_gt = int(sum(tp)) + int(rng.integers(1, 4))
            base = average_precision(tp, scores, num_gt)
            grown = average_precision(tp + [False], scores + [0.05], num_gt)
            assert grown <= base + 1e-12


def _fixture_scene():
    """3 images, 5 ground truths, 7 detections, hand-assigned masks on a
    64x64 canvas (area scale s=0.01: medium >= 10.24 px, large >= 92.16 px)."""
    size = 64
    img = np.zeros((size, size, 3), dtype=np.float32)

    gt1 = square(size, slice(10, 16), slice(10, 16))  # 36 px, medium
    gt2 = square(size, slice(30, 42), slice(30, 42))  # 144 px, large
    gt3 = square(size, slice(5, 11), slice(20, 26))  # 36 px
    gt4 = square(size, slice(40, 46), slice(40, 46))  # 36 px
    gt5 = square(size, slice(20, 26), slice(6, 12))  # 36 px

    samples = [
        SceneSample(0, img, [make_gt(gt1), make_gt(gt2)]),
        SceneSample(1, img, [make_gt(gt3), make_gt(gt4)]),
        SceneSample(2, img, [make_gt(gt5)]),
    ]
    dets = [
        [
            make_det(gt1.copy(), 0.9),  # exact: TP at every threshold
            make_det(square(size, slice(32, 44), slice(30, 42)), 0.85),  # IoU 120/168
        ],
        [
            make_det(gt3.copy(), 0.8),  # exact TP
            make_det(gt3.copy(), 0.7),  # duplicate: FP
            make_det(square(size, slice(41, 47), slice(40, 46)), 0.65),  # IoU 30/42
        ],
        [
            make_det(gt5.copy(), 0.6),  # exact TP
            make_det(square(size, slice(50, 56), slice(20, 26)), 0.2),  # FP, no overlap
        ],
    ]
    return samples, dets


class TestEvaluate:
    def test_ground_truth_as_predictions_is_perfect(self, tiny_val):
        import warnings

        sub = [s for s in tiny_val if s.annotations]
        dets = [
            [make_det(a.mask.copy(), 1.0, a.class_id) for a in s.annotations] for s in sub
        ]
        for c in range(1, 6):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                bd = evaluate(sub, dets, c)
            for m in ApBreakdown.METRICS:
                v = getattr(bd, m)
                assert v is None or v == pytest.approx(1.0)

    def test_no_predictions_is_zero(self, tiny_val):
        sub = [s for s in tiny_val if any(a.class_id == 1 for a in s.annotations)]
        bd = evaluate(sub, [[] for _ in sub], 1)
        assert bd.ap == 0.0 and bd.ap50 == 0.0

    def test_empty_subdataset_warns_undefined(self):
        with pytest.warns(RuntimeWarning):
            bd = evaluate([], [], 1)
        assert all(getattr(bd, m) is None for m in ApBreakdown.METRICS)

    def test_hand_fixture_breakdown(self):
        samples, dets = _fixture_scene()
        bd = evaluate(samples, dets, 1)
        # hand-computed: see fixture geometry. IoU of the two shifted
        # detections is 5/7 (TP for thresholds .50-.70, FP above).
        assert bd.ap50 == pytest.approx((61 + 40 * 5 / 6) / 101, abs=1e-12)
        assert bd.ap75 == pytest.approx((21 + 20 * 2 / 3 + 20 * 0.5) / 101, abs=1e-12)
        assert bd.ap == pytest.approx((5 * bd.ap50 + 5 * bd.ap75) / 10, abs=1e-12)
        assert bd.ap_small is None
        assert bd.ap_medium == pytest.approx((5 * (91 / 101) + 5 * (66 / 101)) / 10, abs=1e-12)
        assert bd.ap_large == pytest.approx(0.5, abs=1e-12)

    def test_fixture_matches_pr_oracle_per_threshold(self):
        from splitmask.core import mask_iou

        samples, dets = _fixture_scene()
        bd = evaluate(samples, dets, 1)
        aps = []
        for thr in np.round(np.arange(0.5, 0.96, 0.05), 2):
            labels, scores = [], []
            for s, ds in zip(samples, dets):
                iou = np.array([[mask_iou(d.mask, g.mask) for g in s.annotations] for d in ds])
                sc = np.array([d.score for d in ds])
                tp = greedy_match_oracle(iou, sc, thr)
                labels.extend(tp.tolist())
                scores.extend(sc.tolist())
            aps.append(exact_pr_integral(labels, scores, 5))
        assert bd.ap == pytest.approx(float(np.mean(aps)), abs=0.01)

    def test_image_permutation_invariance(self, rng):
        samples, dets = _fixture_scene()
        base = evaluate(samples, dets, 1)
        perm = [2, 0, 1]
        shuffled = evaluate([samples[i] for i in perm], [dets[i] for i in perm], 1)
        for m in ApBreakdown.METRICS:
            assert getattr(base, m) == getattr(shuffled, m)

    def test_detection_permutation_invariance_distinct_scores(self):
        samples, dets = _fixture_scene()
        base = evaluate(samples, dets, 1)
        flipped = evaluate(samples, [list(reversed(d)) for d in dets], 1)
        for m in ApBreakdown.METRICS:
            assert getattr(base, m) == getattr(flipped, m)


def half(tag, ap_by_class, digest="d0", names=None):
    return EvalHalf(
        model_tag=tag,
        dataset_digest=digest,
        per_class={c: ApBreakdown(ap=v, ap50=v, ap75=v) for c, v in ap_by_class.items()},
        class_names=names or {},
    )


class TestCompareReports:
    def test_published_style_delta(self):
        # canonical before/after pair: 0.580 -> 0.622 gives +0.042
        rep = compare_reports(half("before", {1: 0.580}), half("after", {1: 0.622}))
        assert rep.deltas[1]["ap"] == pytest.approx(0.042)
        assert rep.mean_ap_delta == pytest.approx(0.042)

    def test_equal_reports_zero_delta(self):
        a = half("x", {1: 0.3, 2: 0.7})
        rep = compare_reports(a, half("y", {1: 0.3, 2: 0.7}))
        assert all(rep.deltas[c]["ap"] == 0.0 for c in (1, 2))
        assert rep.mean_ap_delta == 0.0

    def test_aggregate_over_four_model_rows(self):
        pairs = {
            "mask": (0.580, 0.622),
            "cascade": (0.618, 0.667),
            "htc": (0.654, 0.673),
            "detectors": (0.669, 0.687),
        }
        deltas = []
        for tag, (b, a) in pairs.items():
            rep = compare_reports(half(f"{tag}-b", {1: b}), half(f"{tag}-a", {1: a}))
            deltas.append(rep.mean_ap_delta)
        assert float(np.mean(deltas)) == pytest.approx(0.032)

    def test_antisymmetric(self):
        a = half("a", {1: 0.31, 2: 0.55})
        b = half("b", {1: 0.42, 2: 0.50})
        fwd = compare_reports(a, b)
        rev = compare_reports(b, a)
        for c in (1, 2):
            assert fwd.deltas[c]["ap"] == pytest.approx(-rev.deltas[c]["ap"])
        assert fwd.mean_ap_delta == pytest.approx(-rev.mean_ap_delta)

    def test_digest_mismatch_rejected(self):
        with pytest.raises(IncomparableReportsError):
            compare_reports(half("a", {1: 0.5}, digest="xx"), half("b", {1: 0.5}, digest="yy"))

    def test_class_set_mismatch_rejected(self):
        with pytest.raises(IncomparableReportsError):
            compare_reports(half("a", {1: 0.5}), half("b", {1: 0.5, 2: 0.6}))

    def test_undefined_buckets_excluded(self):
        a = half("a", {1: 0.5, 2: None})
        b = half("b", {1: 0.6, 2: None})
        rep = compare_reports(a, b)
        assert rep.deltas[2]["ap"] is None
        assert rep.mean_ap_delta == pytest.approx(0.1)

    def test_render_and_serialize(self, tmp_path):
        a = half("base", {1: 0.5, 2: 0.25}, names={1: "disk", 2: "ring"})
        b = half("split", {1: 0.63, 2: 0.20}, names={1: "disk", 2: "ring"})
        rep = compare_reports(a, b)
        table = render_table(rep)
        assert "disk" in table and "ring" in table
        csv = render_csv(rep)
        assert "disk,ap,0.500000,0.630000,0.130000" in csv
        save_eval_half(a, tmp_path / "a.json")
        back = load_eval_half(tmp_path / "a.json")
        assert back.model_tag == "base"
        assert back.per_class[1].ap == 0.5
        plot_comparison({"model": rep}, tmp_path / "chart.png")
        assert (tmp_path / "chart.png").stat().st_size > 500


class TestMisrouting:
    def _scene_with_boxes(self):
        size = 64
        img = np.zeros((size, size, 3), dtype=np.float32)
        gts = [
            make_gt(square(size, slice(8, 20), slice(8, 20)), class_id=1),
            make_gt(square(size, slice(36, 52), slice(30, 44)), class_id=3),
        ]
        return SceneSample(0, img, gts)

    def _record(self, box, routed):
        return DispatchRecord(
            roi_index=0, routed_class=routed, box=box, score=0.9, distribution=np.array([])
        )

    def test_oracle_router_rate_zero(self):
        s = self._scene_with_boxes()
        recs = [self._record(a.box, a.class_id) for a in s.annotations]
        rep = misrouting_from_records([recs], [s])
        assert rep.rate == 0.0
        assert rep.matched == 2 and rep.background_fp == 0

    def test_uniform_random_router_near_four_fifths(self, rng):
        s = self._scene_with_boxes()
        records = []
        for _ in range(4000):
            gt = s.annotations[int(rng.integers(0, 2))]
            records.append(self._record(gt.box, int(rng.integers(1, 6))))
        rep = misrouting_from_records([records], [s])
        assert rep.rate == pytest.approx(0.8, abs=0.03)

    def test_unmatched_counts_as_background_fp(self):
        s = self._scene_with_boxes()
        stray = self._record(Box(0.0, 50.0, 6.0, 60.0), routed=2)
        rep = misrouting_from_records([[stray]], [s])
        assert rep.background_fp == 1
        assert rep.matched == 0 and rep.rate is None

    def test_empty_input_undefined(self):
        rep = misrouting_from_records([[]], [self._scene_with_boxes()])
        assert rep.rate is None and rep.dispatched == 0


class TestAreaBuckets:
    def test_scaled_thresholds(self):
        b = area_buckets(128.0 * 128.0)
        s = (128.0 * 128.0) / 640.0**2
        assert b["small"] == (0.0, 32.0**2 * s)
        assert b["medium"][1] == pytest.approx(96.0**2 * s)
        assert b["large"][1] == float("inf")
