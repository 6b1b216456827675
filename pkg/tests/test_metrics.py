import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multinet.data_io import KittiObjectRecord
from multinet.det_decoder import BoundingBox, nms
from multinet.metrics import (
    THRESHOLDS,
    average_precision,
    cls_metrics,
    dataset_average_precision,
    difficulty_filter,
    evaluate_detection,
    format_report,
    in_tier,
    max_f1,
)

from oracles import (
    ap_exhaustive,
    ap_from_ranked_flags,
    confusion_counts,
    f1_sweep_direct,
    greedy_matches,
    nms_bruteforce,
    sweep_ap,
)

N_RANDOM = 120


def random_boxes(rng, n, size=64.0):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, size, 2)
        w, h = rng.uniform(2, size / 2, 2)
        out.append((x1, y1, x1 + w, y1 + h))
    return out


def as_boxes(corners, scores):
    return [BoundingBox.from_corners(*c, confidence=float(s)) for c, s in zip(corners, scores)]


def jittered(rng, gts, n_extra):
    """Detections near the ground truth plus a few random ones, so matches actually happen."""
    dets = [tuple(np.add(g, rng.normal(0, 3, 4))) for g in gts if rng.random() < 0.8]
    dets = [(x1, y1, max(x2, x1 + 1), max(y2, y1 + 1)) for x1, y1, x2, y2 in dets]
    return dets + random_boxes(rng, n_extra)


def record(height=50.0, occluded=0, truncated=0.0, left=10.0, top=10.0, width=30.0):
    return KittiObjectRecord("Car", truncated, occluded, 0.0, left, top, left + width, top + height)


class TestAveragePrecision:
    def test_single_perfect_match(self):
        gt = [(0, 0, 10, 10)]
        assert average_precision(as_boxes(gt, [0.9]), gt) == 1.0

    def test_no_ground_truth_is_undefined(self):
        assert average_precision(as_boxes([(0, 0, 5, 5)], [0.5]), []) is None

    def test_no_detections_is_zero(self):
        assert average_precision([], [(0, 0, 5, 5)]) == 0.0

    def test_half_recall_with_leading_false_positive(self):
        gts = [(0, 0, 10, 10), (50, 50, 60, 60)]
        dets = as_boxes([(100, 100, 110, 110), (0, 0, 10, 10)], [0.9, 0.8])
        # recall 0.5 reached at precision 0.5
        assert average_precision(dets, gts) == pytest.approx(0.25)

    def test_matches_exhaustive_oracle(self):
        for seed in range(N_RANDOM):
            rng = np.random.default_rng(seed)
            gts = random_boxes(rng, int(rng.integers(1, 8)))
            dets = jittered(rng, gts, int(rng.integers(0, 4)))[:10]
            scores = rng.permutation(len(dets)) / max(len(dets), 1) + 0.01
            ours = average_precision(as_boxes(dets, scores), gts, 0.5)
            assert ours == pytest.approx(ap_exhaustive(dets, list(scores), gts, 0.5), abs=1e-12), seed

    def test_multi_image_matches_oracle(self):
        for seed in range(N_RANDOM):
            rng = np.random.default_rng(1000 + seed)
            rows, ranked, n_gt = [], [], 0
            for _ in range(int(rng.integers(1, 4))):
                gts = random_boxes(rng, int(rng.integers(0, 4)))
                dets = jittered(rng, gts, int(rng.integers(0, 3)))
                scores = rng.uniform(0.01, 1.0, len(dets))
                rows.append((as_boxes(dets, scores), gts, []))
                flags = greedy_matches(dets, list(scores), gts, 0.5)
                ranked += zip(sorted(scores, reverse=True), flags)
                n_gt += len(gts)
            ap, _ = dataset_average_precision(rows)
            if n_gt == 0:
                assert ap is None
                continue
            ranked.sort(key=lambda t: -t[0])
            expected = ap_from_ranked_flags([f for _, f in ranked], n_gt) if ranked else 0.0
            assert ap == pytest.approx(expected, abs=1e-12), seed

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rank_only_dependence(self, seed):
        rng = np.random.default_rng(seed)
        gts = random_boxes(rng, 4)
        dets = jittered(rng, gts, 3)
        scores = rng.uniform(0.0, 1.0, len(dets))
        base = average_precision(as_boxes(dets, scores), gts)
        warped = average_precision(as_boxes(dets, np.exp(3 * scores) - 7), gts)
        assert base == warped

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_zero_confidence_false_positive_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        gts = random_boxes(rng, 4)
        dets = jittered(rng, gts, 2)
        scores = rng.uniform(0.1, 1.0, len(dets))
        base = average_precision(as_boxes(dets, scores), gts)
        extra = as_boxes(dets, scores) + [BoundingBox.from_corners(500, 500, 510, 510, confidence=0.0)]
        assert average_precision(extra, gts) <= base

    def test_ignored_ground_truth_hits_are_dropped(self):
        gts = [(0, 0, 10, 10)]
        ignored = [(50, 50, 60, 60)]
        dets = as_boxes([(50, 50, 60, 60), (0, 0, 10, 10)], [0.9, 0.5])
        assert average_precision(dets, gts, ignored=ignored) == 1.0
        assert average_precision(dets, gts) == 0.5


class TestDifficulty:
    def test_large_clear_box_in_every_tier(self):
        r = record(height=50)
        assert all(in_tier(r, t) for t in ("easy", "moderate", "hard"))

    def test_mid_box(self):
        r = record(height=30, occluded=1, truncated=0.2)
        assert [t for t in ("easy", "moderate", "hard") if in_tier(r, t)] == ["moderate", "hard"]

    def test_small_box_in_no_tier(self):
        r = record(height=20)
        assert not any(in_tier(r, t) for t in ("easy", "moderate", "hard"))

    def test_filter_rejects_unknown_tier(self):
        with pytest.raises(ValueError, match="tier"):
            difficulty_filter([record()], "extreme")

    def test_out_of_tier_box_is_ignored_not_missed(self):
        small = record(height=20, left=100)
        big = record(height=50, left=10)
        dets = [big.to_box(), small.to_box()]
        for d, c in zip(dets, (0.9, 0.8)):
            d.confidence = c
        res = evaluate_detection([dets], [[big, small]])
        assert res.ap["easy"] == 1.0 and res.ap["moderate"] == 1.0


class TestMaxF1:
    def test_perfect_probability(self):
        gt = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(np.uint8)
        assert max_f1(gt.astype(float), gt).max_f1 == 1.0

    def test_inverted_probability_closed_form(self):
        gt = np.zeros((10, 10), dtype=np.uint8)
        gt[:3] = 1
        a = gt.mean()
        res = max_f1(1.0 - gt, gt)
        assert res.max_f1 == pytest.approx(2 * a / (a + 1))

    def test_empty_ground_truth_is_undefined(self):
        res = max_f1(np.full((4, 4), 0.3), np.zeros((4, 4)))
        assert res.max_f1 is None and res.ap is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            max_f1(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_matches_dense_sweep_oracle(self):
        for seed in range(N_RANDOM):
            rng = np.random.default_rng(seed)
            h, w = rng.integers(2, 33, 2)
            gt = (rng.random((h, w)) < rng.uniform(0.05, 0.9)).astype(np.uint8)
            if gt.sum() == 0:
                gt[0, 0] = 1
            # mix of continuous values and values sitting exactly on thresholds
            prob = np.where(rng.random((h, w)) < 0.3, rng.choice(THRESHOLDS, (h, w)), rng.random((h, w)))
            rows = f1_sweep_direct(prob, gt, THRESHOLDS)
            res = max_f1(prob, gt)
            best = max(r[2] for r in rows)
            assert res.max_f1 == pytest.approx(best, abs=1e-12), seed
            assert res.ap == pytest.approx(sweep_ap(rows), abs=1e-12), seed

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_on_threshold_grid(self, seed):
        # probabilities on the grid, transform maps grid points to grid points
        rng = np.random.default_rng(seed)
        gt = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        gt[0, 0] = 1
        idx = rng.integers(0, 51, (8, 8))
        base = max_f1(THRESHOLDS[idx], gt).max_f1
        warped = max_f1(THRESHOLDS[2 * idx], gt).max_f1
        assert base == pytest.approx(warped, abs=1e-12)


class TestNms:
    def test_matches_bruteforce(self):
        for seed in range(N_RANDOM):
            rng = np.random.default_rng(seed)
            corners = random_boxes(rng, int(rng.integers(1, 11)), size=40)
            scores = rng.uniform(0, 1, len(corners))
            kept = nms(as_boxes(corners, scores), 0.5)
            ours = sorted(b.corners for b in kept)
            ref = sorted(tuple(corners[i]) for i in nms_bruteforce(corners, list(scores), 0.5))
            assert np.allclose(ours, ref) and len(ours) == len(ref), seed

    def test_disjoint_boxes_all_survive(self):
        boxes = as_boxes([(0, 0, 10, 10), (20, 20, 30, 30)], [0.5, 0.6])
        assert len(nms(boxes)) == 2

    def test_duplicate_keeps_higher_confidence(self):
        boxes = as_boxes([(0, 0, 10, 10), (0, 0, 10, 10)], [0.5, 0.6])
        assert [b.confidence for b in nms(boxes)] == [0.6]


class TestClsMetrics:
    def test_all_correct(self):
        res = cls_metrics([1, 0, 1], [1, 0, 1])
        assert (res.accuracy, res.precision, res.recall) == (1.0, 1.0, 1.0)

    def test_all_negative_predictions(self):
        res = cls_metrics([0, 0, 0, 0], [1, 1, 0, 0])
        assert res.recall == 0.0 and res.precision is None

    def test_matches_confusion_oracle(self):
        for seed in range(N_RANDOM):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 30))
            pred, lab = rng.integers(0, 2, n), rng.integers(0, 2, n)
            tp, fp, fn, correct = confusion_counts(pred.tolist(), lab.tolist())
            res = cls_metrics(pred, lab)
            assert res.accuracy == correct / n
            assert res.precision == (tp / (tp + fp) if tp + fp else None)
            assert res.recall == (tp / (tp + fn) if tp + fn else None)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cls_metrics([1, 0], [1])


class TestReport:
    def test_sections_and_missing_values(self):
        text = format_report({"seg": {"MaxF1": 0.5, "AP": None}})
        assert text == "[seg]\nMaxF1 = 0.5000\nAP = n/a\n"
