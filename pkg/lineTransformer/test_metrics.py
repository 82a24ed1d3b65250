"""
评测指标测试

运行方式：
   pytest lineTransformer/test_metrics.py -v
"""

import numpy as np
import pytest

from .exceptions import DatasetParseError, InputError, ParameterError
from .metrics import (
    MetricConfig,
    RawMatchData,
    evaluate_predictions,
    export_pr_curve,
    heatmap_ap,
    pr_curve,
    rasterize,
    read_pr_curve,
    read_segments_jsonl,
    segment_pixels,
    structural_ap,
    structural_fscore,
    structural_match,
    write_segments_jsonl,
)
from .models import LineSegment, PRCurve, ScoredSegment


def scored(x1, y1, x2, y2, score) -> ScoredSegment:
    return ScoredSegment(x1, y1, x2, y2, score=score)


def envelope_area(points) -> float:
    area, previous_recall = 0.0, 0.0
    for i, (recall, _, _) in enumerate(points):
        best = max(p for _, p, _ in points[i:])
        area += (recall - previous_recall) * best
        previous_recall = recall
    return area


def oracle_sap(preds_per_image, gts_per_image, threshold, extent=128) -> float:
    """逐阈值计数：阈值 t 下的 TP 数等于至少拥有一条保留预测（最近且距离 < ϑ）的真值数"""
    owner = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        for p in preds:
            best, best_j = None, None
            for j, g in enumerate(gts):
                direct = sum((a - b) ** 2 for a, b in zip(p.as_array() * extent, g.as_array() * extent))
                reverse = sum((a - b) ** 2 for a, b in zip(p.as_array() * extent, g.reversed().as_array() * extent))
                d = min(direct, reverse) ** 0.5
                if best is None or d < best:
                    best, best_j = d, j
            key = None if best is None or best >= threshold else (id(gts), best_j)
            owner.append((p.score, key))
    num_gt = sum(len(g) for g in gts_per_image)
    points = []
    for t in sorted({s for s, _ in owner}, reverse=True):
        retained = [k for s, k in owner if s >= t]
        tp = len({k for k in retained if k is not None})
        points.append((tp / num_gt, tp / len(retained), t))
    return envelope_area(points)


def chebyshev_near(pixel, pixels) -> bool:
    return any(abs(pixel[0] - q[0]) <= 1 and abs(pixel[1] - q[1]) <= 1 for q in pixels)


def oracle_heatmap_ap(preds, gts, extent) -> float:
    gt_pixels = {px for g in gts for px in segment_pixels(g, extent)}
    points = []
    for t in sorted({p.score for p in preds}, reverse=True):
        retained = {px for p in preds if p.score >= t for px in segment_pixels(p, extent)}
        correct = sum(chebyshev_near(px, gt_pixels) for px in retained)
        recalled = sum(chebyshev_near(px, retained) for px in gt_pixels)
        points.append((recalled / len(gt_pixels), correct / len(retained), t))
    return envelope_area(points)


def random_segment(rng) -> LineSegment:
    return LineSegment(*rng.uniform(size=4))


def perturbed(segment: LineSegment, rng, scale: float, score: float) -> ScoredSegment:
    values = np.clip(segment.as_array() + rng.normal(scale=scale, size=4), 0.0, 1.0)
    if rng.uniform() < 0.5:
        values = values[[2, 3, 0, 1]]
    return ScoredSegment(*values, score=score)


class TestStructuralMatch:
    """结构匹配判定"""

    def test_coincident_pair_is_true_positive(self):
        gt = [LineSegment(0.1, 0.1, 0.9, 0.9)]
        match = structural_match([scored(0.9, 0.9, 0.1, 0.1, 0.7)], gt, 10.0)
        assert match.true_positive.tolist() == [True]
        assert match.num_fn == 0

    def test_far_prediction_is_false_positive(self):
        gt = [LineSegment(0.1, 0.1, 0.9, 0.9)]
        match = structural_match([scored(0.1, 0.9, 0.9, 0.1, 0.7)], gt, 10.0)
        assert match.num_fp == 1
        assert match.num_fn == 1

    def test_higher_score_wins_duplicates(self):
        gt = [LineSegment(0.2, 0.2, 0.8, 0.2)]
        preds = [scored(0.2, 0.21, 0.8, 0.2, 0.8), scored(0.2, 0.2, 0.8, 0.21, 0.9)]
        match = structural_match(preds, gt, 10.0)
        assert match.true_positive.tolist() == [False, True]

    def test_distance_must_be_strictly_below_threshold(self):
        gt = [LineSegment(0.0, 0.0, 0.5, 0.0)]
        # 一个端点偏移 10/128，距离恰为 10
        pred = scored(10.0 / 128, 0.0, 0.5, 0.0, 0.5)
        assert structural_match([pred], gt, 10.0).num_tp == 0
        assert structural_match([pred], gt, 10.5).num_tp == 1


class TestStructuralAP:
    """sAP / sF"""

    def test_perfect_predictions(self):
        gts = [[LineSegment(0.1, 0.2, 0.3, 0.4), LineSegment(0.5, 0.5, 0.9, 0.1)]]
        preds = [[ScoredSegment(*g.as_array(), score=1.0) for g in gts[0]]]
        assert structural_ap(preds, gts, 10.0) == pytest.approx(1.0)
        assert structural_fscore(preds, gts, 10.0) == pytest.approx(1.0)

    def test_no_predictions(self):
        assert structural_ap([[]], [[LineSegment(0.1, 0.1, 0.5, 0.5)]], 10.0) == 0.0

    def test_empty_ground_truth(self):
        with pytest.raises(InputError):
            structural_ap([[scored(0.1, 0.1, 0.2, 0.2, 0.5)]], [[]], 10.0)

    def test_image_count_mismatch(self):
        with pytest.raises(InputError):
            structural_ap([[], []], [[LineSegment(0.1, 0.1, 0.5, 0.5)]], 10.0)

    def test_fscore_example(self):
        gts = [[LineSegment(0.1, 0.1, 0.9, 0.1), LineSegment(0.1, 0.9, 0.9, 0.9)]]
        preds = [[scored(0.1, 0.1, 0.9, 0.1, 0.9), scored(0.5, 0.2, 0.5, 0.8, 0.5)]]
        assert structural_fscore(preds, gts, 10.0) == pytest.approx(2.0 / 3.0)
        assert structural_ap(preds, gts, 10.0) == pytest.approx(0.5)

    def test_matches_counting_oracle(self):
        rng = np.random.Generator(np.random.Philox(31))
        for _ in range(200):
            num_images = int(rng.integers(1, 4))
            gts_per_image = [[random_segment(rng) for _ in range(int(rng.integers(0, 4)))]
                             for _ in range(num_images)]
            if not any(gts_per_image):
                gts_per_image[0].append(random_segment(rng))
            preds_per_image = []
            for gts in gts_per_image:
                preds = [perturbed(g, rng, 0.03, float(rng.uniform())) for g in gts if rng.uniform() < 0.8]
                preds += [ScoredSegment(*rng.uniform(size=4), score=float(rng.uniform()))
                          for _ in range(int(rng.integers(0, 3)))]
                preds_per_image.append(preds)
            for threshold in (10.0, 15.0):
                assert structural_ap(preds_per_image, gts_per_image, threshold) == pytest.approx(
                    oracle_sap(preds_per_image, gts_per_image, threshold), abs=1e-12)
            assert (structural_ap(preds_per_image, gts_per_image, 15.0)
                    >= structural_ap(preds_per_image, gts_per_image, 10.0) - 1e-12)


class TestPRCurve:
    """PR 曲线"""

    def test_thresholds_are_distinct_scores(self):
        curve = pr_curve(np.array([0.9, 0.5, 0.5, 0.2]), np.array([True, False, True, False]), 4)
        assert [p[2] for p in curve.points] == [0.9, 0.5, 0.2]
        assert curve.points[1][:2] == (0.5, 2.0 / 3.0)

    def test_recall_monotone(self):
        rng = np.random.Generator(np.random.Philox(2))
        curve = pr_curve(rng.uniform(size=50), rng.uniform(size=50) < 0.5, 40)
        assert np.all(np.diff(curve.recalls) >= 0)

    def test_fixed_sweep(self):
        curve = pr_curve(np.array([0.95, 0.45]), np.array([True, True]), 2, sweep_resolution=11)
        assert curve.points[0] == pytest.approx((0.5, 1.0, 0.9))
        assert curve.points[-1] == pytest.approx((1.0, 1.0, 0.0))


class TestRasterize:
    """栅格化"""

    def test_horizontal_line(self):
        heatmap = rasterize([LineSegment(0.0, 0.55, 1.0, 0.55)], 8)
        assert heatmap[4].all()
        assert heatmap.sum() == 8

    def test_zero_length_segment_is_one_pixel(self):
        heatmap = rasterize([LineSegment(0.3, 0.6, 0.3, 0.6)], 8)
        assert heatmap.sum() == 1
        assert heatmap[4, 2]

    def test_reversed_segment_same_pixels(self):
        rng = np.random.Generator(np.random.Philox(12))
        for _ in range(50):
            segment = random_segment(rng)
            np.testing.assert_array_equal(rasterize([segment], 32), rasterize([segment.reversed()], 32))

    def test_pixels_are_connected(self):
        pixels = segment_pixels(LineSegment(0.05, 0.1, 0.8, 0.95), 20)
        for a, b in zip(pixels, pixels[1:]):
            assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1


class TestHeatmapAP:
    """AP^H / F^H"""

    def test_identical_heatmaps(self):
        gts = [[LineSegment(0.1, 0.2, 0.8, 0.7), LineSegment(0.2, 0.9, 0.9, 0.9)]]
        preds = [[ScoredSegment(*g.as_array(), score=0.8) for g in gts[0]]]
        ap, f = heatmap_ap(preds, gts, 64)
        assert ap == pytest.approx(1.0)
        assert f == pytest.approx(1.0)

    def test_empty_ground_truth(self):
        with pytest.raises(InputError):
            heatmap_ap([[scored(0.1, 0.1, 0.5, 0.5, 0.5)]], [[]], 16)

    def test_matches_pixel_set_oracle(self):
        rng = np.random.Generator(np.random.Philox(44))
        for _ in range(30):
            gts = [random_segment(rng) for _ in range(int(rng.integers(1, 3)))]
            preds = [perturbed(g, rng, 0.05, float(rng.uniform())) for g in gts]
            preds += [ScoredSegment(*rng.uniform(size=4), score=float(rng.uniform())) for _ in range(2)]
            ap, _ = heatmap_ap([preds], [gts], 16, tolerance=1)
            assert ap == pytest.approx(oracle_heatmap_ap(preds, gts, 16), abs=1e-12)


class TestEvaluate:
    """汇总评测与原始数据"""

    def test_report_keys(self):
        gts = [[LineSegment(0.1, 0.1, 0.9, 0.1)]]
        preds = [[scored(0.1, 0.1, 0.9, 0.1, 0.9)]]
        report, _ = evaluate_predictions(preds, gts)
        assert set(report.to_dict()) == {"sAP10", "sAP15", "sF10", "sF15", "APH", "FH", "num_images"}
        assert set(report.curves) == {"sap10", "sap15", "aph"}
        assert report.sap[10.0] == pytest.approx(1.0)

    def test_raw_data_round_trip(self, tmp_path):
        rng = np.random.Generator(np.random.Philox(6))
        gts = [[random_segment(rng) for _ in range(3)] for _ in range(2)]
        preds = [[perturbed(g, rng, 0.02, float(rng.uniform())) for g in image] for image in gts]
        report, raw = evaluate_predictions(preds, gts)
        raw.save(tmp_path / "raw.npz")
        curves = RawMatchData.load(tmp_path / "raw.npz").curves()
        for name, curve in report.curves.items():
            assert curves[name].points == curve.points

    def test_config_validated(self):
        with pytest.raises(ParameterError):
            MetricConfig(thresholds=(0.0,))
        with pytest.raises(ParameterError):
            MetricConfig(heatmap_tolerance=-1)


class TestFiles:
    """CSV 与 JSONL"""

    def test_empty_curve_is_header_only(self, tmp_path):
        path = tmp_path / "pr.csv"
        export_pr_curve(PRCurve([]), path)
        assert path.read_bytes() == b"recall,precision,threshold\n"

    def test_curve_round_trip_with_lf(self, tmp_path):
        path = tmp_path / "pr.csv"
        curve = PRCurve([(0.1, 1.0, 0.9), (1.0 / 3.0, 0.75, 0.123456789)])
        export_pr_curve(curve, path)
        assert b"\r\n" not in path.read_bytes()
        assert read_pr_curve(path).points == curve.points

    def test_bad_header(self, tmp_path):
        path = tmp_path / "pr.csv"
        path.write_text("a,b,c\n")
        with pytest.raises(DatasetParseError):
            read_pr_curve(path)

    def test_segments_round_trip(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        records = [("a", [scored(0.1, 0.2, 0.3, 0.4, 0.5)]), ("b", [])]
        write_segments_jsonl(path, records)
        assert read_segments_jsonl(path, scored=True) == records

    def test_wrong_width_reports_line(self, tmp_path):
        path = tmp_path / "gt.jsonl"
        path.write_text('{"id": "a", "segments": [[0.1, 0.2, 0.3, 0.4]]}\n\n'
                        '{"id": "b", "segments": [[0.1, 0.2, 0.3]]}\n')
        with pytest.raises(DatasetParseError) as info:
            read_segments_jsonl(path, scored=False)
        assert info.value.line_number == 3
