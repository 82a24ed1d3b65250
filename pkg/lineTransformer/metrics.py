"""评测指标

结构指标 sAP/sF：线段坐标放大到结构网格后，预测与真值的 L2 距离（两端点距离平方和
开方，两种端点顺序取小）小于 ϑ 视为匹配；每条预测只归属最近的真值，同一真值下置信度
最高的那条是 TP，其余是 FP。
热图指标 AP^H/F^H：把线段栅格化成像素，按像素统计精确率和召回率，允许 Chebyshev
距离 tolerance 的定位误差。
所有 PR 曲线都以出现过的置信度值作为阈值，因此是精确曲线。
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import DatasetParseError, InputError, ParameterError
from .models import EvalReport, LineSegment, PRCurve, ScoredSegment

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CSV_HEADER = ["recall", "precision", "threshold"]


@dataclass
class MetricConfig:
    """评测配置

    Attributes:
        thresholds: 结构阈值 ϑ（结构网格像素）
        structural_extent: 结构网格边长
        heatmap_extent: 热图栅格边长
        heatmap_tolerance: 热图像素匹配容差（Chebyshev 距离）
        sweep_resolution: None 表示用出现过的置信度作阈值；给整数则用等间距阈值
    """
    thresholds: Tuple[float, ...] = (10.0, 15.0)
    structural_extent: int = 128
    heatmap_extent: int = 128
    heatmap_tolerance: int = 1
    sweep_resolution: Optional[int] = None

    def __post_init__(self) -> None:
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds or min(self.thresholds) <= 0:
            raise ParameterError(f"结构阈值须为正，当前 {self.thresholds}")
        if self.structural_extent < 2 or self.heatmap_extent < 2:
            raise ParameterError("结构网格与热图边长须 ≥2")
        if self.heatmap_tolerance < 0:
            raise ParameterError(f"热图容差须非负，当前 {self.heatmap_tolerance}")
        if self.sweep_resolution is not None and self.sweep_resolution < 2:
            raise ParameterError(f"sweep_resolution 须 ≥2，当前 {self.sweep_resolution}")


# ==================== 结构指标 ====================

@dataclass
class StructuralMatch:
    """单张图的结构匹配结果

    Attributes:
        true_positive: 每条预测是否为 TP（与输入顺序对齐）
        gt_matched: 每条真值是否被某条预测匹配
    """
    true_positive: np.ndarray
    gt_matched: np.ndarray

    @property
    def num_tp(self) -> int:
        return int(self.true_positive.sum())

    @property
    def num_fp(self) -> int:
        return int((~self.true_positive).sum())

    @property
    def num_fn(self) -> int:
        return int((~self.gt_matched).sum())


def _to_array(segments: Sequence[LineSegment]) -> np.ndarray:
    return np.array([s.as_array() for s in segments], dtype=np.float64).reshape(-1, 4)


def segment_l2_distance(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """P×G 距离矩阵：两端点欧氏距离平方和开方，两种端点顺序取小"""
    direct = ((pred[:, None, :] - gt[None, :, :]) ** 2).sum(axis=2)
    reverse = ((pred[:, None, :] - gt[None, :, [2, 3, 0, 1]]) ** 2).sum(axis=2)
    return np.sqrt(np.minimum(direct, reverse))


def _descending(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def structural_match(
    preds: Sequence[ScoredSegment],
    gts: Sequence[LineSegment],
    threshold: float,
    grid_extent: int = 128,
) -> StructuralMatch:
    """单张图的 TP/FP 判定

    每条预测归属距离最近的真值（并列取下标小的），距离须 < ϑ；每条真值在归属于它的
    预测中取置信度最高者为 TP（并列取输入顺序靠前者），其余为 FP。
    """
    scores = np.array([p.score for p in preds], dtype=np.float64)
    true_positive = np.zeros(len(preds), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    if not len(preds) or not len(gts):
        return StructuralMatch(true_positive, gt_matched)
    dist = segment_l2_distance(_to_array(preds) * grid_extent, _to_array(gts) * grid_extent)
    nearest = dist.argmin(axis=1)
    within = dist[np.arange(len(preds)), nearest] < threshold
    for i in _descending(scores):
        if within[i] and not gt_matched[nearest[i]]:
            gt_matched[nearest[i]] = True
            true_positive[i] = True
    return StructuralMatch(true_positive, gt_matched)


def pr_curve(
    scores: np.ndarray,
    true_positive: np.ndarray,
    num_positive: int,
    sweep_resolution: Optional[int] = None,
) -> PRCurve:
    """按置信度阈值扫出 PR 曲线

    Args:
        scores: 每个预测（或像素）的置信度
        true_positive: 对应的正确标记
        num_positive: 召回分母
        sweep_resolution: None 时阈值为出现过的置信度，否则在 [0,1] 上等间距取
    """
    scores = np.asarray(scores, dtype=np.float64)
    hits = np.asarray(true_positive, dtype=np.float64)
    if scores.size == 0:
        return PRCurve([])
    order = _descending(scores)
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    retained = np.arange(1, len(scores) + 1)
    if sweep_resolution is None:
        # 每组相同置信度的最后一个位置
        last = np.r_[scores[1:] != scores[:-1], True]
        thresholds = scores[last]
        counts = retained[last]
    else:
        thresholds = np.linspace(1.0, 0.0, sweep_resolution)
        counts = np.searchsorted(-scores, -thresholds, side="right")
        keep = counts > 0
        thresholds, counts = thresholds[keep], counts[keep]
    tps = tp[counts - 1]
    return PRCurve([
        (float(t / num_positive), float(t / c), float(th))
        for t, c, th in zip(tps, counts, thresholds)
    ])


@dataclass
class StructuralRaw:
    """结构曲线的原始数据（可存盘后重建曲线）"""
    scores: np.ndarray
    true_positive: np.ndarray
    num_gt: int


def structural_raw(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    threshold: float,
    grid_extent: int = 128,
) -> StructuralRaw:
    """在整个图像集合上联合收集 (置信度, TP) 对

    Raises:
        InputError: 图像数不一致或真值集合为空
    """
    if len(preds_per_image) != len(gts_per_image):
        raise InputError(f"预测 {len(preds_per_image)} 张与真值 {len(gts_per_image)} 张不一致")
    num_gt = sum(len(g) for g in gts_per_image)
    if num_gt == 0:
        raise InputError("真值集合为空，sAP 无定义")
    scores: List[float] = []
    labels: List[bool] = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        match = structural_match(preds, gts, threshold, grid_extent)
        scores.extend(p.score for p in preds)
        labels.extend(bool(x) for x in match.true_positive)
    return StructuralRaw(np.array(scores, dtype=np.float64), np.array(labels, dtype=bool), num_gt)


def structural_ap(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    threshold: float,
    grid_extent: int = 128,
) -> float:
    """sAP：结构 PR 曲线（精确率包络）下的面积"""
    raw = structural_raw(preds_per_image, gts_per_image, threshold, grid_extent)
    return pr_curve(raw.scores, raw.true_positive, raw.num_gt).area()


def structural_fscore(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    threshold: float,
    grid_extent: int = 128,
) -> float:
    """sF：结构 PR 曲线上 F 值的最大值"""
    raw = structural_raw(preds_per_image, gts_per_image, threshold, grid_extent)
    return pr_curve(raw.scores, raw.true_positive, raw.num_gt).best_fscore()


# ==================== 热图指标 ====================

def _to_pixel(value: float, extent: int) -> int:
    return min(max(int(np.floor(value * extent)), 0), extent - 1)


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> Iterable[Tuple[int, int]]:
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def segment_pixels(segment: LineSegment, extent: int) -> List[Tuple[int, int]]:
    """线段覆盖的 (row, col) 像素；端点按字典序规范化，保证端点互换结果一致"""
    a = (_to_pixel(segment.x1, extent), _to_pixel(segment.y1, extent))
    b = (_to_pixel(segment.x2, extent), _to_pixel(segment.y2, extent))
    start, end = min(a, b), max(a, b)
    return [(y, x) for x, y in _bresenham(start[0], start[1], end[0], end[1])]


def rasterize(segments: Sequence[LineSegment], raster_extent: int) -> np.ndarray:
    """栅格化为 extent×extent 的布尔热图"""
    heatmap = np.zeros((raster_extent, raster_extent), dtype=bool)
    for segment in segments:
        for row, col in segment_pixels(segment, raster_extent):
            heatmap[row, col] = True
    return heatmap


def score_raster(preds: Sequence[ScoredSegment], raster_extent: int) -> np.ndarray:
    """每个像素上覆盖它的预测的最大置信度，未覆盖为 -1

    阈值 t 下保留的预测栅格并集恰为 score_raster ≥ t。
    """
    raster = np.full((raster_extent, raster_extent), -1.0)
    for pred in preds:
        for row, col in segment_pixels(pred, raster_extent):
            if pred.score > raster[row, col]:
                raster[row, col] = pred.score
    return raster


@dataclass
class HeatmapRaw:
    """热图曲线的原始数据

    Attributes:
        pred_scores: 被预测覆盖的像素的置信度
        pred_correct: 这些像素附近是否有真值像素
        gt_scores: 每个真值像素邻域内预测的最大置信度（无则 -1）
    """
    pred_scores: np.ndarray
    pred_correct: np.ndarray
    gt_scores: np.ndarray

    def curve(self, sweep_resolution: Optional[int] = None) -> PRCurve:
        if self.gt_scores.size == 0:
            raise InputError("真值热图为空，AP^H 无定义")
        if self.pred_scores.size == 0:
            return PRCurve([])
        if sweep_resolution is None:
            thresholds = np.unique(self.pred_scores)[::-1]
        else:
            thresholds = np.linspace(1.0, 0.0, sweep_resolution)
        pred_sorted = np.sort(self.pred_scores)
        correct_sorted = np.sort(self.pred_scores[self.pred_correct])
        gt_sorted = np.sort(self.gt_scores)
        points = []
        for t in thresholds:
            retained = len(pred_sorted) - np.searchsorted(pred_sorted, t, side="left")
            if retained == 0:
                continue
            correct = len(correct_sorted) - np.searchsorted(correct_sorted, t, side="left")
            recalled = len(gt_sorted) - np.searchsorted(gt_sorted, t, side="left")
            points.append((float(recalled / len(gt_sorted)), float(correct / retained), float(t)))
        return PRCurve(points)


def heatmap_raw(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    raster_extent: int = 128,
    tolerance: int = 1,
) -> HeatmapRaw:
    if len(preds_per_image) != len(gts_per_image):
        raise InputError(f"预测 {len(preds_per_image)} 张与真值 {len(gts_per_image)} 张不一致")
    window = np.ones((2 * tolerance + 1, 2 * tolerance + 1), dtype=bool)
    pred_scores, pred_correct, gt_scores = [], [], []
    for preds, gts in zip(preds_per_image, gts_per_image):
        gt_mask = rasterize(gts, raster_extent)
        scores = score_raster(preds, raster_extent)
        near_gt = ndimage.binary_dilation(gt_mask, structure=window) if tolerance else gt_mask
        covered = scores >= 0
        pred_scores.append(scores[covered])
        pred_correct.append(near_gt[covered])
        neighbourhood = (ndimage.maximum_filter(scores, size=2 * tolerance + 1, mode="constant", cval=-1.0)
                         if tolerance else scores)
        gt_scores.append(neighbourhood[gt_mask])
    return HeatmapRaw(
        np.concatenate(pred_scores) if pred_scores else np.zeros(0),
        np.concatenate(pred_correct) if pred_correct else np.zeros(0, dtype=bool),
        np.concatenate(gt_scores) if gt_scores else np.zeros(0),
    )


def heatmap_ap(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    raster_extent: int = 128,
    tolerance: int = 1,
) -> Tuple[float, float]:
    """返回 (AP^H, F^H)

    Raises:
        InputError: 真值为空
    """
    curve = heatmap_raw(preds_per_image, gts_per_image, raster_extent, tolerance).curve()
    return curve.area(), curve.best_fscore()


# ==================== 汇总评测 ====================

@dataclass
class RawMatchData:
    """可存盘的原始匹配数据，curves 子命令据此重建 PR 曲线"""
    structural: Dict[float, StructuralRaw] = field(default_factory=dict)
    heatmap: Optional[HeatmapRaw] = None

    def curves(self, sweep_resolution: Optional[int] = None) -> Dict[str, PRCurve]:
        curves = {
            f"sap{threshold:g}": pr_curve(raw.scores, raw.true_positive, raw.num_gt, sweep_resolution)
            for threshold, raw in sorted(self.structural.items())
        }
        if self.heatmap is not None:
            curves["aph"] = self.heatmap.curve(sweep_resolution)
        return curves

    def save(self, path: PathLike) -> None:
        arrays: Dict[str, np.ndarray] = {}
        for threshold, raw in self.structural.items():
            key = f"{threshold:g}"
            arrays[f"structural/{key}/scores"] = raw.scores
            arrays[f"structural/{key}/tp"] = raw.true_positive
            arrays[f"structural/{key}/num_gt"] = np.array(raw.num_gt)
        if self.heatmap is not None:
            arrays["heatmap/pred_scores"] = self.heatmap.pred_scores
            arrays["heatmap/pred_correct"] = self.heatmap.pred_correct
            arrays["heatmap/gt_scores"] = self.heatmap.gt_scores
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path: PathLike) -> 'RawMatchData':
        raw = cls()
        with np.load(path) as archive:
            keys = set(archive.files)
            for key in sorted(k for k in keys if k.startswith("structural/") and k.endswith("/scores")):
                threshold = key.split("/")[1]
                raw.structural[float(threshold)] = StructuralRaw(
                    archive[key],
                    archive[f"structural/{threshold}/tp"],
                    int(archive[f"structural/{threshold}/num_gt"]),
                )
            if "heatmap/pred_scores" in keys:
                raw.heatmap = HeatmapRaw(
                    archive["heatmap/pred_scores"],
                    archive["heatmap/pred_correct"],
                    archive["heatmap/gt_scores"],
                )
        return raw


def evaluate_predictions(
    preds_per_image: Sequence[Sequence[ScoredSegment]],
    gts_per_image: Sequence[Sequence[LineSegment]],
    config: Optional[MetricConfig] = None,
) -> Tuple[EvalReport, RawMatchData]:
    """整套指标：每个 ϑ 的 sAP/sF，以及 AP^H/F^H"""
    config = config or MetricConfig()
    raw = RawMatchData()
    for threshold in config.thresholds:
        raw.structural[threshold] = structural_raw(preds_per_image, gts_per_image, threshold,
                                                   config.structural_extent)
    raw.heatmap = heatmap_raw(preds_per_image, gts_per_image, config.heatmap_extent, config.heatmap_tolerance)
    curves = raw.curves(config.sweep_resolution)
    report = EvalReport(
        sap={t: curves[f"sap{t:g}"].area() for t in config.thresholds},
        sf={t: curves[f"sap{t:g}"].best_fscore() for t in config.thresholds},
        ap_h=curves["aph"].area(),
        f_h=curves["aph"].best_fscore(),
        curves=curves,
        num_images=len(preds_per_image),
    )
    return report, raw


# ==================== 文件格式 ====================

def export_pr_curve(curve: PRCurve, path: PathLike) -> None:
    """写 CSV：表头 recall,precision,threshold，LF 换行

    Raises:
        OSError: 路径不可写
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for recall, precision, threshold in curve.points:
            writer.writerow([repr(recall), repr(precision), repr(threshold)])


def read_pr_curve(path: PathLike) -> PRCurve:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DatasetParseError(f"PR 曲线表头应为 {CSV_HEADER}，实际 {header}", 1)
        return PRCurve([(float(r), float(p), float(t)) for r, p, t in reader])


def write_segments_jsonl(
    path: PathLike,
    records: Sequence[Tuple[str, Sequence[LineSegment]]],
) -> None:
    """每张图一行 {"id", "segments"}；打分线段带第 5 个数 score"""
    with open(path, "w", encoding="utf-8") as f:
        for image_id, segments in records:
            rows = []
            for s in segments:
                row = [s.x1, s.y1, s.x2, s.y2]
                if isinstance(s, ScoredSegment):
                    row.append(s.score)
                rows.append(row)
            f.write(json.dumps({"id": image_id, "segments": rows}) + "\n")


def read_segments_jsonl(path: PathLike, scored: bool) -> List[Tuple[str, List[LineSegment]]]:
    """读取预测（scored=True，每条 5 个数）或真值（每条 4 个数）文件

    Raises:
        DatasetParseError: 某行格式不对，带行号
    """
    width = 5 if scored else 4
    records: List[Tuple[str, List[LineSegment]]] = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                segments: List[LineSegment] = []
                for row in record["segments"]:
                    if len(row) != width:
                        raise DatasetParseError(f"线段应有 {width} 个数，实际 {len(row)}", line_number)
                    if scored:
                        segments.append(ScoredSegment(*(float(v) for v in row[:4]), score=float(row[4])))
                    else:
                        segments.append(LineSegment.from_sequence(row))
                records.append((str(record["id"]), segments))
            except DatasetParseError:
                raise
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetParseError(f"记录无法解析: {e}", line_number) from e
    return records
