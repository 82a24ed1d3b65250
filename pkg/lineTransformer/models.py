"""数据模型定义"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


class Stage(Enum):
    """训练阶段"""
    COARSE = "coarse"
    FINE = "fine"
    JOINT = "joint"


@dataclass(frozen=True)
class LineSegment:
    """线段，两个端点均为归一化坐标（[0,1]）

    Attributes:
        x1, y1: 第一个端点
        x2, y2: 第二个端点
    """
    x1: float
    y1: float
    x2: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def reversed(self) -> 'LineSegment':
        """端点顺序互换后的同一条线段"""
        return LineSegment(self.x2, self.y2, self.x1, self.y1)

    def length(self) -> float:
        return float(np.hypot(self.x2 - self.x1, self.y2 - self.y1))

    @classmethod
    def from_sequence(cls, values: Any) -> 'LineSegment':
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class ScoredSegment(LineSegment):
    """带置信度的预测线段

    Attributes:
        score: 置信度 p，取值 [0,1]
    """
    score: float = 0.0

    def __str__(self) -> str:
        return f"({self.x1:.4f},{self.y1:.4f})-({self.x2:.4f},{self.y2:.4f}) p={self.score:.4f}"


@dataclass
class Sample:
    """一条训练/评测数据

    Attributes:
        image: H0×W0×3 的图像，取值 [0,1]
        targets: 真值线段列表（归一化坐标）
        id: 样本标识，同时是旁路图像文件名
    """
    image: np.ndarray
    targets: List[LineSegment]
    id: str

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass
class MatchResult:
    """二分匹配结果 σ*

    Attributes:
        assignment: 预测下标 → 真值下标（仅包含被匹配的预测）
        unmatched: 未匹配的预测下标（升序）
        num_targets: 真值个数 M
        total_cost: 被匹配项的代价之和
    """
    assignment: Dict[int, int]
    unmatched: List[int]
    num_targets: int
    total_cost: float = 0.0

    @property
    def matched_count(self) -> int:
        return len(self.assignment)

    def pairs(self) -> List[Tuple[int, int]]:
        """按预测下标排序的 (预测, 真值) 对"""
        return sorted(self.assignment.items())

    def prediction_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs()], dtype=np.int64)

    def target_indices(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs()], dtype=np.int64)


@dataclass
class PRCurve:
    """精确率-召回率曲线

    Attributes:
        points: (recall, precision, threshold) 三元组，按置信度阈值从高到低排列，
            因此 recall 单调不减
    """
    points: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def recalls(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def precisions(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def area(self) -> float:
        """精确率包络（右侧最大值插值）下的面积"""
        if not self.points:
            return 0.0
        recall = np.concatenate([[0.0], self.recalls])
        precision = np.concatenate([self.precisions, [0.0]])
        # 包络：从右往左取最大
        envelope = np.maximum.accumulate(precision[::-1])[::-1][:-1]
        return float(np.sum(np.diff(recall) * envelope))

    def best_fscore(self) -> float:
        """曲线上 F 值的最大值"""
        best = 0.0
        for recall, precision, _ in self.points:
            if recall + precision > 0:
                best = max(best, 2 * precision * recall / (precision + recall))
        return best


@dataclass
class EvalReport:
    """评测报告

    Attributes:
        sap: 每个结构阈值 ϑ 的 sAP
        sf: 每个结构阈值 ϑ 的 sF
        ap_h: 热图 AP^H
        f_h: 热图 F^H
        per_layer_sap: 每个解码层输出的 sAP（按首个阈值），未计算时为空
        curves: 导出用的 PR 曲线，键如 "sap10"、"aph"
    """
    sap: Dict[float, float]
    sf: Dict[float, float]
    ap_h: float
    f_h: float
    per_layer_sap: List[float] = field(default_factory=list)
    curves: Dict[str, PRCurve] = field(default_factory=dict)
    num_images: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        report: Dict[str, Any] = {}
        for threshold, value in sorted(self.sap.items()):
            report[f"sAP{threshold:g}"] = value
        for threshold, value in sorted(self.sf.items()):
            report[f"sF{threshold:g}"] = value
        report["APH"] = self.ap_h
        report["FH"] = self.f_h
        if self.per_layer_sap:
            report["per_layer_sAP"] = list(self.per_layer_sap)
        if self.num_images is not None:
            report["num_images"] = self.num_images
        return report
