"""损失函数

分类损失带 focal 风格的自适应系数，距离损失是匹配对之间端点 L1 距离之和，
总损失对每个解码层独立匹配后加权求和（深监督）。没有任何 GIoU 项。
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, minimum
from .exceptions import ParameterError
from .matching import MatchCostWeights, match_predictions
from .models import MatchResult
from .network import LayerPrediction

logger = logging.getLogger(__name__)

# 取对数前把概率夹到 [ε, 1−ε]
PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    """focal 系数

    Attributes:
        alpha_pos: α1，正样本权重
        alpha_neg: α2，负样本（背景）权重；0.1 即把背景分类权重降为十分之一
        gamma: γ，聚焦指数，0 时退化为加权交叉熵
    """
    alpha_pos: float = 1.0
    alpha_neg: float = 0.1
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if self.alpha_pos <= 0 or self.alpha_neg <= 0:
            raise ParameterError(f"α1、α2 须为正，当前 {self.alpha_pos}, {self.alpha_neg}")
        if self.gamma < 0:
            raise ParameterError(f"γ 须非负，当前 {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    """总损失系数 λ_cls、λ_dist"""
    cls: float = 1.0
    dist: float = 5.0

    def __post_init__(self) -> None:
        if self.cls < 0 or self.dist < 0 or (self.cls == 0 and self.dist == 0):
            raise ParameterError(f"损失系数须非负且不同时为 0，当前 {self.cls}, {self.dist}")


@dataclass
class LossConfig:
    """损失相关的全部配置

    Attributes:
        match: 匹配代价系数
        focal: focal 系数（gamma 由阶段调度覆盖）
        weights: 总损失系数
        normalize: 每层损失是否除以 max(M,1)
        main_gamma: 主训练阶段的 γ
        focal_gamma: 最后若干轮 focal 精调的 γ
        focal_epochs: 精阶段末尾使用 focal_gamma 的轮数
    """
    match: MatchCostWeights = field(default_factory=MatchCostWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    weights: LossWeights = field(default_factory=LossWeights)
    normalize: bool = True
    main_gamma: float = 0.0
    focal_gamma: float = 2.0
    focal_epochs: int = 25

    def __post_init__(self) -> None:
        if self.focal_epochs < 0:
            raise ParameterError(f"focal_epochs 须非负，当前 {self.focal_epochs}")
        if self.main_gamma < 0 or self.focal_gamma < 0:
            raise ParameterError("γ 须非负")

    def main_focal(self) -> FocalParams:
        return replace(self.focal, gamma=self.main_gamma)

    def focal_for_epoch(self, epoch: int, total_epochs: int) -> FocalParams:
        """阶段调度：最后 focal_epochs 轮用 focal_gamma，其余用 main_gamma"""
        in_focal_phase = self.focal_epochs > 0 and epoch >= total_epochs - self.focal_epochs
        gamma = self.focal_gamma if in_focal_phase else self.main_gamma
        return replace(self.focal, gamma=gamma)


@dataclass
class LossBreakdown:
    """损失遥测：每层的分类损失、距离损失与匹配数"""
    layers: List[Dict[str, float]] = field(default_factory=list)
    gamma: float = 0.0

    @property
    def classification(self) -> float:
        return float(sum(layer["cls"] for layer in self.layers))

    @property
    def distance(self) -> float:
        return float(sum(layer["dist"] for layer in self.layers))


def _positive_mask(num_predictions: int, match: MatchResult) -> np.ndarray:
    mask = np.zeros(num_predictions)
    mask[match.prediction_indices()] = 1.0
    return mask


def classification_loss(prediction: LayerPrediction, match: MatchResult, focal: FocalParams) -> Tensor:
    """匹配的预测：−α1(1−p)^γ log p；未匹配的预测：−α2 p^γ log(1−p)；求和"""
    p = prediction.scores.clip(PROB_EPS, 1.0 - PROB_EPS)
    positive = _positive_mask(p.shape[0], match)
    pos_term = ((1.0 - p) ** focal.gamma) * p.log() * (-focal.alpha_pos)
    neg_term = (p ** focal.gamma) * (1.0 - p).log() * (-focal.alpha_neg)
    return (pos_term * positive + neg_term * (1.0 - positive)).sum()


def distance_loss(prediction: LayerPrediction, targets: np.ndarray, match: MatchResult) -> Tensor:
    """匹配对的端点距离之和，未匹配的预测贡献为 0"""
    if match.matched_count == 0:
        return Tensor(0.0)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    chosen = prediction.endpoints[match.prediction_indices()]
    matched_targets = targets[match.target_indices()]
    direct = (chosen - matched_targets).abs().sum(axis=1)
    reverse = (chosen - matched_targets[:, [2, 3, 0, 1]]).abs().sum(axis=1)
    return minimum(direct, reverse).sum()


def layer_loss(
    prediction: LayerPrediction,
    targets: np.ndarray,
    config: LossConfig,
    focal: Optional[FocalParams] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """单层：匹配 → λ_cls·L_cls + λ_dist·L_dist（可选按 max(M,1) 归一化）"""
    focal = focal or config.focal
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    match = match_predictions(prediction.endpoints.data, prediction.scores.data, targets, config.match)
    cls_loss = classification_loss(prediction, match, focal)
    dist_loss = distance_loss(prediction, targets, match)
    scale = 1.0 / max(len(targets), 1) if config.normalize else 1.0
    total = (cls_loss * config.weights.cls + dist_loss * config.weights.dist) * scale
    record = {
        "cls": cls_loss.item() * scale,
        "dist": dist_loss.item() * scale,
        "matched": float(match.matched_count),
    }
    return total, record


def total_loss(
    per_layer_predictions: Sequence[LayerPrediction],
    targets: np.ndarray,
    config: LossConfig,
    focal: Optional[FocalParams] = None,
) -> Tuple[Tensor, LossBreakdown]:
    """深监督总损失：每层独立匹配，各层损失相加"""
    focal = focal or config.focal
    breakdown = LossBreakdown(gamma=focal.gamma)
    total: Optional[Tensor] = None
    for prediction in per_layer_predictions:
        loss, record = layer_loss(prediction, targets, config, focal)
        breakdown.layers.append(record)
        total = loss if total is None else total + loss
    return (total if total is not None else Tensor(0.0)), breakdown
