"""预测与真值之间的二分匹配

代价 entry(i,j) = λ1·d(L̂_i, L_j) − λ2·p_i，用匈牙利算法精确求解总代价最小的一一对应。
d 是两个端点坐标 L1 距离之和，在两种端点顺序中取小。
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import ContractError, InputError, ParameterError
from .models import LineSegment, MatchResult, ScoredSegment


@dataclass(frozen=True)
class MatchCostWeights:
    """匹配代价系数

    Attributes:
        distance: λ1，端点距离系数
        confidence: λ2，置信度系数
    """
    distance: float = 5.0
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if self.distance <= 0:
            raise ParameterError(f"λ1 须为正，当前 {self.distance}")
        if self.confidence < 0:
            raise ParameterError(f"λ2 须非负，当前 {self.confidence}")


def endpoint_distance(a: LineSegment, b: LineSegment) -> float:
    """两种端点顺序下坐标差绝对值之和的较小者"""
    return float(pairwise_endpoint_distance(a.as_array()[None, :], b.as_array()[None, :])[0, 0])


def pairwise_endpoint_distance(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """N×4 与 M×4 端点数组之间的 N×M 距离矩阵"""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    swapped = target[:, [2, 3, 0, 1]]
    direct = np.abs(pred[:, None, :] - target[None, :, :]).sum(axis=2)
    reverse = np.abs(pred[:, None, :] - swapped[None, :, :]).sum(axis=2)
    return np.minimum(direct, reverse)


def match_cost(
    predictions: Sequence[ScoredSegment],
    targets: Sequence[LineSegment],
    weights: Optional[MatchCostWeights] = None,
) -> np.ndarray:
    """N×M 匹配代价矩阵

    Raises:
        ContractError: 真值多于预测
    """
    weights = weights or MatchCostWeights()
    pred = np.array([p.as_array() for p in predictions]).reshape(-1, 4)
    scores = np.array([p.score for p in predictions], dtype=np.float64)
    target = np.array([t.as_array() for t in targets]).reshape(-1, 4)
    return cost_matrix(pred, scores, target, weights)


def cost_matrix(pred: np.ndarray, scores: np.ndarray, target: np.ndarray, weights: MatchCostWeights) -> np.ndarray:
    if len(target) > len(pred):
        raise ContractError(f"真值数 {len(target)} 多于线实体数 {len(pred)}")
    distances = pairwise_endpoint_distance(pred, target)
    return weights.distance * distances - weights.confidence * np.asarray(scores, dtype=np.float64)[:, None]


def hungarian(cost: np.ndarray) -> MatchResult:
    """匈牙利算法求最优指派

    以真值为行、预测为列跑最短增广路版本（行数 ≤ 列数时无需补成方阵），
    多余的列即未匹配的预测。相同代价时取下标最小的预测。

    Args:
        cost: N×M 代价矩阵（N 个预测，M 个真值，N ≥ M）

    Raises:
        InputError: 含非有限值
        ContractError: M > N
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"代价矩阵须为二维，当前形状 {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InputError("代价矩阵含 NaN 或 Inf")
    num_pred, num_target = cost.shape
    if num_target > num_pred:
        raise ContractError(f"真值数 {num_target} 多于预测数 {num_pred}")
    if num_target == 0:
        return MatchResult(assignment={}, unmatched=list(range(num_pred)), num_targets=0)

    rows = cost.T
    n, m = rows.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 列 j 当前分配给的行（1 起），0 表示空
    way = np.zeros(m + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        col = 0
        min_slack = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[col] = True
            current_row = owner[col]
            free = ~used[1:]
            slack = rows[current_row - 1] - u[current_row] - v[1:]
            improve = free & (slack < min_slack[1:])
            min_slack[1:][improve] = slack[improve]
            way[1:][improve] = col
            candidates = np.where(free, min_slack[1:], np.inf)
            next_col = int(np.argmin(candidates)) + 1
            delta = candidates[next_col - 1]
            u[owner[used]] += delta
            v[used] -= delta
            min_slack[~used] -= delta
            col = next_col
            if owner[col] == 0:
                break
        while col:
            prev = way[col]
            owner[col] = owner[prev]
            col = prev

    assignment = {int(j - 1): int(owner[j] - 1) for j in range(1, m + 1) if owner[j] != 0}
    unmatched = [i for i in range(num_pred) if i not in assignment]
    total = float(sum(cost[i, j] for i, j in assignment.items()))
    return MatchResult(assignment=assignment, unmatched=unmatched, num_targets=num_target, total_cost=total)


def match_predictions(
    endpoints: np.ndarray,
    scores: np.ndarray,
    targets: np.ndarray,
    weights: Optional[MatchCostWeights] = None,
) -> MatchResult:
    """一层预测（端点数组 + 置信度）与真值端点数组直接匹配"""
    return hungarian(cost_matrix(endpoints, scores, targets, weights or MatchCostWeights()))


def segments_to_array(segments: Sequence[LineSegment]) -> np.ndarray:
    return np.array([s.as_array() for s in segments], dtype=np.float64).reshape(-1, 4)
