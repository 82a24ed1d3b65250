"""粗到精 Transformer 线段检测

对外接口说明：
- 训练与评测使用 trainer 模块的 train_stage_coarse / train_stage_fine / evaluate
- 命令行入口是 cli.main
- autograd、blocks 是模型内部实现，调用方一般不需要直接使用
"""

# 对外暴露的模型
from .network import LineTransformer, ModelConfig, LayerPrediction, PredictionSet, inference_filter

# 对外暴露的数据模型
from .models import LineSegment, ScoredSegment, Sample, MatchResult, PRCurve, EvalReport, Stage

# 匹配、损失、评测
from .matching import MatchCostWeights, hungarian, match_cost
from .losses import FocalParams, LossConfig, LossWeights, classification_loss, distance_loss, total_loss
from .metrics import (
    MetricConfig,
    structural_match,
    structural_ap,
    structural_fscore,
    rasterize,
    heatmap_ap,
    export_pr_curve,
)

# 数据与训练
from .synth import SynthConfig, generate_scene, augment, load_dataset, save_dataset
from .config import OptimConfig, RunConfig, load_config
from .trainer import TrainState, train_stage_coarse, train_stage_fine, train_joint, evaluate
from .benchmark import BenchmarkConfig, BenchmarkReport, run_benchmark

# 对外暴露的异常体系
from .exceptions import (
    LineTransformerException,
    ClientError,
    RetryableError,
    DimensionError,
    ParameterError,
    ContractError,
    InputError,
    DatasetParseError,
    ConfigurationError,
    TrainingDivergedError,
)
from .error_types import ErrorCode
from .result import Result

__version__ = "1.0.0"

# 对外暴露的接口（推荐调用方只使用这些）
__all__ = [
    # ===== 模型 =====
    "LineTransformer",
    "ModelConfig",
    "LayerPrediction",
    "PredictionSet",
    "inference_filter",     # 按置信度过滤，不做 NMS

    # ===== 数据模型 =====
    "LineSegment",
    "ScoredSegment",
    "Sample",
    "MatchResult",
    "PRCurve",
    "EvalReport",
    "Stage",

    # ===== 匹配与损失 =====
    "MatchCostWeights",
    "hungarian",
    "match_cost",
    "FocalParams",
    "LossConfig",
    "LossWeights",
    "classification_loss",
    "distance_loss",
    "total_loss",

    # ===== 评测 =====
    "MetricConfig",
    "structural_match",
    "structural_ap",        # sAP
    "structural_fscore",    # sF
    "rasterize",
    "heatmap_ap",           # (AP^H, F^H)
    "export_pr_curve",

    # ===== 数据与训练 =====
    "SynthConfig",
    "generate_scene",
    "augment",
    "load_dataset",
    "save_dataset",
    "OptimConfig",
    "RunConfig",
    "load_config",
    "TrainState",
    "train_stage_coarse",
    "train_stage_fine",
    "train_joint",
    "evaluate",
    "BenchmarkConfig",
    "BenchmarkReport",
    "run_benchmark",        # 两阶段 + 联合训练对照的整套基准

    # ===== 异常体系 =====
    # 基类
    "LineTransformerException",
    "ClientError",          # 调用方错误基类（不可重试）
    "RetryableError",       # 可重试错误基类

    # 具体异常
    "DimensionError",
    "ParameterError",
    "ContractError",
    "InputError",
    "DatasetParseError",    # 带行号
    "ConfigurationError",
    "TrainingDivergedError",  # 训练发散（可重试）

    # ===== 命令返回值 =====
    "ErrorCode",
    "Result",
]
