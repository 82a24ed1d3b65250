"""桌面规模基准

在合成场景上完整跑一遍粗阶段 + 精阶段，必要时再用相同总轮数跑一次联合训练作对照，
然后检查四条趋势：
- 最终 sAP（ϑ 按图像网格折算，64 网格上为 5）达到门槛
- 精阶段 sAP 不低于只用粗阶段输出的 sAP
- 逐解码层 sAP 在容差内单调不降
- 分阶段训练不差于联合训练

整套默认规模单机约需半小时，测试里只用很小的规模跑通流程。
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .config import OptimConfig, RunConfig, RunSettings
from .exceptions import ParameterError
from .losses import LossConfig
from .metrics import MetricConfig
from .network import LineTransformer, ModelConfig
from .synth import SynthConfig, generate_dataset
from .trainer import evaluate, train_joint, train_stage_coarse, train_stage_fine

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class BenchmarkConfig:
    """基准配置

    Attributes:
        model: 模型规模，默认桌面规模
        num_train / num_eval: 训练、评测场景数
        extent: 图像边长，同时作为结构网格与热图边长
        threshold: 结构阈值 ϑ（extent 网格像素）
        sap_bar: 最终 sAP 的门槛
        layer_tolerance: 逐层 sAP 允许的下降量
        coarse_epochs / fine_epochs: 两个阶段的轮数，联合训练用二者之和
        focal_epochs: 精阶段末尾的 focal 轮数
        lr / batch_size: 优化参数
        joint: 是否跑联合训练对照
        seed: 数据、初始化与训练随机流的种子
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    num_train: int = 200
    num_eval: int = 50
    extent: int = 64
    threshold: float = 5.0
    sap_bar: float = 0.80
    layer_tolerance: float = 0.02
    coarse_epochs: int = 60
    fine_epochs: int = 30
    focal_epochs: int = 5
    lr: float = 5e-4
    batch_size: int = 4
    joint: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_train < 1 or self.num_eval < 1:
            raise ParameterError("训练、评测场景数须 ≥1")
        if self.threshold <= 0:
            raise ParameterError(f"结构阈值须为正，当前 {self.threshold}")
        if not 0.0 < self.sap_bar <= 1.0:
            raise ParameterError(f"sap_bar 须在 (0,1]，当前 {self.sap_bar}")
        if self.layer_tolerance < 0:
            raise ParameterError(f"layer_tolerance 须非负，当前 {self.layer_tolerance}")

    def run_config(self) -> RunConfig:
        """展开成一次运行的完整配置；训练中不评测、不早停"""
        return RunConfig(
            model=self.model,
            synth=SynthConfig(extent=self.extent, seed=self.seed),
            metric=MetricConfig(thresholds=(self.threshold,), structural_extent=self.extent,
                                heatmap_extent=self.extent),
            optim=OptimConfig(lr=self.lr, coarse_epochs=self.coarse_epochs, fine_epochs=self.fine_epochs,
                              joint_epochs=self.coarse_epochs + self.fine_epochs,
                              batch_size=self.batch_size, patience=0, seed=self.seed),
            loss=LossConfig(focal_epochs=self.focal_epochs),
            run=RunSettings(num_train=self.num_train, num_eval=self.num_eval, eval_interval=0,
                            per_layer_eval=True, show_progress=False),
        )


@dataclass
class BenchmarkReport:
    """基准结果

    Attributes:
        coarse_sap: 只用粗解码器输出的 sAP
        fine_sap: 两阶段训练后最终输出的 sAP
        per_layer_sap: 两阶段模型每个解码层（先粗后精）的 sAP
        joint_sap: 联合训练的 sAP，未跑时为 None
        seconds: 总耗时
    """
    coarse_sap: float
    fine_sap: float
    per_layer_sap: List[float]
    joint_sap: Optional[float] = None
    seconds: float = 0.0

    def checks(self, config: BenchmarkConfig) -> Dict[str, bool]:
        layers = self.per_layer_sap
        result = {
            "sap_bar": self.fine_sap >= config.sap_bar,
            "fine_not_below_coarse": self.fine_sap >= self.coarse_sap,
            "layers_non_decreasing": all(
                later >= earlier - config.layer_tolerance for earlier, later in zip(layers, layers[1:])
            ),
        }
        if self.joint_sap is not None:
            result["staged_not_below_joint"] = self.fine_sap >= self.joint_sap
        return result

    def to_dict(self, config: BenchmarkConfig) -> Dict[str, Any]:
        checks = self.checks(config)
        return {
            "threshold": config.threshold,
            "coarse_sAP": self.coarse_sap,
            "fine_sAP": self.fine_sap,
            "per_layer_sAP": list(self.per_layer_sap),
            "joint_sAP": self.joint_sap,
            "seconds": self.seconds,
            "checks": checks,
            "passed": all(checks.values()),
        }


def _subdir(run_dir: Optional[PathLike], name: str) -> Optional[Path]:
    return Path(run_dir) / name if run_dir is not None else None


def run_benchmark(config: Optional[BenchmarkConfig] = None, run_dir: Optional[PathLike] = None) -> BenchmarkReport:
    """生成数据、训练并评测；run_dir 给出时各阶段的检查点与日志写到其子目录"""
    config = config or BenchmarkConfig()
    run = config.run_config()
    train = generate_dataset(run.synth, config.num_train, prefix="train", seed=config.seed)
    evalset = generate_dataset(run.synth, config.num_eval, prefix="eval", seed=config.seed + 1)
    started = time.perf_counter()

    model = LineTransformer(run.model, seed=config.seed)
    coarse_state = train_stage_coarse(model, train, run, _subdir(run_dir, "coarse"))
    coarse_report, _ = evaluate(model, evalset, run.metric, use_fine=False)
    logger.info("粗阶段完成：sAP%g=%.4f", config.threshold, coarse_report.sap[config.threshold])

    train_stage_fine(model, train, run, coarse_state, _subdir(run_dir, "fine"))
    fine_report, _ = evaluate(model, evalset, run.metric, per_layer=True)
    logger.info("精阶段完成：sAP%g=%.4f，逐层 %s", config.threshold, fine_report.sap[config.threshold],
                fine_report.per_layer_sap)

    joint_sap = None
    if config.joint:
        joint_model = LineTransformer(run.model, seed=config.seed)
        train_joint(joint_model, train, run, _subdir(run_dir, "joint"))
        joint_report, _ = evaluate(joint_model, evalset, run.metric)
        joint_sap = joint_report.sap[config.threshold]
        logger.info("联合训练完成：sAP%g=%.4f", config.threshold, joint_sap)

    return BenchmarkReport(
        coarse_sap=coarse_report.sap[config.threshold],
        fine_sap=fine_report.sap[config.threshold],
        per_layer_sap=fine_report.per_layer_sap,
        joint_sap=joint_sap,
        seconds=time.perf_counter() - started,
    )
