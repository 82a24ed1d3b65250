"""运行配置

配置文件是扁平的 YAML 映射，每行一个 `key: value`，支持 # 注释。
键按字段名路由到唯一的配置类；同名字段（如 seed）须写成 `section.key`，
例如 `synth.seed: 3`、`optim.seed: 7`。未知键直接报错。
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple, Union

import yaml

from .exceptions import ConfigurationError, ParameterError
from .losses import FocalParams, LossConfig, LossWeights
from .matching import MatchCostWeights
from .metrics import MetricConfig
from .network import ModelConfig
from .synth import SynthConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class OptimConfig:
    """优化器与训练循环配置

    Attributes:
        lr: 初始学习率
        weight_decay: 解耦权重衰减
        beta1 / beta2 / eps: Adam 矩估计参数
        decay_factor: 每个衰减间隔学习率除以该值
        coarse_decay_interval / fine_decay_interval: 两个阶段的衰减间隔（轮）
        coarse_epochs / fine_epochs / joint_epochs: 各阶段轮数
        batch_size: 每步样本数
        clip_norm: 全局梯度范数上限，0 表示不裁剪
        patience: 评测 sAP 连续这么多轮没有提升就提前停止，0 表示不早停
        seed: 训练随机流（打乱、增强、dropout）的种子
    """
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 10.0
    coarse_decay_interval: int = 200
    fine_decay_interval: int = 120
    coarse_epochs: int = 500
    fine_epochs: int = 325
    joint_epochs: int = 500
    batch_size: int = 4
    clip_norm: float = 0.1
    patience: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ParameterError(f"lr 须为正，当前 {self.lr}")
        if self.decay_factor <= 1:
            raise ParameterError(f"decay_factor 须大于 1，当前 {self.decay_factor}")
        if self.weight_decay < 0 or self.clip_norm < 0 or self.patience < 0:
            raise ParameterError("weight_decay、clip_norm、patience 须非负")
        if min(self.coarse_decay_interval, self.fine_decay_interval) < 1:
            raise ParameterError("衰减间隔须 ≥1")
        if min(self.coarse_epochs, self.fine_epochs, self.joint_epochs) < 0:
            raise ParameterError("轮数须非负")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size 须 ≥1，当前 {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ParameterError("Adam 参数越界")


@dataclass
class RunSettings:
    """与具体算法无关的运行开关

    Attributes:
        num_train / num_eval: synth 子命令生成的训练、评测场景数
        eval_interval: 每隔多少轮评测一次，0 表示训练中不评测
        per_layer_eval: 评测时是否逐解码层计算 sAP
        show_progress: 是否显示 tqdm 进度条
    """
    num_train: int = 200
    num_eval: int = 50
    eval_interval: int = 1
    per_layer_eval: bool = False
    show_progress: bool = True

    def __post_init__(self) -> None:
        if self.num_train < 0 or self.num_eval < 0 or self.eval_interval < 0:
            raise ParameterError("场景数与评测间隔须非负")


# 损失配置在文件里摊平成以下键
LOSS_KEYS: Dict[str, Tuple[str, str]] = {
    "match_distance": ("match", "distance"),
    "match_confidence": ("match", "confidence"),
    "alpha_pos": ("focal", "alpha_pos"),
    "alpha_neg": ("focal", "alpha_neg"),
    "weight_cls": ("weights", "cls"),
    "weight_dist": ("weights", "dist"),
    "normalize": ("", "normalize"),
    "main_gamma": ("", "main_gamma"),
    "focal_gamma": ("", "focal_gamma"),
    "focal_epochs": ("", "focal_epochs"),
}


@dataclass
class RunConfig:
    """一次运行的全部配置"""
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'RunConfig':
        """把扁平键值分派到各配置类

        Raises:
            ConfigurationError: 未知键、含糊的键或嵌套值
            ParameterError: 字段取值不合法
        """
        sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTION_FIELDS}
        for key, value in values.items():
            if isinstance(value, dict):
                raise ConfigurationError(f"配置须为扁平映射，键 {key!r} 的值是嵌套映射")
            section, name = _route(str(key))
            if name in sections[section]:
                raise ConfigurationError(f"配置键重复: {key!r}")
            sections[section][name] = value
        return cls(
            model=ModelConfig(**sections["model"]),
            synth=SynthConfig(**sections["synth"]),
            metric=MetricConfig(**sections["metric"]),
            optim=OptimConfig(**sections["optim"]),
            loss=_build_loss(sections["loss"]),
            run=RunSettings(**sections["run"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {}
        for section, obj in (("model", self.model), ("synth", self.synth), ("metric", self.metric),
                             ("optim", self.optim), ("run", self.run)):
            for f in fields(obj):
                value = getattr(obj, f.name)
                record[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        for key, (group, name) in LOSS_KEYS.items():
            owner = getattr(self.loss, group) if group else self.loss
            record[f"loss.{key}"] = getattr(owner, name)
        return record


def _field_names(cls: Any) -> List[str]:
    return [f.name for f in fields(cls)]


SECTION_FIELDS: Dict[str, List[str]] = {
    "model": _field_names(ModelConfig),
    "synth": _field_names(SynthConfig),
    "metric": _field_names(MetricConfig),
    "optim": _field_names(OptimConfig),
    "loss": list(LOSS_KEYS),
    "run": _field_names(RunSettings),
}


def _route(key: str) -> Tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTION_FIELDS or name not in SECTION_FIELDS[section]:
            raise ConfigurationError(f"未知配置键: {key!r}")
        return section, name
    owners = [section for section, names in SECTION_FIELDS.items() if key in names]
    if not owners:
        raise ConfigurationError(f"未知配置键: {key!r}")
    if len(owners) > 1:
        raise ConfigurationError(f"配置键 {key!r} 同时属于 {owners}，请写成 section.{key}")
    return owners[0], key


def _build_loss(values: Dict[str, Any]) -> LossConfig:
    groups: Dict[str, Dict[str, Any]] = {"match": {}, "focal": {}, "weights": {}, "": {}}
    for key, value in values.items():
        group, name = LOSS_KEYS[key]
        groups[group][name] = value
    return LossConfig(
        match=MatchCostWeights(**groups["match"]),
        focal=FocalParams(**groups["focal"]),
        weights=LossWeights(**groups["weights"]),
        **groups[""],
    )


def load_config(path: PathLike) -> RunConfig:
    """读取扁平 YAML 配置文件；空文件得到全默认配置

    Raises:
        ConfigurationError: 文件不存在、不是映射或含未知键
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"配置文件不存在: {path}")
    try:
        values = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"配置文件 {path} 不是合法的 YAML: {e}") from e
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"配置文件 {path} 的顶层须为映射")
    config = RunConfig.from_mapping(values)
    logger.info("已加载配置 %s（%d 个键）", path, len(values))
    return config


def dump_config(config: RunConfig, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, allow_unicode=True, sort_keys=True)
