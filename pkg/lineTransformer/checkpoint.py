"""检查点读写

单个 npz 文件：
    param/<name>     模型参数
    optim/<key>      优化器状态（一阶、二阶矩与步数）
    meta             JSON 字符串：模型配置、阶段、轮数、随机数状态等
全部以 float64 原样保存，加载后与保存前逐位一致。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .exceptions import ConfigurationError, InputError
from .network import LineTransformer, ModelConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """解包后的检查点

    Attributes:
        params: 参数名 → 数组
        optimizer: 优化器状态键 → 数组
        meta: 元数据（model_config、stage、epoch、rng_state 等）
    """
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return str(self.meta.get("stage", ""))

    def model_config(self) -> ModelConfig:
        if "model_config" not in self.meta:
            raise ConfigurationError("检查点缺少 model_config")
        return ModelConfig(**self.meta["model_config"])

    def build_model(self) -> LineTransformer:
        """按元数据里的配置重建模型并载入参数"""
        model = LineTransformer(self.model_config())
        model.load_state_dict(self.params)
        return model


def rng_state_to_json(rng: np.random.Generator) -> Dict[str, Any]:
    """Generator 状态转成可 JSON 序列化的字典（数组转 list）"""
    def convert(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, np.ndarray):
            return {"__array__": [int(v) for v in value.reshape(-1)], "dtype": str(value.dtype)}
        if isinstance(value, np.integer):
            return int(value)
        return value
    return dict(convert(rng.bit_generator.state))


def rng_from_json(state: Dict[str, Any]) -> np.random.Generator:
    def convert(value: Any) -> Any:
        if isinstance(value, dict) and "__array__" in value:
            return np.array(value["__array__"], dtype=value["dtype"])
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value
    bit_generator = np.random.Philox()
    bit_generator.state = convert(state)
    return np.random.Generator(bit_generator)


def save_checkpoint(
    path: PathLike,
    model: LineTransformer,
    optimizer_state: Dict[str, np.ndarray],
    meta: Dict[str, Any],
) -> Path:
    """写检查点；先写临时文件再改名，避免中途中断留下半个文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"optim/{k}": np.asarray(v) for k, v in optimizer_state.items()})
    full_meta = dict(meta, format_version=FORMAT_VERSION, model_config=model.config.to_dict())
    arrays["meta"] = np.array(json.dumps(full_meta))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)
    logger.debug("检查点已保存: %s", path)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """
    Raises:
        InputError: 文件不存在或不是本项目的检查点
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"检查点不存在: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            params = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
            optimizer = {k[len("optim/"):]: archive[k] for k in archive.files if k.startswith("optim/")}
            meta = json.loads(str(archive["meta"]))
    except (KeyError, ValueError, OSError) as e:
        raise InputError(f"无法读取检查点 {path}: {e}") from e
    return Checkpoint(params=params, optimizer=optimizer, meta=meta)
