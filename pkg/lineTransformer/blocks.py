"""Transformer 基础模块

包含注意力、编码层、解码层（post-norm 结构）以及二维正弦位置编码。
位置编码只加在 Q、K 上，不加在 V 上；每一层都加。
"""

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autograd import (
    Tensor,
    dropout,
    layer_norm,
    linear,
    matmul,
    parameter,
    relu,
    softmax,
)
from .exceptions import ContractError, DimensionError, ParameterError


class Module:
    """参数容器基类

    公有属性中的 Tensor 视为参数，Module 或 Module 列表递归展开。
    以下划线开头的属性不参与参数遍历。
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, list):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """按名字原样拷入参数

        Raises:
            ContractError: 缺少或多出参数
            DimensionError: 参数形状不一致
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"参数名不一致，缺少 {missing[:5]}，多出 {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"参数 {name} 形状 {value.shape} 与模型 {p.shape} 不符")
            p.data = value.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    """全连接层，权重形状 (in, out)"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero_init: bool = False):
        init = np.zeros((in_dim, out_dim)) if zero_init else xavier_uniform(rng, in_dim, out_dim)
        self.weight = parameter(init)
        self.bias = parameter(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


def attention_with_weights(q: Tensor, k: Tensor, v: Tensor) -> Tuple[Tensor, Tensor]:
    """缩放点积注意力 softmax(QKᵀ/√d)V，同时返回注意力权重

    支持 m×d 或 h×m×d 的批量输入。

    Raises:
        DimensionError: Q/K 特征维或 K/V 长度不一致
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.ndim != k.ndim:
        raise DimensionError(f"注意力形状不匹配: Q{q.shape} K{k.shape} V{v.shape}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, k.transpose(*axes)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return attention_with_weights(q, k, v)[0]


class MultiHeadAttention(Module):
    """多头注意力：Q/K/V 投影 → 分头 → 注意力 → 拼接 → 输出投影

    Attributes:
        last_weights: 最近一次前向的注意力权重（各头平均，m×n），仅供导出
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        if num_heads < 1 or d_model % num_heads != 0:
            raise ParameterError(f"d_model={d_model} 不能被头数 {num_heads} 整除")
        self._num_heads = num_heads
        self._head_dim = d_model // num_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self._last_weights: Optional[np.ndarray] = None

    @property
    def last_weights(self) -> Optional[np.ndarray]:
        return self._last_weights

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return x.reshape(n, self._num_heads, self._head_dim).transpose(1, 0, 2)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        if query.shape[-1] != key.shape[-1] or key.shape[0] != value.shape[0]:
            raise DimensionError(f"注意力输入形状不匹配: {query.shape}/{key.shape}/{value.shape}")
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        heads, weights = attention_with_weights(q, k, v)
        self._last_weights = weights.data.mean(axis=0)
        merged = heads.transpose(1, 0, 2).reshape(query.shape[0], self._num_heads * self._head_dim)
        return self.out_proj(merged)


def self_attend(x: Tensor, params: MultiHeadAttention, pos: Optional[Tensor] = None) -> Tensor:
    """F = Att(Q=x, K=x, V=x)，位置编码只进入 Q、K"""
    qk = x + pos if pos is not None else x
    return params(qk, qk, x)


def cross_attend(
    z: Tensor,
    x: Tensor,
    params: MultiHeadAttention,
    query_pos: Optional[Tensor] = None,
    key_pos: Optional[Tensor] = None,
) -> Tensor:
    """F = Att(Q=z, K=x, V=x)"""
    q = z + query_pos if query_pos is not None else z
    k = x + key_pos if key_pos is not None else x
    return params(q, k, x)


class EncoderLayer(Module):
    """编码层：SA → 残差 → LN → FC+激活+dropout → FC → 残差 → LN"""

    def __init__(self, d_model: int, num_heads: int, ff_dim: int, dropout_rate: float, rng: np.random.Generator):
        if not 0.0 <= dropout_rate < 1.0:
            raise ParameterError(f"dropout 比例须在 [0,1)，当前 {dropout_rate}")
        self.self_attn = MultiHeadAttention(d_model, num_heads, rng)
        self.linear1 = Linear(d_model, ff_dim, rng)
        self.linear2 = Linear(ff_dim, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self._dropout = dropout_rate

    def __call__(
        self,
        x: Tensor,
        pos: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        if pos.shape != x.shape:
            raise DimensionError(f"位置编码形状 {pos.shape} 与特征 {x.shape} 不符")
        attended = self_attend(x, self.self_attn, pos)
        x = self.norm1(x + dropout(attended, self._dropout, training, rng))
        hidden = dropout(relu(self.linear1(x)), self._dropout, training, rng)
        return self.norm2(x + dropout(self.linear2(hidden), self._dropout, training, rng))


class DecoderLayer(Module):
    """解码层：线实体 SA → 对编码特征的 CA → FC 块，各自带残差与 LN"""

    def __init__(self, d_model: int, num_heads: int, ff_dim: int, dropout_rate: float, rng: np.random.Generator):
        if not 0.0 <= dropout_rate < 1.0:
            raise ParameterError(f"dropout 比例须在 [0,1)，当前 {dropout_rate}")
        self.self_attn = MultiHeadAttention(d_model, num_heads, rng)
        self.cross_attn = MultiHeadAttention(d_model, num_heads, rng)
        self.linear1 = Linear(d_model, ff_dim, rng)
        self.linear2 = Linear(ff_dim, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.norm3 = LayerNorm(d_model)
        self._dropout = dropout_rate

    def __call__(
        self,
        entities: Tensor,
        encoded: Tensor,
        entity_pos: Tensor,
        feature_pos: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        if encoded.shape != feature_pos.shape or entities.shape != entity_pos.shape:
            raise DimensionError(
                f"解码层位置编码形状不符: 实体 {entities.shape}/{entity_pos.shape}, "
                f"特征 {encoded.shape}/{feature_pos.shape}"
            )
        attended = self_attend(entities, self.self_attn, entity_pos)
        x = self.norm1(entities + dropout(attended, self._dropout, training, rng))
        gathered = cross_attend(x, encoded, self.cross_attn, entity_pos, feature_pos)
        x = self.norm2(x + dropout(gathered, self._dropout, training, rng))
        hidden = dropout(relu(self.linear1(x)), self._dropout, training, rng)
        return self.norm3(x + dropout(self.linear2(hidden), self._dropout, training, rng))


def positional_encoding(height: int, width: int, d_model: int, temperature: float = 10000.0) -> Tensor:
    """二维正弦位置编码，返回 (H·W)×d_model 的常量张量

    前一半通道编码行坐标，后一半编码列坐标；每半内偶数通道 sin、奇数通道 cos。
    坐标归一化为 index/extent·2π，所以下标 0 处 sin=0、cos=1。

    Raises:
        ParameterError: d_model 不能被 4 整除或网格为空
    """
    if d_model % 4 != 0:
        raise ParameterError(f"位置编码要求 d_model 能被 4 整除，当前 {d_model}")
    if height < 1 or width < 1:
        raise ParameterError(f"网格尺寸须为正，当前 {height}×{width}")
    num_feats = d_model // 2
    dim_t = temperature ** (2 * (np.arange(num_feats) // 2) / num_feats)
    rows = np.arange(height, dtype=np.float64) / height * 2 * math.pi
    cols = np.arange(width, dtype=np.float64) / width * 2 * math.pi

    def encode(values: np.ndarray) -> np.ndarray:
        angles = values[:, None] / dim_t[None, :]
        out = np.empty_like(angles)
        out[:, 0::2] = np.sin(angles[:, 0::2])
        out[:, 1::2] = np.cos(angles[:, 1::2])
        return out

    row_enc = np.repeat(encode(rows), width, axis=0)
    col_enc = np.tile(encode(cols), (height, 1))
    return Tensor(np.concatenate([row_enc, col_enc], axis=1))
