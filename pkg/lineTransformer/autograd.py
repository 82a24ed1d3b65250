"""最小稠密张量与反向模式自动微分

所有数值都以 float64 的 numpy 数组承载。每个可微算子是一个 Function 子类，
forward 计算输出并保存反向需要的中间量，backward 返回对每个输入的梯度。
只有当某个输入 requires_grad 时才会记录计算图，冻结参数上的前向因此不留图。
"""

import itertools
import logging
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError, DimensionError, ParameterError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]

# 算子创建顺序即执行顺序
_op_counter = itertools.count()


class Tensor:
    """稠密张量

    Attributes:
        data: float64 数组
        requires_grad: 是否参与梯度计算
        grad: 反向传播后累计的梯度（与 data 同形状），叶子节点才会保留
        name: 可选名字，参数张量用它做检查点键
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        _ctx: Optional["Function"] = None,
        name: Optional[str] = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() 只适用于单元素张量，当前形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """从标量损失反向传播

        多次调用且不清零时，叶子梯度会累加。

        Raises:
            ContractError: 损失不是标量
        """
        if self.data.size != 1:
            raise ContractError(f"backward 只接受标量损失，当前形状 {self.shape}")
        if not self.requires_grad:
            logger.debug("损失不依赖任何可训练张量，跳过反向传播")
            return
        GradTape.record(self).run(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- 运算符 ----

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(other, self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # ---- 常用方法 ----

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)


def as_tensor(value: ArrayLike) -> Tensor:
    """常量包装，已是 Tensor 的原样返回"""
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    """创建可训练叶子张量"""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Function:
    """可微算子基类

    子类实现 forward(*arrays, **kwargs) 与 backward(grad)。
    """

    def __init__(self) -> None:
        self.parents: Tuple[Tensor, ...] = ()
        self.order = next(_op_counter)

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> Tensor:
        ctx = cls()
        parents = tuple(as_tensor(x) for x in inputs)
        out = ctx.forward(*[p.data for p in parents], **kwargs)
        if any(p.requires_grad for p in parents):
            ctx.parents = parents
            return Tensor(out, requires_grad=True, _ctx=ctx)
        return Tensor(out)

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class GradTape:
    """反向遍历用的算子记录

    record() 从损失出发收集所有可达算子并按执行顺序排好；run() 逆序访问，
    每个算子恰好一次。非叶子张量的梯度只在本次遍历内存在。
    """

    def __init__(self, ops: List[Function]):
        self.ops = ops

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        ops: List[Function] = []
        seen: set = set()
        stack = [root._ctx] if root._ctx is not None else []
        while stack:
            op = stack.pop()
            if id(op) in seen:
                continue
            seen.add(id(op))
            ops.append(op)
            for parent in op.parents:
                if parent._ctx is not None and id(parent._ctx) not in seen:
                    stack.append(parent._ctx)
        ops.sort(key=lambda op: op.order)
        return cls(ops)

    def run(self, root: Tensor) -> None:
        seed = np.ones_like(root.data)
        if root._ctx is None:
            _accumulate_leaf(root, seed)
            return
        pending: Dict[int, np.ndarray] = {id(root._ctx): seed}
        for op in reversed(self.ops):
            grad = pending.pop(id(op), None)
            if grad is None:
                continue
            for parent, parent_grad in zip(op.parents, op.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent._ctx is None:
                    _accumulate_leaf(parent, parent_grad)
                else:
                    key = id(parent._ctx)
                    pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _accumulate_leaf(leaf: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(leaf.shape)
    leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"形状无法广播: {a.shape} 与 {b.shape}") from e


# ==================== 逐元素算子 ====================

class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = unbroadcast(grad / self.b, self.a.shape)
        gb = unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (-grad,)


class Pow(Function):
    """标量指数幂"""

    def forward(self, a: np.ndarray, exponent: float = 1.0) -> np.ndarray:  # type: ignore[override]
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.exponent == 0.0:
            return (np.zeros_like(self.a),)
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.a = a
        return np.log(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad / self.a,)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out,)


class Abs(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.sign,)


class Minimum(Function):
    """逐元素取小，相等时梯度归第一个输入"""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        self.pick_a = (a <= b).astype(np.float64)
        return np.minimum(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (unbroadcast(grad * self.pick_a, self.shapes[0]),
                unbroadcast(grad * (1.0 - self.pick_a), self.shapes[1]))


class Clip(Function):
    def forward(self, a: np.ndarray, low: float = -np.inf, high: float = np.inf) -> np.ndarray:  # type: ignore[override]
        self.inside = ((a >= low) & (a <= high)).astype(np.float64)
        return np.clip(a, low, high)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.inside,)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        self.mask = (a > 0).astype(np.float64)
        return a * self.mask

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:  # type: ignore[override]
        # 分正负两支计算，避免 exp 溢出
        out = np.empty_like(a)
        positive = a >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
        exp_a = np.exp(a[~positive])
        out[~positive] = exp_a / (1.0 + exp_a)
        self.out = out
        return out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.out * (1.0 - self.out),)


class Dropout(Function):
    def forward(self, a: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:  # type: ignore[override]
        self.mask = mask
        return a * mask

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad * self.mask,)


# ==================== 归约与形状 ====================

class Sum(Function):
    def forward(self, a: np.ndarray, axis: Any = None, keepdims: bool = False) -> np.ndarray:  # type: ignore[override]
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = tuple(ax % len(self.shape) for ax in axes)
            for ax in sorted(axes):
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:  # type: ignore[override]
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"无法把形状 {a.shape} 变为 {shape}") from e

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Optional[Tuple[int, ...]] = None) -> np.ndarray:  # type: ignore[override]
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.axes) != list(range(a.ndim)):
            raise DimensionError(f"转置轴 {self.axes} 与 {a.ndim} 维张量不符")
        return np.transpose(a, self.axes)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.transpose(grad, tuple(np.argsort(self.axes))),)


class GetItem(Function):
    def forward(self, a: np.ndarray, index: Any = None) -> np.ndarray:  # type: ignore[override]
        self.shape, self.index = a.shape, index
        return np.array(a[index])

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise DimensionError(f"拼接形状不一致: {[a.shape for a in arrays]}") from e

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


# ==================== 矩阵与神经网络算子 ====================

class MatMul(Function):
    """矩阵乘，支持相同批维度的三维批量乘"""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:  # type: ignore[override]
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Softmax(Function):
    def forward(self, a: np.ndarray, axis: int = -1) -> np.ndarray:  # type: ignore[override]
        if not -a.ndim <= axis < a.ndim:
            raise ParameterError(f"softmax 轴 {axis} 超出 {a.ndim} 维")
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LayerNorm(Function):
    """沿最后一维归一化，再做逐通道仿射"""

    def forward(self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:  # type: ignore[override]
        if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
            raise DimensionError(f"layer_norm 仿射参数形状 {gain.shape}/{bias.shape} 与通道数 {x.shape[-1]} 不符")
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        self.gain = gain
        return self.x_hat * gain + bias

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        width = self.x_hat.shape[-1]
        d_hat = grad * self.gain
        gx = (self.inv_std / width) * (
            width * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - self.x_hat * (d_hat * self.x_hat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return gx, (grad * self.x_hat).sum(axis=lead), grad.sum(axis=lead)


class Conv2d(Function):
    """二维卷积，输入 H×W×Cin，卷积核 kh×kw×Cin×Cout

    按卷积核偏移逐项累加，不做 im2col。
    """

    def forward(self, x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:  # type: ignore[override]
        if x.ndim != 3 or kernel.ndim != 4 or x.shape[2] != kernel.shape[2]:
            raise DimensionError(f"conv2d 形状不匹配: 输入 {x.shape}, 卷积核 {kernel.shape}")
        if stride < 1 or padding < 0:
            raise ParameterError(f"conv2d 步长须 ≥1、填充须 ≥0，当前 stride={stride}, padding={padding}")
        kh, kw = kernel.shape[:2]
        padded = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
        out_h = (padded.shape[0] - kh) // stride + 1
        out_w = (padded.shape[1] - kw) // stride + 1
        if out_h < 1 or out_w < 1:
            raise DimensionError(f"conv2d 输入 {x.shape} 小于卷积核 {kernel.shape[:2]}")
        self.padded, self.kernel = padded, kernel
        self.stride, self.padding = stride, padding
        self.out_hw = (out_h, out_w)
        out = np.zeros((out_h, out_w, kernel.shape[3]))
        for i in range(kh):
            for j in range(kw):
                out += self._window(padded, i, j) @ kernel[i, j]
        return out

    def _window(self, padded: np.ndarray, i: int, j: int) -> np.ndarray:
        out_h, out_w = self.out_hw
        s = self.stride
        return padded[i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s, :]

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        kh, kw = self.kernel.shape[:2]
        out_h, out_w = self.out_hw
        s = self.stride
        g_padded = np.zeros_like(self.padded)
        g_kernel = np.zeros_like(self.kernel)
        for i in range(kh):
            for j in range(kw):
                g_padded[i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s, :] += grad @ self.kernel[i, j].T
                g_kernel[i, j] = np.tensordot(self._window(self.padded, i, j), grad, axes=([0, 1], [0, 1]))
        p = self.padding
        g_x = g_padded[p:g_padded.shape[0] - p, p:g_padded.shape[1] - p, :]
        return g_x, g_kernel


# ==================== 函数式接口 ====================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias，weight 形状 (in, out)"""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """倒置 dropout；评测模式或 rate=0 时原样返回输入

    Raises:
        ParameterError: rate 不在 [0,1)，或训练模式下未提供随机数发生器
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout 比例须在 [0,1)，当前 {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("训练模式的 dropout 需要显式传入 rng")
    mask = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return Dropout.apply(x, mask=mask)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes) if axes is not None else None)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Minimum.apply(a, b)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def numerical_grad(fn: Callable[[], Tensor], inputs: Iterable[Tensor], step: float = 1e-3) -> List[np.ndarray]:
    """中心差分梯度，用于校验解析梯度

    Args:
        fn: 无参闭包，读取 inputs 的当前数据并返回标量张量
        inputs: 需要求梯度的张量（原地扰动后恢复）
        step: 差分步长
    """
    grads = []
    for tensor in inputs:
        grad = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            plus = fn().item()
            flat[k] = original - step
            minus = fn().item()
            flat[k] = original
            grad.reshape(-1)[k] = (plus - minus) / (2 * step)
        grads.append(grad)
    return grads
