"""
自动微分单元测试

解析梯度与中心差分（步长 1e-3，float64）比对，相对误差须 < 1e-4。

运行方式：
   pytest lineTransformer/test_autograd.py -v
"""

from typing import Callable, List

import numpy as np
import pytest

from .autograd import (
    Tensor,
    concat,
    conv2d,
    dropout,
    layer_norm,
    matmul,
    minimum,
    numerical_grad,
    parameter,
    relu,
    sigmoid,
    softmax,
)
from .exceptions import ContractError, DimensionError, ParameterError


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic) + np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn: Callable[[], Tensor], inputs: List[Tensor], tol: float = 1e-4) -> None:
    for t in inputs:
        t.grad = None
    fn().backward()
    numeric = numerical_grad(fn, inputs, step=1e-3)
    for t, expected in zip(inputs, numeric):
        assert t.grad is not None
        assert relative_error(t.grad, expected) < tol


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(7))


def away_from_zero(rng: np.random.Generator, shape: tuple, margin: float = 0.2) -> np.ndarray:
    values = rng.uniform(margin, 1.5, size=shape)
    return values * rng.choice([-1.0, 1.0], size=shape)


class TestElementwiseGradients:
    """逐元素算子"""

    def test_arithmetic(self, rng):
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.uniform(0.5, 2.0, size=(4,)))
        check_gradients(lambda: ((a + b) * a - a / b - (-a) * 0.5).sum(), [a, b])

    def test_rsub_and_rtruediv(self, rng):
        a = parameter(rng.uniform(0.5, 2.0, size=(5,)))
        check_gradients(lambda: ((1.0 - a) * (2.0 / a)).sum(), [a])

    def test_pow_log_exp(self, rng):
        a = parameter(rng.uniform(0.3, 2.0, size=(2, 3)))
        check_gradients(lambda: ((a ** 2.5).log() + (a * 0.3).exp()).sum(), [a])

    def test_abs_relu_away_from_kink(self, rng):
        a = parameter(away_from_zero(rng, (4, 3)))
        check_gradients(lambda: (a.abs() * 2.0 + relu(a)).sum(), [a])

    def test_sigmoid(self, rng):
        a = parameter(rng.normal(scale=3.0, size=(6,)))
        check_gradients(lambda: (sigmoid(a) * sigmoid(a)).sum(), [a])

    def test_minimum_routes_gradient_to_smaller(self, rng):
        a = parameter(rng.normal(size=(5,)))
        b = parameter(a.data + away_from_zero(rng, (5,)))
        check_gradients(lambda: (minimum(a, b) * np.arange(1.0, 6.0)).sum(), [a, b])
        expected_a = np.where(a.data <= b.data, np.arange(1.0, 6.0), 0.0)
        np.testing.assert_allclose(a.grad, expected_a)

    def test_clip_passes_gradient_inside_range(self):
        a = parameter(np.array([-2.0, 0.1, 0.5, 3.0]))
        a.clip(0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 1.0, 0.0])

    def test_broadcast_gradient_is_summed_back(self):
        a = parameter(np.ones((3, 4)))
        b = parameter(np.ones((1, 4)))
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


class TestStructuralGradients:
    """归约、形状与索引算子"""

    def test_sum_mean_axis(self, rng):
        a = parameter(rng.normal(size=(3, 4, 2)))
        weights = rng.normal(size=(3, 2))
        check_gradients(lambda: (a.sum(axis=1) * weights).sum() + a.mean() * 3.0, [a])

    def test_reshape_transpose(self, rng):
        a = parameter(rng.normal(size=(2, 3, 4)))
        weights = rng.normal(size=(4, 2, 3))
        check_gradients(lambda: (a.transpose(2, 0, 1) * weights).reshape(24).sum(), [a])

    def test_getitem_with_repeated_rows(self, rng):
        a = parameter(rng.normal(size=(5, 3)))
        index = np.array([0, 2, 2, 4])
        weights = rng.normal(size=(4, 3))
        check_gradients(lambda: (a[index] * weights).sum(), [a])

    def test_concat(self, rng):
        a = parameter(rng.normal(size=(2, 3)))
        b = parameter(rng.normal(size=(4, 3)))
        weights = rng.normal(size=(6, 3))
        check_gradients(lambda: (concat([a, b], axis=0) * weights).sum(), [a, b])

    def test_shared_subexpression_accumulates(self):
        a = parameter(np.array([2.0]))
        b = a * a
        (b + b).sum().backward()
        np.testing.assert_allclose(a.grad, [8.0])


class TestMatrixOps:
    """矩阵乘、softmax、layer norm、卷积"""

    def test_matmul_gradient(self, rng):
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.normal(size=(4, 2)))
        check_gradients(lambda: (matmul(a, b) ** 2).sum(), [a, b])

    def test_batched_matmul_gradient(self, rng):
        a = parameter(rng.normal(size=(2, 3, 4)))
        b = parameter(rng.normal(size=(2, 4, 5)))
        check_gradients(lambda: (matmul(a, b) ** 2).sum(), [a, b])

    def test_matmul_matches_scalar_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            for j in range(2):
                assert out[i, j] == pytest.approx(sum(a[i, k] * b[k, j] for k in range(4)), abs=1e-12)

    def test_matmul_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))

    def test_softmax_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.normal(scale=50.0, size=(4, 7))), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), atol=1e-12)
        assert np.all(np.isfinite(out))

    def test_softmax_gradient(self, rng):
        a = parameter(rng.normal(size=(3, 5)))
        weights = rng.normal(size=(3, 5))
        check_gradients(lambda: (softmax(a) * weights).sum(), [a])

    def test_layer_norm_gradient(self, rng):
        x = parameter(rng.normal(size=(4, 6)))
        gain = parameter(rng.normal(size=(6,)))
        bias = parameter(rng.normal(size=(6,)))
        weights = rng.normal(size=(4, 6))
        check_gradients(lambda: (layer_norm(x, gain, bias) * weights).sum(), [x, gain, bias])

    def test_conv2d_matches_scalar_loop(self, rng):
        x = rng.normal(size=(5, 6, 2))
        kernel = rng.normal(size=(3, 3, 2, 4))
        out = conv2d(Tensor(x), Tensor(kernel), stride=2, padding=1).data
        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        assert out.shape == (3, 3, 4)
        for r in range(3):
            for c in range(3):
                for o in range(4):
                    expected = sum(
                        padded[2 * r + i, 2 * c + j, ch] * kernel[i, j, ch, o]
                        for i in range(3) for j in range(3) for ch in range(2)
                    )
                    assert out[r, c, o] == pytest.approx(expected, abs=1e-12)

    def test_conv2d_gradient(self, rng):
        x = parameter(rng.normal(size=(6, 5, 2)))
        kernel = parameter(rng.normal(size=(3, 3, 2, 3)))
        check_gradients(lambda: (conv2d(x, kernel, stride=2, padding=1) ** 2).sum(), [x, kernel])

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((3, 3, 2, 1))))


class TestDropoutAndContracts:
    """dropout 与调用约定"""

    def test_dropout_identity_in_eval(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.5, training=False) is x

    def test_dropout_mask_gradient(self):
        x = parameter(np.ones((200, 10)))
        out = dropout(x, 0.25, training=True, rng=np.random.Generator(np.random.Philox(1)))
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, out.data)
        assert set(np.unique(out.data)) <= {0.0, 1.0 / 0.75}

    def test_dropout_rate_out_of_range(self):
        with pytest.raises(ParameterError):
            dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.Generator(np.random.Philox(0)))

    def test_dropout_needs_rng_in_training(self):
        with pytest.raises(ParameterError):
            dropout(Tensor(np.ones(3)), 0.1, training=True)

    def test_backward_requires_scalar(self):
        a = parameter(np.ones(3))
        with pytest.raises(ContractError):
            (a * 2.0).backward()

    def test_gradients_accumulate_until_cleared(self):
        a = parameter(np.array([1.0, 2.0]))
        (a * 3.0).sum().backward()
        (a * 3.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [6.0, 6.0])
        a.zero_grad()
        assert a.grad is None

    def test_constants_do_not_record(self):
        out = Tensor(np.ones(2)) * 2.0
        assert out._ctx is None and not out.requires_grad
