"""异常定义"""

from typing import Dict, List, Optional

from .error_types import ErrorCode


class LineTransformerException(Exception):
    """异常基类

    所有库内异常的父类，可用于统一捕获
    """
    default_code: ErrorCode = ErrorCode.INVALID_INPUT

    def __init__(self, message: str, error_code: Optional[ErrorCode] = None):
        self.message = message
        self.error_code = error_code or self.default_code
        super().__init__(self.message)

    def is_retryable(self) -> bool:
        """判断该异常是否适合重试

        Returns:
            bool: True表示可以重试，False表示重试无意义
        """
        return False


# ========== 调用方错误（不应重试）==========

class ClientError(LineTransformerException):
    """调用方错误基类

    表示传入的参数、数据或使用方式有问题，应修正后再调用
    """
    pass


class DimensionError(ClientError):
    """张量形状不匹配

    场景：
    - matmul 内维不一致
    - 卷积输入通道与卷积核不一致
    """
    default_code = ErrorCode.DIMENSION_MISMATCH


class ParameterError(ClientError):
    """参数不合法

    场景：
    - dropout 比例不在 [0,1)
    - d_model 不能被头数或 4 整除
    - 配置字段取值越界
    """
    default_code = ErrorCode.INVALID_PARAMETER


class ContractError(ClientError):
    """调用约定被破坏

    场景：
    - 对非标量张量调用 backward
    - 目标数多于线实体数
    """
    default_code = ErrorCode.CONTRACT_VIOLATION


class InputError(ClientError):
    """输入数据不合法

    场景：
    - 代价矩阵含 NaN/Inf
    - 图像尺寸不能被 32 整除
    - 评测时真值集合为空
    """
    default_code = ErrorCode.INVALID_INPUT


class DatasetParseError(ClientError):
    """数据文件解析失败

    Attributes:
        line_number: 出错的行号（从 1 开始）
    """
    default_code = ErrorCode.PARSE_FAILED

    def __init__(self, message: str, line_number: int, error_code: Optional[ErrorCode] = None):
        super().__init__(f"第 {line_number} 行: {message}", error_code)
        self.line_number = line_number


class ConfigurationError(ClientError):
    """配置错误

    场景：
    - 配置文件出现未知字段
    - 精调阶段缺少粗阶段检查点
    """
    default_code = ErrorCode.CONFIG_INVALID


# ========== 可重试错误 ==========

class RetryableError(LineTransformerException):
    """可重试错误基类"""

    def is_retryable(self) -> bool:
        return True


class TrainingDivergedError(RetryableError):
    """训练发散

    Attributes:
        step: 出现非有限损失的全局步数
        layer_losses: 每个解码层的 (分类损失, 距离损失)

    处理建议：从最近的检查点恢复，并降低学习率
    """
    default_code = ErrorCode.TRAINING_DIVERGED

    def __init__(self, message: str, step: int, layer_losses: Optional[List[Dict[str, float]]] = None):
        super().__init__(message)
        self.step = step
        self.layer_losses = layer_losses or []
