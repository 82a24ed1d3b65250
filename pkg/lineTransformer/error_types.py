"""
错误码

命令行和库内异常共用的一组错误码。每个成员携带四项信息：
字符串码、中文说明、能否重试、对应的进程退出码。
退出码 0 保留给成功，1 保留给未归类的失败。
"""

from enum import Enum


class ErrorCode(Enum):
    """错误码枚举，成员值为 (字符串码, 说明, 可重试, 退出码)"""

    # 调用方传错了东西：形状、取值、调用顺序
    DIMENSION_MISMATCH = ("DIMENSION_MISMATCH", "张量形状不匹配", False, 3)
    INVALID_PARAMETER = ("INVALID_PARAMETER", "参数越界或不满足整除关系", False, 2)
    CONTRACT_VIOLATION = ("CONTRACT_VIOLATION", "调用约定被破坏，如对非标量反向传播", False, 3)
    INVALID_INPUT = ("INVALID_INPUT", "输入数据不可用：非有限值、空数据集、尺寸不可整除", False, 4)

    # 磁盘上的数据或配置有问题
    PARSE_FAILED = ("PARSE_FAILED", "标注或预测文件解析失败", False, 4)
    CONFIG_INVALID = ("CONFIG_INVALID", "配置缺失或不合法", False, 5)
    IO_FAILED = ("IO_FAILED", "文件读写失败", False, 6)

    # 降低学习率后可以从最近的检查点重来
    TRAINING_DIVERGED = ("TRAINING_DIVERGED", "损失出现非有限值，训练中止", True, 7)

    def __init__(self, code: str, desc: str, retryable: bool, exit_code: int):
        self.code = code
        self.desc = desc
        self.retryable = retryable
        self.exit_code = exit_code

    def to_exit_code(self) -> int:
        """命令行退出码"""
        return self.exit_code
