"""
子命令返回值

cli 中每个子命令都返回 Result；main 只看它决定退出码，
并把成功的数据写到 stdout、失败的信息写到 stderr。
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Generic, Optional, TypeVar

from .error_types import ErrorCode
from .exceptions import LineTransformerException

T = TypeVar('T')

# 从异常上搬到 metadata 的定位字段
_LOCATION_ATTRS = ("line_number", "step")


@dataclass
class Result(Generic[T]):
    """成功时带 data，失败时带错误码与消息，metadata 放输出文件等附加信息

    >>> Result.ok({"sAP10": 0.81}).to_exit_code()
    0
    >>> Result.error(ErrorCode.CONFIG_INVALID).to_exit_code()
    5
    """

    success: bool
    data: Optional[T] = None
    error_code: Optional[ErrorCode] = None
    error_message: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def ok(cls, data: T, metadata: Optional[Dict[str, Any]] = None) -> 'Result[T]':
        return cls(True, data=data, metadata=dict(metadata or {}))

    @classmethod
    def error(cls, code: ErrorCode, message: Optional[str] = None,
              metadata: Optional[Dict[str, Any]] = None) -> 'Result[T]':
        """失败结果；不给消息时用错误码自带的说明"""
        return cls(False, error_code=code, error_message=message or code.desc, metadata=dict(metadata or {}))

    @classmethod
    def from_exception(cls, exc: LineTransformerException) -> 'Result[T]':
        """库内异常转失败结果，行号、步数等定位信息进 metadata"""
        located = {name: getattr(exc, name) for name in _LOCATION_ATTRS if getattr(exc, name, None) is not None}
        return cls.error(exc.error_code, exc.message, located)

    def is_retryable(self) -> bool:
        return self.error_code is not None and not self.success and self.error_code.retryable

    def to_exit_code(self) -> int:
        if self.success:
            return 0
        return self.error_code.to_exit_code() if self.error_code is not None else 1

    def to_dict(self) -> Dict[str, Any]:
        """JSON 友好的字典，失败时写入 stderr"""
        payload: Dict[str, Any] = {"success": self.success}
        if self.success:
            payload["data"] = self.data
        else:
            payload.update(
                error_code=self.error_code.code if self.error_code is not None else None,
                error_message=self.error_message,
                retryable=self.is_retryable(),
            )
        if self.metadata:
            payload["metadata"] = self.metadata
        return payload

    def __bool__(self) -> bool:
        return self.success
