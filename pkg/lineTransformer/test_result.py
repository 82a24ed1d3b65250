"""
错误码与返回值测试

运行方式：
   pytest lineTransformer/test_result.py -v
"""

import pytest

from .error_types import ErrorCode
from .exceptions import ConfigurationError, DatasetParseError, TrainingDivergedError
from .result import Result


class TestErrorCode:

    def test_exit_codes(self):
        assert ErrorCode.INVALID_PARAMETER.to_exit_code() == 2
        assert ErrorCode.DIMENSION_MISMATCH.to_exit_code() == 3
        assert ErrorCode.PARSE_FAILED.to_exit_code() == 4
        assert ErrorCode.CONFIG_INVALID.to_exit_code() == 5
        assert ErrorCode.IO_FAILED.to_exit_code() == 6
        assert ErrorCode.TRAINING_DIVERGED.to_exit_code() == 7

    def test_only_divergence_is_retryable(self):
        assert [c for c in ErrorCode if c.retryable] == [ErrorCode.TRAINING_DIVERGED]


class TestResult:

    def test_ok(self):
        result = Result.ok({"count": 3}, metadata={"out": "a.jsonl"})
        assert result and result.to_exit_code() == 0
        assert result.to_dict() == {"success": True, "data": {"count": 3}, "metadata": {"out": "a.jsonl"}}

    def test_error_uses_default_description(self):
        result = Result.error(ErrorCode.CONFIG_INVALID)
        assert not result
        assert result.error_message == ErrorCode.CONFIG_INVALID.desc
        assert result.to_dict()["error_code"] == "CONFIG_INVALID"

    def test_from_exception_keeps_location(self):
        parsed = Result.from_exception(DatasetParseError("字段不足", line_number=3))
        assert parsed.to_exit_code() == 4
        assert parsed.metadata == {"line_number": 3}

        diverged = Result.from_exception(TrainingDivergedError("nan", step=12))
        assert diverged.is_retryable()
        assert diverged.to_dict()["metadata"] == {"step": 12}

        config = Result.from_exception(ConfigurationError("缺少检查点"))
        assert config.metadata == {}
        assert not config.is_retryable()
