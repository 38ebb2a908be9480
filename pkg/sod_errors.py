#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
구조화된 오류 정의

모든 모듈은 이 예외들만 던지고, CLI(weather_sod.py)가 한 줄짜리
`error[<category>]: <message>` 형식으로 출력한다.
"""

from typing import Optional, Sequence


class WeatherSodError(Exception):
    """기본 예외 (category는 CLI 출력용 분류 문자열)"""

    category = "error"

    def __init__(self, message: str, category: Optional[str] = None):
        super().__init__(message)
        if category:
            self.category = category

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""

    def one_line(self) -> str:
        """CLI 출력용 한 줄 요약"""
        text = self.message.replace("\n", " ").strip()
        return f"error[{self.category}]: {text}"


class DimensionError(WeatherSodError):
    """텐서 shape 불일치 - 문제가 된 축 이름을 포함"""

    category = "dimension"

    def __init__(self, message: str, axis: Optional[str] = None):
        if axis is not None:
            message = f"{message} (axis={axis})"
        super().__init__(message)
        self.axis = axis


class DomainError(WeatherSodError):
    category = "domain"


class TapeError(WeatherSodError):
    category = "tape"


class ConfigError(WeatherSodError):
    category = "config"


class ClassNameError(WeatherSodError):
    """알 수 없는 노이즈 클래스 이름"""

    category = "class"

    def __init__(self, name: str, valid_names: Sequence[str]):
        super().__init__(f"알 수 없는 클래스 '{name}' (가능한 값: {', '.join(valid_names)})")
        self.name = name
        self.valid_names = list(valid_names)


class DataError(WeatherSodError):
    """데이터 파일/폴더 관련 오류 - 경로 포함"""

    category = "data"

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class CheckpointError(WeatherSodError):
    category = "checkpoint"


class MissingGradientError(WeatherSodError):
    category = "gradient"

    def __init__(self, param_name: str):
        super().__init__(f"파라미터 '{param_name}'에 gradient가 없습니다")
        self.param_name = param_name
