#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
실행 로그 (화면 + 날짜별 로그 파일)

모든 장시간 작업은 log_callback(message)을 받는다. RunLog 인스턴스가 그 콜백이다.
"""

import os
import sys
from datetime import date, datetime
from typing import Optional, TextIO

BANNER = "=" * 54


class RunLog:
    """print + 로그 파일 기록, 경고 개수 집계"""

    def __init__(self, log_dir: str = "logs", file_pattern: str = "weather_sod_{date}.txt",
                 enabled: bool = True, stream: Optional[TextIO] = None):
        self.log_dir = log_dir
        self.file_pattern = file_pattern
        self.enabled = enabled
        self.stream = stream if stream is not None else sys.stdout
        self.log_file_handle: Optional[TextIO] = None
        self.log_path: Optional[str] = None
        self.warnings = 0

    def open(self) -> Optional[str]:
        """로그 파일 열기 (실패해도 화면 출력은 계속)"""
        if not self.enabled:
            return None
        filename = self.file_pattern.format(date=date.today().strftime('%Y-%m-%d'))
        path = os.path.join(self.log_dir, filename)
        try:
            os.makedirs(self.log_dir, exist_ok=True)
            self.log_file_handle = open(path, 'a', encoding='utf-8')
            self.log_path = path
        except OSError as e:
            print(f"로그 파일 생성 오류: {e}", file=sys.stderr)
            self.log_file_handle = None
        return self.log_path

    def close(self):
        if self.log_file_handle:
            try:
                self.log_file_handle.close()
            except OSError as e:
                print(f"로그 파일 닫기 오류: {e}", file=sys.stderr)
            finally:
                self.log_file_handle = None

    def __enter__(self) -> "RunLog":
        self.open()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def __call__(self, message: str):
        self.log(message)

    def log(self, message: str):
        if "⚠️" in message:
            self.warnings += 1
        print(message, file=self.stream)
        if self.log_file_handle:
            try:
                self.log_file_handle.write(message + '\n')
                self.log_file_handle.flush()
            except OSError as e:
                print(f"로그 파일 쓰기 오류: {e}", file=sys.stderr)

    def warn(self, message: str):
        self.log(f"  ⚠️ {message}")

    def banner(self, title: str):
        self.log(BANNER)
        self.log(f"[{datetime.now().strftime('%Y-%m-%d %H:%M:%S')}] {title}")
        if self.log_path:
            self.log(f"로그 파일: {self.log_path}")
        self.log(BANNER)
        self.log("")

    def footer(self, message: str):
        self.log(BANNER)
        self.log(message)
        self.log(BANNER)
