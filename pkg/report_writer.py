#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
결과 파일 출력 (CSV: pandas, 비교표 엑셀: openpyxl)

CSV 규칙: 헤더/컬럼 순서 고정, LF 줄바꿈, 소수점 '.', 유효숫자 9자리.
"""

import os
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from sod_errors import DataError
from sod_metrics import METRIC_COLUMNS, THRESHOLDS, MetricReport

try:
    import openpyxl
    from openpyxl.styles import Font
    HAS_OPENPYXL = True
except ImportError:
    HAS_OPENPYXL = False

FLOAT_FORMAT = '%.9g'
AGGREGATE_ROW = "AGGREGATE"
COMPARISON_COLUMNS = ["decoder", "train_fraction", "nifm_variant", "metric", "baseline", "variant", "delta_pct"]


def _noop(message: str):
    pass


def write_table(frame: pd.DataFrame, path: str) -> str:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise DataError(f"CSV 저장 실패 ({e})", path)
    return path


def metrics_frame(names: Sequence[str], classes: Sequence[str], reports: Sequence[MetricReport],
                  aggregate_report: MetricReport) -> pd.DataFrame:
    """이미지별 행 + AGGREGATE 행"""
    rows = []
    for name, class_name, report in zip(names, classes, reports):
        rows.append({"image": name, "class": class_name, **report.scalars()})
    rows.append({"image": AGGREGATE_ROW, "class": "", **aggregate_report.scalars()})
    return pd.DataFrame(rows, columns=["image", "class", *METRIC_COLUMNS])


def curve_frames(report: MetricReport):
    pr = pd.DataFrame({"threshold": THRESHOLDS,
                       "precision": report.pr_curve[:, 0],
                       "recall": report.pr_curve[:, 1]})
    fc = pd.DataFrame({"threshold": THRESHOLDS, "f_measure": report.f_curve})
    return pr, fc


def write_metric_files(out_dir: str, names: Sequence[str], classes: Sequence[str],
                       reports: Sequence[MetricReport], aggregate_report: MetricReport,
                       by_class: Optional[Dict[str, MetricReport]] = None) -> List[str]:
    """metrics.csv, pr_curve.csv, f_curve.csv (+ metrics_by_class.csv)"""
    written = [write_table(metrics_frame(names, classes, reports, aggregate_report),
                           os.path.join(out_dir, "metrics.csv"))]
    pr, fc = curve_frames(aggregate_report)
    written.append(write_table(pr, os.path.join(out_dir, "pr_curve.csv")))
    written.append(write_table(fc, os.path.join(out_dir, "f_curve.csv")))
    if by_class:
        rows = [{"class": name, **report.scalars()} for name, report in by_class.items()]
        written.append(write_table(pd.DataFrame(rows, columns=["class", *METRIC_COLUMNS]),
                                   os.path.join(out_dir, "metrics_by_class.csv")))
    return written


def write_loss_log(path: str, records: Sequence[dict]) -> str:
    return write_table(pd.DataFrame(list(records), columns=["epoch", "mean_loss", "lr"]), path)


def write_features(path: str, names: Sequence[str], classes: Sequence[str], labels: Sequence[int],
                   features: np.ndarray) -> str:
    frame = pd.DataFrame(features, columns=[f"f{j}" for j in range(features.shape[1])])
    frame.insert(0, "class_index", list(labels))
    frame.insert(0, "class", list(classes))
    frame.insert(0, "image", list(names))
    return write_table(frame, path)


def write_comparison_xlsx(path: str, comparison: pd.DataFrame,
                          log_callback: Callable[[str], None] = _noop) -> Optional[str]:
    """디코더별 시트 하나, 헤더 + 지표 행"""
    if not HAS_OPENPYXL:
        log_callback("  ⚠️ openpyxl이 설치되지 않아 엑셀 비교표를 건너뜁니다 (설치: pip install openpyxl)")
        return None

    wb = openpyxl.Workbook()
    wb.remove(wb.active)
    header = [c for c in COMPARISON_COLUMNS if c != "decoder"]
    for decoder, group in comparison.groupby("decoder", sort=False):
        ws = wb.create_sheet(title=str(decoder)[:31])
        for col, name in enumerate(header, start=1):
            ws.cell(1, col).value = name
            ws.cell(1, col).font = Font(bold=True)
        for row, record in enumerate(group[header].itertuples(index=False), start=2):
            for col, value in enumerate(record, start=1):
                ws.cell(row, col).value = value.item() if isinstance(value, np.generic) else value
    try:
        wb.save(path)
    except OSError as e:
        raise DataError(f"엑셀 저장 실패 ({e})", path)
    finally:
        wb.close()
    log_callback(f"  ✓ 엑셀 비교표: {path}")
    return path
