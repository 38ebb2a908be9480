#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
SOD 평가 지표

MAE, S-measure, F-measure(adp/mean/max), E-measure(adp/mean/max), PR 곡선, F 곡선.
곡선은 임계값 t = k/255 (k = 0..255) 256개에서 계산한다.
예측 맵은 (H, W) float [0,1], 정답은 (H, W) {0,1}.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sod_errors import DimensionError, DomainError

BETA2 = 0.3
S_ALPHA = 0.5
NUM_THRESHOLDS = 256
THRESHOLDS = np.arange(NUM_THRESHOLDS, dtype=np.float64) / 255.0
EPS = np.finfo(np.float64).eps

# metrics.csv 컬럼 순서 (고정)
METRIC_COLUMNS = ("mae", "s_measure", "f_adp", "f_mean", "f_max", "e_adp", "e_mean", "e_max")


def _noop(message: str):
    pass


@dataclass
class EvalPair:
    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.ndim != 2:
            raise DimensionError(f"예측 맵은 (H, W)여야 합니다 (shape={self.pred.shape})", axis="rank")
        if self.pred.shape != self.gt.shape:
            raise DimensionError(f"pred {self.pred.shape} != gt {self.gt.shape}", axis="shape")
        if not np.all((self.gt == 0) | (self.gt == 1)):
            raise DomainError("정답 마스크는 0/1 값만 가져야 합니다")


@dataclass
class MetricReport:
    mae: float
    s_measure: float
    f_adp: float
    f_mean: float
    f_max: float
    e_adp: float
    e_mean: float
    e_max: float
    pr_curve: np.ndarray = field(repr=False)  # (256, 2): precision, recall
    f_curve: np.ndarray = field(repr=False)   # (256,)

    def scalars(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_COLUMNS}


def adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(pred.mean()), 1.0)


# ---------------------------------------------------------------------------
# 혼동 행렬 카운트
# ---------------------------------------------------------------------------

def _confusion(pred: np.ndarray, gt: np.ndarray, thresholds: np.ndarray) -> Tuple[np.ndarray, ...]:
    """임계값별 (TP, FP, FN, TN). 이진화는 pred >= t"""
    fg = np.sort(pred[gt == 1])
    bg = np.sort(pred[gt == 0])
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    fp = bg.size - np.searchsorted(bg, thresholds, side="left")
    fn = fg.size - tp
    tn = bg.size - fp
    return (tp.astype(np.float64), fp.astype(np.float64),
            fn.astype(np.float64), tn.astype(np.float64))


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _precision_recall_f(tp, fp, fn, beta2: float):
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f = _safe_ratio((1.0 + beta2) * precision * recall, beta2 * precision + recall)
    return precision, recall, f


# ---------------------------------------------------------------------------
# 지표
# ---------------------------------------------------------------------------

def mae(pair: EvalPair) -> float:
    return float(np.mean(np.abs(pair.pred - pair.gt)))


def f_measures(pair: EvalPair, beta2: float = BETA2):
    """(f_adp, f_mean, f_max, pr_curve(256,2), f_curve(256,))"""
    tp, fp, fn, _ = _confusion(pair.pred, pair.gt, THRESHOLDS)
    precision, recall, f_curve = _precision_recall_f(tp, fp, fn, beta2)

    adp = np.array([adaptive_threshold(pair.pred)])
    tp_a, fp_a, fn_a, _ = _confusion(pair.pred, pair.gt, adp)
    f_adp = _precision_recall_f(tp_a, fp_a, fn_a, beta2)[2][0]

    pr_curve = np.stack([precision, recall], axis=1)
    return float(f_adp), float(f_curve.mean()), float(f_curve.max()), pr_curve, f_curve


def _enhanced_alignment(tp, fp, fn, tn, gt_mean: float) -> np.ndarray:
    """임계값별 E(t). 픽셀은 (gt, B) 4가지 조합뿐이라 카운트로 평균을 낸다"""
    total = tp + fp + fn + tn
    if gt_mean == 0:
        return (fn + tn) / total  # enhanced = 1 - B
    if gt_mean == 1:
        return (tp + fp) / total  # enhanced = B

    b_mean = (tp + fp) / total
    phi_gt = {1: 1.0 - gt_mean, 0: -gt_mean}
    phi_b = {1: 1.0 - b_mean, 0: -b_mean}

    def enhanced(g: int, b: int) -> np.ndarray:
        pg, pb = phi_gt[g], phi_b[b]
        xi = 2.0 * pg * pb / (pg * pg + pb * pb + EPS)
        return (xi + 1.0) ** 2 / 4.0

    score = (tp * enhanced(1, 1) + fn * enhanced(1, 0)
             + fp * enhanced(0, 1) + tn * enhanced(0, 0))
    return score / total


def e_measures(pair: EvalPair):
    """(e_adp, e_mean, e_max)"""
    gt_mean = float(pair.gt.mean())
    e_curve = _enhanced_alignment(*_confusion(pair.pred, pair.gt, THRESHOLDS), gt_mean)
    adp = np.array([adaptive_threshold(pair.pred)])
    e_adp = _enhanced_alignment(*_confusion(pair.pred, pair.gt, adp), gt_mean)[0]
    return float(e_adp), float(e_curve.mean()), float(e_curve.max())


# ---------------------------------------------------------------------------
# S-measure (object + region)
# ---------------------------------------------------------------------------

def _object_score(values: np.ndarray) -> float:
    """2x / (x^2 + 1 + σ + eps), σ는 표본 표준편차 (λ = 0.5)"""
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg_mask = gt == 1
    u = float(gt.mean())
    fg_score = _object_score(pred[fg_mask])
    bg_score = _object_score(1.0 - pred[~fg_mask])
    return u * fg_score + (1.0 - u) * bg_score


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    """전경 무게중심 (x, y), 반올림 후 +1 (분할 경계 인덱스)"""
    rows, cols = np.nonzero(gt)
    if rows.size == 0:
        h, w = gt.shape
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _block_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = float(pred.mean()), float(gt.mean())
    dof = max(n - 1, 1)
    sigma_x = float(((pred - x) ** 2).sum()) / dof
    sigma_y = float(((gt - y) ** 2).sum()) / dof
    sigma_xy = float(((pred - x) * (gt - y)).sum()) / dof
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    x, y = min(x, w), min(y, h)
    area = float(h * w)
    blocks = (
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    )
    score = 0.0
    for rs, cs in blocks:
        p, g = pred[rs, cs], gt[rs, cs]
        if p.size == 0:
            continue
        score += (p.size / area) * _block_ssim(p, g)
    return score


def s_measure(pair: EvalPair, alpha: float = S_ALPHA) -> float:
    y = float(pair.gt.mean())
    if y == 0:
        score = 1.0 - float(pair.pred.mean())
    elif y == 1:
        score = float(pair.pred.mean())
    else:
        score = alpha * _s_object(pair.pred, pair.gt) + (1.0 - alpha) * _s_region(pair.pred, pair.gt)
    return float(np.clip(score, 0.0, 1.0))


# ---------------------------------------------------------------------------
# 종합
# ---------------------------------------------------------------------------

def evaluate_pair(pair: EvalPair) -> MetricReport:
    f_adp, f_mean, f_max, pr_curve, f_curve = f_measures(pair)
    e_adp, e_mean, e_max = e_measures(pair)
    return MetricReport(mae=mae(pair), s_measure=s_measure(pair),
                        f_adp=f_adp, f_mean=f_mean, f_max=f_max,
                        e_adp=e_adp, e_mean=e_mean, e_max=e_max,
                        pr_curve=pr_curve, f_curve=f_curve)


def evaluate_many(pairs: Sequence[EvalPair], workers: int = 4,
                  log_callback: Callable[[str], None] = _noop) -> List[MetricReport]:
    """이미지별 평가 (스레드 풀, 결과는 입력 순서대로)"""
    reports: List[Optional[MetricReport]] = [None] * len(pairs)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(evaluate_pair, pair): i for i, pair in enumerate(pairs)}
        for future, i in futures.items():
            reports[i] = future.result()
    log_callback(f"  ✓ {len(pairs)}개 이미지 평가 완료")
    return reports


def _order_free_mean(stack: np.ndarray) -> np.ndarray:
    """정렬 후 합산 - 입력 순서와 무관하게 같은 결과"""
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """스칼라는 산술 평균, 곡선은 점별 평균"""
    if not reports:
        raise DomainError("집계할 평가 결과가 없습니다")
    values = {
        name: float(_order_free_mean(np.array([getattr(r, name) for r in reports])))
        for name in METRIC_COLUMNS
    }
    pr = _order_free_mean(np.stack([r.pr_curve for r in reports]))
    fc = _order_free_mean(np.stack([r.f_curve for r in reports]))
    return MetricReport(pr_curve=pr, f_curve=fc, **values)


# ---------------------------------------------------------------------------
# 특징 분리도 (실루엣)
# ---------------------------------------------------------------------------

def separation_score(features: np.ndarray, labels: Sequence[int]) -> float:
    """이미지별 (b - a) / max(a, b)의 평균

    a: 같은 클래스 다른 샘플과의 평균 거리, b: 다른 클래스별 평균 거리의 최솟값.
    a = b = 0 이면 0, 샘플이 하나뿐인 클래스의 샘플도 0.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DimensionError(f"특징 {features.shape}와 라벨 {labels.shape} 개수가 맞지 않습니다", axis="N")
    n = features.shape[0]
    if n == 0:
        raise DomainError("분리도를 계산할 특징이 없습니다")
    classes = np.unique(labels)
    if classes.size < 2:
        return 0.0

    diff = features[:, None, :] - features[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    scores = np.zeros(n)
    for i in range(n):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = dist[i, same].mean()
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())
