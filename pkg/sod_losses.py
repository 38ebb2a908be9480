#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
학습 손실: L_total = L_bce + L_ssim + L_iou (다중 스케일 출력은 스케일별 합)

맵은 모두 (N, 1, H, W). 이미지별로 계산한 뒤 배치 평균.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np

from sod_errors import DimensionError, DomainError
from tensor_autodiff import Tensor, clamp, conv2d, log, reduce

# 0.01², 0.03² (일반적인 SSIM 상수)
STANDARD_SSIM_C1 = 0.01 ** 2
STANDARD_SSIM_C2 = 0.03 ** 2


@dataclass
class LossConfig:
    ssim_c1: float = 0.012
    ssim_c2: float = 0.032
    eps_clamp: float = 1e-7
    iou_eps: float = 1e-8
    ssim_mode: str = "global"
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if min(self.ssim_c1, self.ssim_c2, self.eps_clamp, self.iou_eps) <= 0:
            raise DomainError("손실 상수는 모두 양수여야 합니다")
        if self.ssim_mode not in ("global", "windowed"):
            raise DomainError(f"ssim_mode는 global 또는 windowed: {self.ssim_mode}")

    @classmethod
    def from_config(cls, loss_cfg: dict) -> "LossConfig":
        c1, c2 = float(loss_cfg["ssim_c1"]), float(loss_cfg["ssim_c2"])
        if loss_cfg.get("ssim_constants", "literal") == "standard":
            c1, c2 = STANDARD_SSIM_C1, STANDARD_SSIM_C2
        return cls(ssim_c1=c1, ssim_c2=c2,
                   eps_clamp=float(loss_cfg["eps_clamp"]),
                   iou_eps=float(loss_cfg["iou_eps"]),
                   ssim_mode=loss_cfg["ssim_mode"],
                   ssim_window=int(loss_cfg["ssim_window"]),
                   ssim_sigma=float(loss_cfg["ssim_sigma"]))


_IMAGE_AXES = (1, 2, 3)


def _as_map(value: Union[Tensor, np.ndarray]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_pair(pred: Tensor, gt: Tensor, op: str):
    if pred.ndim != 4:
        raise DimensionError(f"{op}: (N,1,H,W) 맵이 필요합니다 (shape={pred.shape})", axis="rank")
    if pred.shape != gt.shape:
        raise DimensionError(f"{op}: pred {pred.shape} != gt {gt.shape}", axis="shape")


def bce_loss(pred: Tensor, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """-gt·log(p) + (gt-1)·log(1-p) 의 픽셀 평균 (p는 [eps, 1-eps]로 clamp)"""
    gt = _as_map(gt)
    _check_pair(pred, gt, "bce_loss")
    p = clamp(pred, cfg.eps_clamp, 1.0 - cfg.eps_clamp)
    per_pixel = (gt - 1.0) * log(1.0 - p) - gt * log(p)
    return reduce(per_pixel, "mean")


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)[None, None, :, :]


def _ssim_global(pred: Tensor, gt: Tensor, cfg: LossConfig) -> Tensor:
    mu_p = reduce(pred, "mean", _IMAGE_AXES, keepdims=True)
    mu_g = reduce(gt, "mean", _IMAGE_AXES, keepdims=True)
    var_p = reduce(pred, "var", _IMAGE_AXES, keepdims=True)
    var_g = reduce(gt, "var", _IMAGE_AXES, keepdims=True)
    cov = reduce((pred - mu_p) * (gt - mu_g), "mean", _IMAGE_AXES, keepdims=True)
    numerator = (2.0 * mu_g * mu_p + cfg.ssim_c1) * (2.0 * cov + cfg.ssim_c2)
    denominator = (mu_g * mu_g + mu_p * mu_p + cfg.ssim_c1) * (var_g + var_p + cfg.ssim_c2)
    return reduce(numerator / denominator, "mean")


def _ssim_windowed(pred: Tensor, gt: Tensor, cfg: LossConfig) -> Tensor:
    window = Tensor(_gaussian_window(cfg.ssim_window, cfg.ssim_sigma))

    def blur(x: Tensor) -> Tensor:
        return conv2d(x, window, None, 1, 0)

    mu_p, mu_g = blur(pred), blur(gt)
    var_p = blur(pred * pred) - mu_p * mu_p
    var_g = blur(gt * gt) - mu_g * mu_g
    cov = blur(pred * gt) - mu_p * mu_g
    numerator = (2.0 * mu_g * mu_p + cfg.ssim_c1) * (2.0 * cov + cfg.ssim_c2)
    denominator = (mu_g * mu_g + mu_p * mu_p + cfg.ssim_c1) * (var_g + var_p + cfg.ssim_c2)
    return reduce(numerator / denominator, "mean")


def ssim_loss(pred: Tensor, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - SSIM. global: 맵 전체 μ/σ, windowed: 가우시안 창 평균 (창보다 작은 맵은 global)"""
    gt = _as_map(gt)
    _check_pair(pred, gt, "ssim_loss")
    h, w = pred.shape[2], pred.shape[3]
    if h * w < 2:
        raise DimensionError(f"ssim_loss: 픽셀이 2개 이상 필요합니다 ({h}x{w})", axis="H")
    use_window = cfg.ssim_mode == "windowed" and h >= cfg.ssim_window and w >= cfg.ssim_window
    score = _ssim_windowed(pred, gt, cfg) if use_window else _ssim_global(pred, gt, cfg)
    return 1.0 - score


def iou_loss(pred: Tensor, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """1 - Σgt·p / (Σgt + Σp - Σgt·p + eps), 합집합이 0인 이미지는 IoU 1 (loss 0)"""
    gt = _as_map(gt)
    _check_pair(pred, gt, "iou_loss")
    inter = reduce(gt * pred, "sum", _IMAGE_AXES)
    union = reduce(gt, "sum", _IMAGE_AXES) + reduce(pred, "sum", _IMAGE_AXES) - inter
    empty = Tensor((union.data == 0).astype(np.float64))
    iou = inter / (union + cfg.iou_eps) + empty
    return 1.0 - reduce(iou, "mean")


def downsample_mask(gt: np.ndarray, height: int, width: int) -> np.ndarray:
    """면적 평균 후 0.5 이상이면 1 (deep supervision용)"""
    n, c, h, w = gt.shape
    if (h, w) == (height, width):
        return gt
    if h % height or w % width:
        raise DimensionError(f"GT {h}x{w}를 {height}x{width}로 정수배 축소할 수 없습니다", axis="H")
    fh, fw = h // height, w // width
    area = gt.reshape(n, c, height, fh, width, fw).mean(axis=(3, 5))
    return (area >= 0.5).astype(np.float64)


def loss_terms(pred: Tensor, gt, cfg: LossConfig = LossConfig()) -> Dict[str, Tensor]:
    return {
        "bce": bce_loss(pred, gt, cfg),
        "ssim": ssim_loss(pred, gt, cfg),
        "iou": iou_loss(pred, gt, cfg),
    }


def total_loss(outputs: Union[Tensor, Sequence[Tensor]], gt: np.ndarray,
               cfg: LossConfig = LossConfig()) -> Tensor:
    """메인 출력 + side 출력 각각 bce+ssim+iou, 스케일 합 (가중치 모두 1)"""
    maps: List[Tensor] = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    total = None
    for pred in maps:
        scaled = downsample_mask(gt, pred.shape[2], pred.shape[3])
        terms = loss_terms(pred, scaled, cfg)
        scale_total = terms["bce"] + terms["ssim"] + terms["iou"]
        total = scale_total if total is None else total + scale_total
    return total
