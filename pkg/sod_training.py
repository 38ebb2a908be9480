#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
학습 / 평가 / 실험

- Adam (β1=0.9, β2=0.999, ε=1e-8) + StepLR (γ=0.2, 40 epoch마다)
- 미니배치 셔플은 seed 고정 순열
- 평가: 인디케이터 정책 correct / fixed / shuffled
- 실험: (디코더 x 학습 비율 x seed) 셀마다 Disabled 기준 모델과 NIFM 변형을 학습해 비교
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from nifm_module import DEFAULT_TABLE, NifmVariant, indicator_from_index
from report_writer import (
    COMPARISON_COLUMNS, curve_frames, write_comparison_xlsx, write_table,
)
from sod_errors import DataError, DomainError, MissingGradientError
from sod_losses import LossConfig, total_loss
from sod_metrics import (
    METRIC_COLUMNS, EvalPair, MetricReport, aggregate, evaluate_many, separation_score,
)
from sod_model import DecoderKind, ModelSpec, SodModel, save_checkpoint
from tensor_autodiff import ComputationTape, Tensor, backward, global_average_pool
from weather_dataset import DatasetManifest, Sample, filter_split, load_samples

INDICATOR_MODES = ("correct", "fixed", "shuffled")
# MAE만 낮을수록 좋음
DECREASING_METRICS = ("mae",)


def _noop(message: str):
    pass


# ---------------------------------------------------------------------------
# 옵티마이저
# ---------------------------------------------------------------------------

def lr_at_epoch(epoch: int, base_lr: float = 0.001, gamma: float = 0.2, step_epochs: int = 40) -> float:
    """lr(e) = base · γ^⌊e/step⌋ (e는 0부터)"""
    return base_lr * gamma ** (epoch // step_epochs)


@dataclass
class OptimState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "OptimState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()},
                   beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Dict[str, Tensor], state: OptimState, lr: float,
              grads: Optional[Dict[str, np.ndarray]] = None):
    """bias 보정 Adam 한 스텝. 파라미터 데이터는 새 배열로 교체"""
    if grads is None:
        grads = {}
        for name, tensor in params.items():
            if tensor.grad is None:
                raise MissingGradientError(name)
            grads[name] = tensor.grad
    for name in params:
        if name not in grads or grads[name] is None:
            raise MissingGradientError(name)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# 학습
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    image_size: int = 64
    seed: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_gamma: float = 0.2
    lr_step_epochs: int = 40
    checkpoint_every: int = 0
    train_fraction: float = 1.0
    train_split: Optional[str] = "train"
    model_spec: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.image_size < 1:
            raise DomainError("epochs, batch_size, image_size는 1 이상이어야 합니다")

    @classmethod
    def from_config(cls, config: dict) -> "TrainConfig":
        t = config["training"]
        return cls(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                   image_size=int(t["image_size"]), seed=int(t["seed"]),
                   lr=float(t["lr"]), beta1=float(t["beta1"]), beta2=float(t["beta2"]),
                   adam_eps=float(t["adam_eps"]), lr_gamma=float(t["lr_gamma"]),
                   lr_step_epochs=int(t["lr_step_epochs"]),
                   checkpoint_every=int(t["checkpoint_every"]),
                   train_fraction=float(t["train_fraction"]),
                   train_split=t["train_split"] or None,
                   model_spec=ModelSpec.from_config(config["model"], seed=int(t["seed"])),
                   loss=LossConfig.from_config(config["loss"]))

    def lr_for(self, epoch: int) -> float:
        return lr_at_epoch(epoch, self.lr, self.lr_gamma, self.lr_step_epochs)

    def summary(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "image_size": self.image_size,
                "seed": self.seed, "lr": self.lr, "lr_gamma": self.lr_gamma,
                "lr_step_epochs": self.lr_step_epochs, "train_fraction": self.train_fraction}


@dataclass
class TrainResult:
    model: SodModel
    loss_log: List[dict]
    steps: int
    checkpoint_path: Optional[str] = None


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """seed 고정 순열을 batch_size씩 자른 인덱스 목록 (마지막 배치는 작을 수 있음)"""
    order = rng.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


def batch_arrays(samples: Sequence[Sample], indices: Sequence[int]):
    """(images Tensor, masks ndarray, indicators)"""
    images = Tensor(np.stack([samples[i].image for i in indices]))
    masks = np.stack([samples[i].mask for i in indices])
    indicators = [indicator_from_index(samples[i].class_index) for i in indices]
    return images, masks, indicators


def train_on_samples(cfg: TrainConfig, samples: Sequence[Sample], out_path: Optional[str] = None,
                     log_callback: Callable[[str], None] = _noop) -> TrainResult:
    if not samples:
        raise DataError("학습 샘플이 없습니다")
    model = SodModel(cfg.model_spec)
    params = model.parameters()
    state = OptimState.for_params(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 3])
    n = len(samples)
    loss_log: List[dict] = []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_for(epoch)
        batch_losses = []
        for indices in epoch_batches(n, cfg.batch_size, rng):
            images, masks, indicators = batch_arrays(samples, indices)
            model.zero_grad()
            with ComputationTape() as tape:
                output = model.forward(images, indicators)
                loss = total_loss(output.all_maps(), masks, cfg.loss)
            backward(loss)
            tape.clear()
            adam_step(params, state, lr)
            batch_losses.append(loss.item())

        mean_loss = math.fsum(batch_losses) / len(batch_losses)
        loss_log.append({"epoch": epoch + 1, "mean_loss": mean_loss, "lr": lr})
        log_callback(f"  epoch {epoch + 1:3d}/{cfg.epochs}  loss={mean_loss:.6f}  lr={lr:.6g}")

        if out_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 \
                and epoch + 1 < cfg.epochs:
            base = os.path.splitext(out_path)[0]
            save_checkpoint(model, f"{base}_epoch{epoch + 1:03d}",
                            extra={"epoch": epoch + 1, "train": cfg.summary()})

    checkpoint_path = None
    if out_path:
        checkpoint_path = save_checkpoint(model, out_path,
                                          extra={"epoch": cfg.epochs, "train": cfg.summary(),
                                                 "loss_log": loss_log})
        log_callback(f"  ✓ 체크포인트 저장: {checkpoint_path}")
    return TrainResult(model=model, loss_log=loss_log, steps=state.step, checkpoint_path=checkpoint_path)


def training_manifest(cfg: TrainConfig, manifest: DatasetManifest) -> DatasetManifest:
    selected = manifest.select(cfg.train_split)
    if cfg.train_fraction < 1.0:
        selected = filter_split(selected, cfg.train_fraction, cfg.seed)
    return selected


def train(cfg: TrainConfig, manifest: DatasetManifest, out_path: Optional[str] = None,
          workers: int = 4, log_callback: Callable[[str], None] = _noop) -> TrainResult:
    """manifest의 학습 split으로 학습 -> 체크포인트 + epoch별 loss 기록"""
    selected = training_manifest(cfg, manifest)
    if len(selected) == 0:
        raise DataError(f"학습 split '{cfg.train_split}'에 샘플이 없습니다", manifest.root)
    log_callback(f"  학습 샘플 {len(selected)}개 (fraction={cfg.train_fraction}), "
                 f"NIFM={cfg.model_spec.encoder.nifm_variant.value}, "
                 f"decoder={cfg.model_spec.decoder.kind.value}")
    samples = load_samples(selected, cfg.image_size, workers)
    return train_on_samples(cfg, samples, out_path, log_callback)


# ---------------------------------------------------------------------------
# 평가
# ---------------------------------------------------------------------------

def indicator_classes(samples: Sequence[Sample], mode: str, fixed_class: str = "Clean",
                      seed: int = 0) -> List[int]:
    """인디케이터 정책별 클래스 인덱스 목록"""
    labels = [s.class_index for s in samples]
    if mode == "correct":
        return labels
    if mode == "fixed":
        return [DEFAULT_TABLE.index_of(fixed_class)] * len(labels)
    if mode == "shuffled":
        rng = np.random.default_rng([seed, 4])
        return [labels[i] for i in rng.permutation(len(labels))]
    raise DomainError(f"indicator_mode는 {', '.join(INDICATOR_MODES)} 중 하나여야 합니다: {mode}")


def predict(model: SodModel, samples: Sequence[Sample], classes: Sequence[int],
            batch_size: int = 8, stage: Optional[int] = None):
    """(saliency 맵 목록 (H,W), stage 특징 GAP (K,C) 또는 None) - tape 없이 실행"""
    maps: List[np.ndarray] = []
    pooled: List[np.ndarray] = []
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        images = Tensor(np.stack([samples[i].image for i in idx]))
        indicators = [indicator_from_index(classes[i]) for i in idx]
        encoded = model.encoder_forward(images, indicators)
        if stage is not None:
            pooled.append(global_average_pool(encoded.features[stage - 1]).data)
        saliency = model.decoder_forward(encoded.features).saliency.data
        maps.extend(saliency[j, 0] for j in range(len(idx)))
    features = np.concatenate(pooled, axis=0) if pooled else None
    return maps, features


@dataclass
class EvalResult:
    names: List[str]
    classes: List[str]
    reports: List[MetricReport]
    aggregate: MetricReport
    by_class: Dict[str, MetricReport]


def evaluate(model: SodModel, samples: Sequence[Sample], indicator_mode: str = "correct",
             fixed_class: str = "Clean", shuffle_seed: int = 0, batch_size: int = 8,
             workers: int = 4, log_callback: Callable[[str], None] = _noop) -> EvalResult:
    if not samples:
        raise DataError("평가할 샘플이 없습니다")
    classes = indicator_classes(samples, indicator_mode, fixed_class, shuffle_seed)
    maps, _ = predict(model, samples, classes, batch_size)
    pairs = [EvalPair(pred, s.mask[0]) for pred, s in zip(maps, samples)]
    reports = evaluate_many(pairs, workers, log_callback)

    by_class: Dict[str, MetricReport] = {}
    for class_name in DEFAULT_TABLE.names:
        members = [r for r, s in zip(reports, samples) if s.class_name == class_name]
        if members:
            by_class[class_name] = aggregate(members)
    return EvalResult(names=[s.meta.get("image", "") for s in samples],
                      classes=[s.class_name for s in samples],
                      reports=reports, aggregate=aggregate(reports), by_class=by_class)


def export_features(model: SodModel, samples: Sequence[Sample], stage: int = 4,
                    indicator_mode: str = "correct", fixed_class: str = "Clean",
                    shuffle_seed: int = 0, batch_size: int = 8) -> Tuple[np.ndarray, List[int], float]:
    """(stage 특징 GAP (K,C), 실제 노이즈 클래스, 분리도)"""
    if not 1 <= stage <= 5:
        raise DomainError(f"stage는 1..5 범위여야 합니다: {stage}")
    if not samples:
        raise DataError("특징을 추출할 샘플이 없습니다")
    classes = indicator_classes(samples, indicator_mode, fixed_class, shuffle_seed)
    _, features = predict(model, samples, classes, batch_size, stage=stage)
    labels = [s.class_index for s in samples]
    return features, labels, separation_score(features, labels)


# ---------------------------------------------------------------------------
# 실험 (기준 모델 vs NIFM)
# ---------------------------------------------------------------------------

def delta_pct(metric: str, baseline: float, variant: float) -> float:
    """MAE는 (기준-변형)/기준, 나머지는 (변형-기준)/기준, 단위 %"""
    if baseline == 0:
        return 0.0
    if metric in DECREASING_METRICS:
        return (baseline - variant) / baseline * 100.0
    return (variant - baseline) / baseline * 100.0


@dataclass
class CellResult:
    decoder: str
    variant: str
    fraction: float
    seed: int
    report: MetricReport
    separation: Dict[str, float]


@dataclass
class ExperimentResult:
    comparison: pd.DataFrame
    separation: pd.DataFrame
    files: List[str]


def _run_cell(config: dict, manifest: DatasetManifest, test_samples: Sequence[Sample],
              decoder: str, variant: str, fraction: float, seed: int, out_dir: str,
              workers: int, log_callback: Callable[[str], None]) -> CellResult:
    cfg = TrainConfig.from_config(config)
    spec = ModelSpec.from_config({**config["model"], "decoder": decoder, "nifm_variant": variant}, seed=seed)
    cfg = replace(cfg, seed=seed, train_fraction=fraction, model_spec=spec)
    tag = f"{decoder}_{variant}_f{fraction:g}_s{seed}"
    log_callback(f"  ▶ {tag}")
    ckpt = os.path.join(out_dir, "checkpoints", tag)
    result = train(cfg, manifest, ckpt, workers, _noop)

    eval_cfg = config["evaluation"]
    evaluation = evaluate(result.model, test_samples, "correct", batch_size=eval_cfg["batch_size"],
                          workers=workers)
    stage = int(eval_cfg["feature_stage"])
    separation = {"correct": export_features(result.model, test_samples, stage, "correct",
                                             batch_size=eval_cfg["batch_size"])[2]}
    if variant != NifmVariant.DISABLED.value:
        separation["shuffled"] = export_features(result.model, test_samples, stage, "shuffled",
                                                 shuffle_seed=seed, batch_size=eval_cfg["batch_size"])[2]
    log_callback(f"    ✓ {tag}: MAE={evaluation.aggregate.mae:.4f}, "
                 f"sep={separation['correct']:.4f}, final loss={result.loss_log[-1]['mean_loss']:.4f}")
    return CellResult(decoder=decoder, variant=variant, fraction=fraction, seed=seed,
                      report=evaluation.aggregate, separation=separation)


def run_experiment(config: dict, manifest: DatasetManifest, seeds: Sequence[int], out_dir: str,
                   log_callback: Callable[[str], None] = _noop) -> ExperimentResult:
    """(디코더 x 학습 비율) 마다 Disabled 기준 모델과 각 NIFM 변형을 seed별로 학습/평가"""
    exp = config["experiment"]
    decoders = [DecoderKind.parse(d).value for d in exp["decoders"]]
    variants = [NifmVariant.parse(v).value for v in exp["variants"]]
    if NifmVariant.DISABLED.value in variants:
        raise DomainError("experiment.variants에는 Disabled를 넣지 않습니다 (기준 모델로 자동 포함)")
    fractions = [float(f) for f in exp["train_fractions"]]
    workers = int(config["runtime"]["workers"])
    baseline = NifmVariant.DISABLED.value

    test_manifest = manifest.select(config["evaluation"]["split"])
    if len(test_manifest) == 0:
        raise DataError(f"평가 split '{config['evaluation']['split']}'에 샘플이 없습니다", manifest.root)
    test_samples = load_samples(test_manifest, int(config["training"]["image_size"]), workers)

    cells = [(d, v, f, s) for f in fractions for d in decoders for v in [baseline] + variants for s in seeds]
    log_callback(f"  실험 셀 {len(cells)}개 (디코더 {len(decoders)} x 변형 {len(variants) + 1} "
                 f"x 비율 {len(fractions)} x seed {len(seeds)})")

    def run(cell):
        d, v, f, s = cell
        return _run_cell(config, manifest, test_samples, d, v, f, s, out_dir, workers, log_callback)

    with ThreadPoolExecutor(max_workers=max(1, int(exp["workers"]))) as executor:
        results = list(executor.map(run, cells))
    by_key = {(r.decoder, r.variant, r.fraction, r.seed): r for r in results}

    files: List[str] = []
    rows = []
    sep_rows = []
    for f in fractions:
        for d in decoders:
            base_report = aggregate([by_key[(d, baseline, f, s)].report for s in seeds])
            pr, fc = curve_frames(base_report)
            files.append(write_table(pr.merge(fc, on="threshold"),
                                     os.path.join(out_dir, f"pr_curve_{d}_{baseline}_f{f:g}.csv")))
            for v in variants:
                var_report = aggregate([by_key[(d, v, f, s)].report for s in seeds])
                for metric in METRIC_COLUMNS:
                    b, x = getattr(base_report, metric), getattr(var_report, metric)
                    rows.append({"decoder": d, "train_fraction": f, "nifm_variant": v, "metric": metric,
                                 "baseline": b, "variant": x, "delta_pct": delta_pct(metric, b, x)})
                pr, fc = curve_frames(var_report)
                files.append(write_table(pr.merge(fc, on="threshold"),
                                         os.path.join(out_dir, f"pr_curve_{d}_{v}_f{f:g}.csv")))
                log_callback(f"  📊 {d} / {v} (fraction {f:g}): MAE {base_report.mae:.4f} -> "
                             f"{var_report.mae:.4f} ({delta_pct('mae', base_report.mae, var_report.mae):+.2f}%)")
                for s in seeds:
                    cell = by_key[(d, v, f, s)]
                    sep_rows.append({"decoder": d, "train_fraction": f, "nifm_variant": v, "seed": s,
                                     "baseline": by_key[(d, baseline, f, s)].separation["correct"],
                                     "nifm_correct": cell.separation["correct"],
                                     "nifm_shuffled": cell.separation["shuffled"]})

    comparison = pd.DataFrame(rows, columns=COMPARISON_COLUMNS)
    separation = pd.DataFrame(sep_rows, columns=["decoder", "train_fraction", "nifm_variant", "seed",
                                                 "baseline", "nifm_correct", "nifm_shuffled"])
    files.append(write_table(comparison, os.path.join(out_dir, "comparison.csv")))
    files.append(write_table(separation, os.path.join(out_dir, "separation.csv")))
    if exp.get("write_xlsx", True):
        xlsx = write_comparison_xlsx(os.path.join(out_dir, "comparison.xlsx"), comparison, log_callback)
        if xlsx:
            files.append(xlsx)
    return ExperimentResult(comparison=comparison, separation=separation, files=files)
