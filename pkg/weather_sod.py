#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
날씨 노이즈 SOD 실험 도구 (명령행)

    python weather_sod.py generate-data --out data --seed 0
    python weather_sod.py train --data data --out runs/model
    python weather_sod.py eval --ckpt runs/model --data data --indicator-mode correct --out runs/eval
    python weather_sod.py count-ops --resolution 384
    python weather_sod.py export-features --ckpt runs/model --data data --stage 4
    python weather_sod.py experiment --seeds 0,1,2

모든 하위 명령은 --config (JSON)와 --set section.key=value 를 받는다.
"""

import argparse
import os
import sys
from typing import Callable, List, Optional, Sequence

import pandas as pd

from nifm_module import NifmVariant
from report_writer import write_features, write_loss_log, write_metric_files, write_table
from run_log import RunLog
from sod_config import apply_overrides, dump_config, load_config
from sod_errors import DataError, WeatherSodError
from sod_model import ModelSpec, count_ops, load_checkpoint
from sod_training import (
    INDICATOR_MODES, TrainConfig, evaluate, export_features, run_experiment, train,
)
from weather_dataset import (
    MANIFEST_NAME, DatasetManifest, generate, load_manifest, load_samples, load_wxsod_layout,
)

DEFAULT_CONFIG_PATH = "config.json"


class WeatherSodSystem:
    """설정을 들고 각 하위 명령을 실행하는 메인 클래스"""

    def __init__(self, config: dict):
        self.config = config
        self.workers = int(config["runtime"]["workers"])

    # ------------------------------------------------------------------
    # 데이터
    # ------------------------------------------------------------------
    def dataset_counts(self) -> dict:
        ds = self.config["dataset"]
        return {"train": dict(ds["train_counts"]), "test": dict(ds["test_counts"])}

    def generate_data(self, out_dir: str, seed: Optional[int], log_callback) -> DatasetManifest:
        ds = self.config["dataset"]
        seed = int(ds["seed"] if seed is None else seed)
        log_callback("[1/1] 합성 데이터 생성 중...")
        manifest = generate(self.dataset_counts(), seed, out_dir,
                            image_size=int(ds["image_size"]),
                            weather_cfg=self.config["weather"],
                            n_objects_range=(int(ds["n_objects_min"]), int(ds["n_objects_max"])),
                            workers=self.workers, log_callback=log_callback)
        log_callback(f"  ✓ manifest: {os.path.join(out_dir, MANIFEST_NAME)} ({len(manifest)}개)")
        return manifest

    def load_data(self, data_dir: str, log_callback) -> DatasetManifest:
        """manifest.json이 있으면 합성 데이터, 없으면 WXSOD 폴더 형식"""
        if os.path.isfile(os.path.join(data_dir, MANIFEST_NAME)) or data_dir.endswith(".json"):
            return load_manifest(data_dir)
        layout = self.config["wxsod_layout"]
        return load_wxsod_layout(data_dir, split_tag=layout["split_tag"],
                                 mask_pattern=layout["mask_pattern"],
                                 image_extensions=layout["image_extensions"],
                                 log_callback=log_callback)

    def eval_manifest(self, manifest: DatasetManifest, split: Optional[str]) -> DatasetManifest:
        if split is None:
            split = self.config["evaluation"]["split"]
            if split not in manifest.splits():
                return manifest
        return manifest.select(split)

    # ------------------------------------------------------------------
    # 하위 명령
    # ------------------------------------------------------------------
    def train_model(self, data_dir: str, out_path: str, log_callback) -> str:
        cfg = TrainConfig.from_config(self.config)
        log_callback("[1/2] 데이터 로드 중...")
        manifest = self.load_data(data_dir, log_callback)
        log_callback(f"  ✓ {len(manifest)}개 항목")
        log_callback("")
        log_callback(f"[2/2] 학습 중... ({cfg.epochs} epochs, batch {cfg.batch_size})")
        result = train(cfg, manifest, out_path, self.workers, log_callback)
        loss_path = write_loss_log(f"{os.path.splitext(out_path)[0]}_loss.csv", result.loss_log)
        log_callback(f"  ✓ loss 기록: {loss_path} ({result.steps} steps)")
        return result.checkpoint_path

    def evaluate_checkpoint(self, ckpt: str, data_dir: str, indicator_mode: str, out_dir: str,
                            fixed_class: str, split: Optional[str], log_callback) -> List[str]:
        eval_cfg = self.config["evaluation"]
        log_callback("[1/3] 체크포인트 로드 중...")
        model, extra = load_checkpoint(ckpt)
        log_callback(f"  ✓ NIFM={model.spec.encoder.nifm_variant.value}, "
                     f"decoder={model.spec.decoder.kind.value}, params={model.param_count():,}")
        log_callback("")

        log_callback("[2/3] 평가 데이터 로드 중...")
        manifest = self.eval_manifest(self.load_data(data_dir, log_callback), split)
        if len(manifest) == 0:
            raise DataError("평가할 샘플이 없습니다", data_dir)
        samples = load_samples(manifest, int(self.config["training"]["image_size"]), self.workers)
        log_callback(f"  ✓ {len(samples)}개 샘플")
        log_callback("")

        log_callback(f"[3/3] 평가 중... (indicator={indicator_mode})")
        result = evaluate(model, samples, indicator_mode, fixed_class,
                          int(eval_cfg["shuffle_seed"]), int(eval_cfg["batch_size"]),
                          self.workers, log_callback)
        files = write_metric_files(out_dir, result.names, result.classes, result.reports,
                                   result.aggregate, result.by_class)
        agg = result.aggregate
        log_callback(f"  📊 MAE={agg.mae:.4f}  S={agg.s_measure:.4f}  "
                     f"maxF={agg.f_max:.4f}  maxE={agg.e_max:.4f}")
        for path in files:
            log_callback(f"  ✓ {path}")
        return files

    def count_ops_table(self, resolution: int, log_callback) -> pd.DataFrame:
        runtime = self.config["runtime"]
        spec = ModelSpec.from_config(self.config["model"], seed=int(self.config["training"]["seed"]))
        baseline_spec = ModelSpec.from_config({**self.config["model"],
                                               "nifm_variant": NifmVariant.DISABLED.value},
                                              seed=spec.seed)
        log_callback(f"[1/1] 연산량 측정 중... ({resolution}x{resolution})")
        rows = []
        reports = {}
        specs = [(NifmVariant.DISABLED.value, baseline_spec)]
        if spec.encoder.nifm_variant != NifmVariant.DISABLED:
            specs.append((spec.encoder.nifm_variant.value, spec))
        for label, s in specs:
            report = count_ops(s, resolution, int(runtime["fps_runs"]), int(runtime["fps_warmup"]))
            reports[label] = report
            rows.append({"model": label, "params": report.params, "macs": report.macs,
                         "fps": report.fps, "nifm_params": report.nifm_params})
        if len(specs) == 2:
            base, var = reports[specs[0][0]], reports[specs[1][0]]
            rows.append({"model": "delta", "params": var.params - base.params,
                         "macs": var.macs - base.macs, "fps": var.fps - base.fps,
                         "nifm_params": var.nifm_params})
        table = pd.DataFrame(rows, columns=["model", "params", "macs", "fps", "nifm_params"])
        for line in table.to_string(index=False).splitlines():
            log_callback(f"  {line}")
        return table

    def export_feature_table(self, ckpt: str, data_dir: str, stage: int, indicator_mode: str,
                             out_path: Optional[str], split: Optional[str], log_callback) -> float:
        eval_cfg = self.config["evaluation"]
        model, _ = load_checkpoint(ckpt)
        manifest = self.eval_manifest(self.load_data(data_dir, log_callback), split)
        if len(manifest) == 0:
            raise DataError("특징을 추출할 샘플이 없습니다", data_dir)
        samples = load_samples(manifest, int(self.config["training"]["image_size"]), self.workers)
        log_callback(f"[1/1] stage {stage} 특징 추출 중... ({len(samples)}개, indicator={indicator_mode})")
        features, labels, score = export_features(model, samples, stage, indicator_mode,
                                                  eval_cfg["fixed_class"], int(eval_cfg["shuffle_seed"]),
                                                  int(eval_cfg["batch_size"]))
        out_path = out_path or f"{os.path.splitext(ckpt)[0]}_features_stage{stage}.csv"
        write_features(out_path, [s.meta.get("image", "") for s in samples],
                       [s.class_name for s in samples], labels, features)
        log_callback(f"  ✓ 특징 CSV: {out_path}")
        log_callback(f"  📊 분리도 (silhouette): {score:.6f}")
        return score

    def run_experiment(self, data_dir: Optional[str], seeds: Sequence[int], out_dir: str, log_callback):
        log_callback("[1/2] 데이터 준비 중...")
        if data_dir:
            manifest = self.load_data(data_dir, log_callback)
        else:
            manifest = self.generate_data(os.path.join(out_dir, "data"), None, log_callback)
        log_callback("")
        log_callback(f"[2/2] 실험 실행 중... (seeds={', '.join(str(s) for s in seeds)})")
        result = run_experiment(self.config, manifest, seeds, out_dir, log_callback)
        for path in result.files:
            log_callback(f"  ✓ {path}")
        return result


# ---------------------------------------------------------------------------
# 명령행
# ---------------------------------------------------------------------------

def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed 목록은 쉼표로 구분한 정수여야 합니다: {text}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG_PATH,
                        help="설정 파일 (JSON, 없으면 기본값 사용)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="설정 덮어쓰기 (반복 가능)")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="weather_sod", description="날씨 노이즈 SOD 학습/평가 도구",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], formatter_class=fmt, help="합성 데이터셋 생성")
    p.add_argument("--out", required=True, help="출력 폴더")
    p.add_argument("--seed", type=int, default=None, help="마스터 seed (기본: dataset.seed)")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="모델 학습")
    p.add_argument("--data", required=True, help="데이터 폴더 (manifest.json 또는 WXSOD 형식)")
    p.add_argument("--out", required=True, help="체크포인트 경로 (<out>.json + <out>.bin)")

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="체크포인트 평가")
    p.add_argument("--ckpt", required=True, help="체크포인트 경로")
    p.add_argument("--data", required=True, help="데이터 폴더")
    p.add_argument("--indicator-mode", choices=INDICATOR_MODES, default="correct", help="인디케이터 정책")
    p.add_argument("--fixed-class", default=None, help="fixed 모드의 클래스 (기본: evaluation.fixed_class)")
    p.add_argument("--split", default=None, help="평가 split (기본: evaluation.split)")
    p.add_argument("--out", required=True, help="결과 폴더")

    p = sub.add_parser("count-ops", parents=[common], formatter_class=fmt, help="파라미터/MAC/FPS 측정")
    p.add_argument("--resolution", type=int, default=384, help="입력 해상도")
    p.add_argument("--out", default=None, help="CSV 저장 경로 (선택)")

    p = sub.add_parser("export-features", parents=[common], formatter_class=fmt, help="stage 특징 GAP 내보내기")
    p.add_argument("--ckpt", required=True, help="체크포인트 경로")
    p.add_argument("--data", required=True, help="데이터 폴더")
    p.add_argument("--stage", type=int, choices=range(1, 6), default=4, help="stage 번호")
    p.add_argument("--indicator-mode", choices=INDICATOR_MODES, default="correct", help="인디케이터 정책")
    p.add_argument("--split", default=None, help="split (기본: evaluation.split)")
    p.add_argument("--out", default=None, help="CSV 경로 (기본: <ckpt>_features_stage<N>.csv)")

    p = sub.add_parser("experiment", parents=[common], formatter_class=fmt, help="기준 모델 vs NIFM 비교 실험")
    p.add_argument("--seeds", type=_seed_list, default=None, help="쉼표 구분 seed (기본: experiment.seeds)")
    p.add_argument("--data", default=None, help="데이터 폴더 (없으면 <out>/data에 생성)")
    p.add_argument("--out", default=None, help="결과 폴더 (기본: experiment.out_dir)")
    return parser


def resolve_config(args) -> dict:
    path = args.config
    if path == DEFAULT_CONFIG_PATH and not os.path.exists(path):
        path = None
    return apply_overrides(load_config(path), args.overrides)


def run_command(system: WeatherSodSystem, args, log: Callable[[str], None]):
    if args.command == "generate-data":
        system.generate_data(args.out, args.seed, log)
    elif args.command == "train":
        system.train_model(args.data, args.out, log)
    elif args.command == "eval":
        fixed = args.fixed_class or system.config["evaluation"]["fixed_class"]
        system.evaluate_checkpoint(args.ckpt, args.data, args.indicator_mode, args.out, fixed, args.split, log)
    elif args.command == "count-ops":
        table = system.count_ops_table(args.resolution, log)
        if args.out:
            log(f"  ✓ {write_table(table, args.out)}")
    elif args.command == "export-features":
        system.export_feature_table(args.ckpt, args.data, args.stage, args.indicator_mode,
                                    args.out, args.split, log)
    elif args.command == "experiment":
        exp = system.config["experiment"]
        seeds = args.seeds if args.seeds is not None else [int(s) for s in exp["seeds"]]
        system.run_experiment(args.data, seeds, args.out or exp["out_dir"], log)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    run_log: Optional[RunLog] = None
    try:
        config = resolve_config(args)
        print(dump_config(config))
        sys.stdout.flush()

        log_cfg = config["logging"]
        run_log = RunLog(log_cfg["log_dir"], log_cfg["file_pattern"], bool(log_cfg["enabled"]))
        run_log.open()
        run_log.banner(f"{args.command} 시작")

        run_command(WeatherSodSystem(config), args, run_log)

        run_log.log("")
        run_log.footer(f"✅ {args.command} 완료" + (f" (경고 {run_log.warnings}건)" if run_log.warnings else ""))
        return 0
    except WeatherSodError as e:
        if run_log:
            run_log.log(f"❌ 오류 발생: {e.message}")
        print(e.one_line(), file=sys.stderr)
        return 1
    except Exception as e:
        if run_log:
            run_log.log(f"❌ 오류 발생: {e}")
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    finally:
        if run_log:
            run_log.close()


if __name__ == "__main__":
    sys.exit(main())
