#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
설정 로드 (config.json + --set 오버라이드)

사용자 값은 DEFAULT_CONFIG 위에 병합된다. DEFAULT_CONFIG에 없는 키는 거부.
"""

import copy
import json
import re
from typing import Any, Dict, Iterable, Optional

from sod_errors import ConfigError

DEFAULT_CONFIG: Dict[str, Any] = {
    "model": {
        "stage_channels": [16, 32, 64, 128, 256],
        "blocks_per_stage": 1,
        "input_channels": 3,
        "nifm_variant": "Default",
        "decoder": "PlainTopDown",
        "decoder_channels": 16,
    },
    "loss": {
        "ssim_c1": 0.012,
        "ssim_c2": 0.032,
        "ssim_constants": "literal",
        "eps_clamp": 1e-7,
        "iou_eps": 1e-8,
        "ssim_mode": "global",
        "ssim_window": 11,
        "ssim_sigma": 1.5,
    },
    "training": {
        "epochs": 20,
        "batch_size": 4,
        "image_size": 64,
        "seed": 0,
        "lr": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "lr_gamma": 0.2,
        "lr_step_epochs": 40,
        "checkpoint_every": 0,
        "train_fraction": 1.0,
        "train_split": "train",
    },
    "dataset": {
        "image_size": 64,
        "seed": 0,
        "n_objects_min": 1,
        "n_objects_max": 3,
        # 클래스 비율은 WXSOD 학습 세트 비율을 90장 규모로 축소
        "train_counts": {
            "Clean": 4, "Rain": 11, "Snow": 11, "Fog": 11, "Light": 11,
            "Dark": 11, "Rain&Snow": 10, "Rain&Fog": 11, "Snow&Fog": 10,
        },
        "test_counts": {
            "Clean": 5, "Rain": 5, "Snow": 5, "Fog": 5, "Light": 5,
            "Dark": 5, "Rain&Snow": 5, "Rain&Fog": 5, "Snow&Fog": 5,
        },
    },
    "weather": {
        "rain_streaks": 40,
        "rain_length": 8,
        "rain_angle_deg": 15.0,
        "rain_intensity": 0.6,
        "snow_flakes": 60,
        "snow_radius_min": 0.5,
        "snow_radius_max": 1.5,
        "snow_intensity": 0.8,
        "fog_alpha": 0.5,
        "fog_white": 0.9,
        "light_gain": 1.6,
        "dark_gain": 0.4,
    },
    "evaluation": {
        "split": "test",
        "indicator_mode": "correct",
        # fixed 모드는 모든 샘플에 같은 클래스를 줌 (Clean 샘플은 정답 인디케이터 유지)
        "fixed_class": "Clean",
        "shuffle_seed": 0,
        "feature_stage": 4,
        "batch_size": 8,
    },
    "experiment": {
        "decoders": ["PlainTopDown", "DeepSupervised"],
        "variants": ["Default"],
        "seeds": [0, 1, 2],
        "train_fractions": [1.0],
        "workers": 1,
        "out_dir": "results",
        "write_xlsx": True,
    },
    "wxsod_layout": {
        "split_tag": "test_real",
        "mask_pattern": r"^(?P<stem>.+)_gt\.png$",
        "image_extensions": [".png", ".jpg", ".jpeg"],
    },
    "logging": {
        "enabled": True,
        "log_dir": "logs",
        "file_pattern": "weather_sod_{date}.txt",
    },
    "runtime": {
        "workers": 4,
        "fps_runs": 20,
        "fps_warmup": 3,
    },
}


def _merge(base: dict, user: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"알 수 없는 설정 키: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"설정 '{dotted}'는 객체여야 합니다")
            merged[key] = _merge(base[key], value, dotted + ".")
        else:
            merged[key] = value
    return merged


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(config_path: Optional[str] = None) -> dict:
    """설정 파일 로드 (없으면 기본값)"""
    if config_path is None:
        return default_config()
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            user = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"설정 파일을 찾을 수 없습니다: {config_path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"설정 파일 형식이 올바르지 않습니다: {config_path} ({e.msg}, line {e.lineno})")
    if not isinstance(user, dict):
        raise ConfigError(f"설정 파일 최상위는 객체여야 합니다: {config_path}")
    config = _merge(DEFAULT_CONFIG, user)
    validate_config(config)
    return config


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    """'section.key=value' 목록 적용 (값은 JSON으로 해석, 실패하면 문자열)"""
    config = copy.deepcopy(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"오버라이드 형식은 section.key=value 입니다: {item}")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = config
        for depth, key in enumerate(keys):
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"알 수 없는 설정 키: {'.'.join(keys[:depth + 1])}")
            if depth == len(keys) - 1:
                if isinstance(node[key], dict):
                    raise ConfigError(f"'{dotted}'는 섹션입니다. 하위 키를 지정하세요")
                node[key] = _parse_value(raw)
            else:
                node = node[key]
    validate_config(config)
    return config


def validate_config(config: dict):
    training = config["training"]
    for key in ("epochs", "batch_size", "image_size", "lr_step_epochs"):
        if not isinstance(training[key], int) or training[key] < 1:
            raise ConfigError(f"training.{key}는 1 이상의 정수여야 합니다: {training[key]}")
    if training["image_size"] % 32:
        raise ConfigError(f"training.image_size는 32의 배수여야 합니다: {training['image_size']}")
    if not 0.0 < float(training["train_fraction"]) <= 1.0:
        raise ConfigError(f"training.train_fraction은 (0, 1] 범위여야 합니다: {training['train_fraction']}")
    if config["dataset"]["n_objects_min"] < 1 or \
            config["dataset"]["n_objects_max"] < config["dataset"]["n_objects_min"]:
        raise ConfigError("dataset.n_objects_min/max 범위가 올바르지 않습니다")
    if config["runtime"]["workers"] < 1:
        raise ConfigError("runtime.workers는 1 이상이어야 합니다")
    try:
        re.compile(config["wxsod_layout"]["mask_pattern"])
    except re.error as e:
        raise ConfigError(f"wxsod_layout.mask_pattern 정규식 오류: {e}")


def dump_config(config: dict) -> str:
    return json.dumps(config, ensure_ascii=False, indent=2)
