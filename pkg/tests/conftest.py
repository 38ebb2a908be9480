# -*- coding: utf-8 -*-
"""공용 fixture: 작은 모델/데이터 설정"""

import json

import numpy as np
import pytest

from nifm_module import NOISE_CLASSES
from sod_config import load_config
from weather_dataset import Sample


def _counts(**nonzero):
    counts = {name: 0 for name in NOISE_CLASSES}
    counts.update({k.replace("_", "&"): v for k, v in nonzero.items()})
    return counts


def tiny_user_config(log_dir: str) -> dict:
    return {
        "model": {"stage_channels": [4, 4, 4, 4, 4], "decoder_channels": 4},
        "training": {"epochs": 2, "batch_size": 2, "image_size": 32},
        "dataset": {
            "image_size": 32,
            "train_counts": _counts(Clean=1, Rain=1, Fog=1, Dark=1),
            "test_counts": _counts(Rain=1, Snow=1, Fog=1),
        },
        "evaluation": {"batch_size": 4},
        "experiment": {"decoders": ["PlainTopDown"], "variants": ["Default"], "seeds": [0], "workers": 1},
        "logging": {"log_dir": log_dir},
        "runtime": {"workers": 1, "fps_runs": 0, "fps_warmup": 0},
    }


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_user_config(str(tmp_path / "logs"))), encoding="utf-8")
    return str(path)


@pytest.fixture
def tiny_config(tiny_config_path):
    return load_config(tiny_config_path)


@pytest.fixture
def tiny_samples():
    rng = np.random.default_rng(17)
    samples = []
    for k, class_index in enumerate([1, 2, 3, 5, 1, 2]):
        mask = np.zeros((1, 32, 32))
        top, left = rng.integers(4, 16, size=2)
        mask[0, top:top + 12, left:left + 10] = 1.0
        image = rng.uniform(0.0, 0.4, size=(3, 32, 32))
        image[:, mask[0] == 1] += 0.5
        samples.append(Sample(image=image, mask=mask, class_index=class_index,
                              class_name=NOISE_CLASSES[class_index], meta={"image": f"s{k}.png"}))
    return samples
