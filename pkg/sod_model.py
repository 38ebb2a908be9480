#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
SOD 모델: NIFM이 들어간 5-stage 인코더 + 교체 가능한 디코더

- stage = [conv3x3 -> relu -> conv3x3 -> relu] x blocks_per_stage -> maxpool2
- NIFM은 stage 1..4 뒤에 하나씩 (F5는 변조하지 않음)
- 디코더는 F1..F5만 받으므로 인코더 변형과 무관하게 교체 가능
- 체크포인트: JSON manifest + little-endian f64 바이너리
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from nifm_module import (
    NifmBlock, NifmVariant, NoiseIndicator, build_nifm_blocks,
    conditioning_for_stage, indicator_batch, indicator_from_index, nifm_forward,
)
from sod_errors import CheckpointError, ConfigError, DimensionError
from tensor_autodiff import (
    Tensor, add, conv2d, count_macs, parameter, pool_max2, relu, sigmoid,
    upsample_nearest2,
)

CHECKPOINT_FORMAT = "weather-sod-checkpoint"
CHECKPOINT_VERSION = 1


class DecoderKind(str, Enum):
    PLAIN_TOP_DOWN = "PlainTopDown"
    DEEP_SUPERVISED = "DeepSupervised"

    @classmethod
    def parse(cls, value: Union[str, "DecoderKind"]) -> "DecoderKind":
        if isinstance(value, DecoderKind):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise ConfigError(f"알 수 없는 디코더 종류: {value} (가능한 값: {', '.join(m.value for m in cls)})")


@dataclass
class EncoderSpec:
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    blocks_per_stage: int = 1
    input_channels: int = 3
    nifm_variant: NifmVariant = NifmVariant.DEFAULT

    def __post_init__(self):
        self.nifm_variant = NifmVariant.parse(self.nifm_variant)
        self.stage_channels = [int(c) for c in self.stage_channels]
        if len(self.stage_channels) != 5:
            raise DimensionError(f"stage는 정확히 5개여야 합니다 ({len(self.stage_channels)}개)", axis="stage")
        if any(c < 1 for c in self.stage_channels) or self.blocks_per_stage < 1 or self.input_channels < 1:
            raise DimensionError("채널/블록 수는 양수여야 합니다", axis="stage")


@dataclass
class DecoderSpec:
    kind: DecoderKind = DecoderKind.PLAIN_TOP_DOWN
    channels: int = 16

    def __post_init__(self):
        self.kind = DecoderKind.parse(self.kind)

    @property
    def side_outputs(self) -> int:
        return 3 if self.kind == DecoderKind.DEEP_SUPERVISED else 0


@dataclass
class ModelSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    seed: int = 0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["encoder"]["nifm_variant"] = self.encoder.nifm_variant.value
        data["decoder"]["kind"] = self.decoder.kind.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(encoder=EncoderSpec(**data["encoder"]),
                   decoder=DecoderSpec(**data["decoder"]),
                   seed=int(data.get("seed", 0)))

    @classmethod
    def from_config(cls, model_cfg: dict, seed: int = 0) -> "ModelSpec":
        """config.json의 model 섹션에서 생성"""
        encoder = EncoderSpec(stage_channels=list(model_cfg["stage_channels"]),
                              blocks_per_stage=int(model_cfg["blocks_per_stage"]),
                              input_channels=int(model_cfg["input_channels"]),
                              nifm_variant=model_cfg["nifm_variant"])
        decoder = DecoderSpec(kind=model_cfg["decoder"], channels=int(model_cfg["decoder_channels"]))
        return cls(encoder=encoder, decoder=decoder, seed=seed)


@dataclass
class CostReport:
    params: int
    macs: int
    resolution: int
    fps: float
    nifm_params: int = 0


@dataclass
class EncoderOutput:
    features: List[Tensor]
    nifm_weights: List[Tensor]


@dataclass
class DecoderOutput:
    saliency: Tensor
    side_outputs: List[Tensor]

    def all_maps(self) -> List[Tensor]:
        return [self.saliency] + list(self.side_outputs)


def _he_conv(rng: np.random.Generator, k: int, c: int, size: int, name: str) -> Tuple[Tensor, Tensor]:
    std = np.sqrt(2.0 / (c * size * size))
    weight = parameter(rng.normal(0.0, std, (k, c, size, size)), f"{name}.weight")
    bias = parameter(np.zeros(k), f"{name}.bias")
    return weight, bias


class SodModel:
    """파라미터 컨테이너 + forward"""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: Dict[str, Tensor] = {}
        enc = spec.encoder
        # 인코더/NIFM/디코더 난수 스트림 분리 (Disabled와 NIFM 모델의 공통 부분 초기값이 같도록)
        enc_rng = np.random.default_rng([spec.seed, 0])
        nifm_rng = np.random.default_rng([spec.seed, 1])
        dec_rng = np.random.default_rng([spec.seed, 2])

        self.stages: List[List[str]] = []
        in_ch = enc.input_channels
        for i, out_ch in enumerate(enc.stage_channels, start=1):
            convs = []
            for b in range(enc.blocks_per_stage):
                for j in (1, 2):
                    name = f"stage{i}.block{b + 1}.conv{j}"
                    self._add_conv(enc_rng, out_ch, in_ch, 3, name)
                    convs.append(name)
                    in_ch = out_ch
            self.stages.append(convs)

        self.nifm_blocks: List[NifmBlock] = build_nifm_blocks(enc.nifm_variant, enc.stage_channels, nifm_rng)
        for block in self.nifm_blocks:
            for key, tensor in block.parameters().items():
                self.params[f"{block.name}.{key}"] = tensor

        dec = spec.decoder
        for i, ch in enumerate(enc.stage_channels, start=1):
            self._add_conv(dec_rng, dec.channels, ch, 1, f"decoder.lateral{i}")
        self._add_conv(dec_rng, 1, dec.channels, 3, "decoder.head")
        for s in range(1, dec.side_outputs + 1):
            self._add_conv(dec_rng, 1, dec.channels, 3, f"decoder.side{s}")

    def _add_conv(self, rng: np.random.Generator, k: int, c: int, size: int, name: str):
        weight, bias = _he_conv(rng, k, c, size, name)
        self.params[f"{name}.weight"] = weight
        self.params[f"{name}.bias"] = bias

    def _conv(self, x: Tensor, name: str, padding: int) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, padding)

    # ------------------------------------------------------------------
    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def nifm_param_count(self) -> int:
        return sum(block.param_count() for block in self.nifm_blocks)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------
    def encoder_forward(self, image: Tensor,
                        indicator: Union[NoiseIndicator, Sequence[NoiseIndicator]]) -> EncoderOutput:
        """F1..F5 (F_i 공간 크기 = 입력 / 2^i)"""
        enc = self.spec.encoder
        if image.ndim != 4:
            raise DimensionError(f"이미지는 (N,C,H,W)여야 합니다 (shape={image.shape})", axis="rank")
        n, c, h, w = image.shape
        if c != enc.input_channels:
            raise DimensionError(f"입력 채널 {c} != {enc.input_channels}", axis="C")
        if h % 32:
            raise DimensionError(f"입력 높이 {h}는 32의 배수여야 합니다", axis="H")
        if w % 32:
            raise DimensionError(f"입력 너비 {w}는 32의 배수여야 합니다", axis="W")

        cond = indicator_batch(indicator, n) if self.nifm_blocks else None
        x = image
        prev_weights: Optional[Tensor] = None
        features: List[Tensor] = []
        weights: List[Tensor] = []
        for i, convs in enumerate(self.stages, start=1):
            for name in convs:
                x = relu(self._conv(x, name, padding=1))
            x = pool_max2(x)
            if self.nifm_blocks and i <= 4:
                block = self.nifm_blocks[i - 1]
                conditioning = conditioning_for_stage(enc.nifm_variant, i, cond, prev_weights, block)
                x, prev_weights = nifm_forward(block, x, conditioning)
                weights.append(prev_weights)
            features.append(x)
        return EncoderOutput(features=features, nifm_weights=weights)

    def decoder_forward(self, features: Sequence[Tensor]) -> DecoderOutput:
        """top-down 1x1 lateral + upsample + add -> 3x3 head -> sigmoid"""
        chans = self.spec.encoder.stage_channels
        if len(features) != 5:
            raise DimensionError(f"디코더는 특징 5개가 필요합니다 ({len(features)}개)", axis="stage")
        for i, (f, ch) in enumerate(zip(features, chans), start=1):
            if f.ndim != 4 or f.shape[1] != ch:
                raise DimensionError(f"F{i} 채널 {f.shape[1] if f.ndim > 1 else '?'} != {ch}", axis="C")
        for i in range(4):
            if features[i].shape[2] != 2 * features[i + 1].shape[2] or \
                    features[i].shape[3] != 2 * features[i + 1].shape[3]:
                raise DimensionError(f"F{i + 1}/F{i + 2} 해상도 비율이 2가 아닙니다", axis="H")

        p = relu(self._conv(features[4], "decoder.lateral5", padding=0))
        pyramid: Dict[int, Tensor] = {5: p}
        for i in (4, 3, 2, 1):
            lateral = self._conv(features[i - 1], f"decoder.lateral{i}", padding=0)
            p = relu(add(lateral, upsample_nearest2(p)))
            pyramid[i] = p

        logits = self._conv(upsample_nearest2(pyramid[1]), "decoder.head", padding=1)
        saliency = sigmoid(logits)

        sides: List[Tensor] = []
        for s in range(1, self.spec.decoder.side_outputs + 1):
            sides.append(sigmoid(self._conv(pyramid[s], f"decoder.side{s}", padding=1)))
        return DecoderOutput(saliency=saliency, side_outputs=sides)

    def forward(self, image: Tensor,
                indicator: Union[NoiseIndicator, Sequence[NoiseIndicator]]) -> DecoderOutput:
        return self.decoder_forward(self.encoder_forward(image, indicator).features)


def encoder_forward(model: SodModel, image: Tensor, indicator) -> List[Tensor]:
    return model.encoder_forward(image, indicator).features


def decoder_forward(model: SodModel, features: Sequence[Tensor]) -> DecoderOutput:
    return model.decoder_forward(features)


def count_ops(spec: ModelSpec, resolution: int = 384, timed_runs: int = 20,
              warmup_runs: int = 3) -> CostReport:
    """파라미터 수(정확), MAC 수, FPS(중앙값) 측정"""
    model = SodModel(spec)
    image = Tensor(np.zeros((1, spec.encoder.input_channels, resolution, resolution)))
    clean = indicator_from_index(0)
    with count_macs() as counter:
        model.forward(image, clean)

    fps = 0.0
    if timed_runs > 0:
        for _ in range(warmup_runs):
            model.forward(image, clean)
        durations = []
        for _ in range(timed_runs):
            start = time.perf_counter()
            model.forward(image, clean)
            durations.append(time.perf_counter() - start)
        median = float(np.median(durations))
        fps = 1.0 / median if median > 0 else 0.0

    return CostReport(params=model.param_count(), macs=counter.macs, resolution=resolution,
                      fps=fps, nifm_params=model.nifm_param_count())


# ---------------------------------------------------------------------------
# 체크포인트
# ---------------------------------------------------------------------------

def checkpoint_paths(path: str) -> Tuple[str, str]:
    """'model', 'model.json', 'model.bin' 모두 (json, bin) 경로쌍으로"""
    base = path
    for suffix in (".json", ".bin"):
        if base.endswith(suffix):
            base = base[:-len(suffix)]
    return base + ".json", base + ".bin"


def save_checkpoint(model: SodModel, path: str, extra: Optional[dict] = None) -> str:
    json_path, bin_path = checkpoint_paths(path)
    parent = os.path.dirname(json_path)
    if parent:
        os.makedirs(parent, exist_ok=True)

    index = []
    offset = 0
    for name, tensor in model.params.items():
        index.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": tensor.size})
        offset += tensor.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "params": index,
        "total": offset,
        "blob": os.path.basename(bin_path),
        "extra": extra or {},
    }
    blob = np.concatenate([t.data.ravel() for t in model.params.values()]).astype("<f8")
    with open(bin_path, "wb") as f:
        f.write(blob.tobytes())
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    return json_path


def load_checkpoint(path: str) -> Tuple[SodModel, dict]:
    """(모델, extra) 반환"""
    json_path, bin_path = checkpoint_paths(path)
    try:
        with open(json_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"체크포인트 파일을 찾을 수 없습니다: {json_path}")
    except json.JSONDecodeError:
        raise CheckpointError(f"체크포인트 형식이 올바르지 않습니다: {json_path}")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"체크포인트 형식이 아닙니다: {json_path}")

    model = SodModel(ModelSpec.from_dict(manifest["spec"]))
    try:
        blob = np.fromfile(bin_path, dtype="<f8")
    except FileNotFoundError:
        raise CheckpointError(f"파라미터 파일을 찾을 수 없습니다: {bin_path}")
    if blob.size != manifest["total"]:
        raise CheckpointError(f"파라미터 개수 불일치: {blob.size} != {manifest['total']}")

    names = [entry["name"] for entry in manifest["params"]]
    if names != list(model.params.keys()):
        raise CheckpointError("체크포인트 파라미터 목록이 spec과 일치하지 않습니다")
    for entry in manifest["params"]:
        tensor = model.params[entry["name"]]
        if tuple(entry["shape"]) != tensor.shape:
            raise CheckpointError(f"{entry['name']}: shape {entry['shape']} != {list(tensor.shape)}")
        values = blob[entry["offset"]:entry["offset"] + entry["count"]]
        tensor.data = values.astype(np.float64).reshape(tensor.shape)
    return model, manifest.get("extra", {})
