#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Noise Indicator Fusion Module (NIFM)

날씨 노이즈 종류를 one-hot 벡터(노이즈 인디케이터)로 만들고,
stage 특징의 GAP 벡터와 이어붙여 FC 2개 + sigmoid로 채널 가중치를 계산한 뒤
특징 맵에 채널별로 곱한다.

    F^T = Concat(GAP(F_hat), T)
    W   = sigmoid(fc2(relu(fc1(F^T))))
    F   = W ⊗ F_hat
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sod_errors import ClassNameError, DimensionError
from tensor_autodiff import (
    Tensor, channel_scale, concat, global_average_pool, linear, mul,
    parameter, relu, sigmoid,
)

# 클래스 인덱스 순서 (Rain=1, Snow=2)
NOISE_CLASSES: Tuple[str, ...] = (
    "Clean", "Rain", "Snow", "Fog", "Light", "Dark",
    "Rain&Snow", "Rain&Fog", "Snow&Fog",
)

PROMPT_INIT_STD = 0.02


def _normalize_name(name: str) -> str:
    """'rain_snow', 'Rain&Snow', 'RAINSNOW' 모두 같은 키로"""
    return "".join(ch for ch in name.lower() if ch.isalnum())


class NoiseClassTable:
    """노이즈 클래스 이름 <-> 인덱스"""

    def __init__(self, names: Sequence[str] = NOISE_CLASSES):
        self.names: Tuple[str, ...] = tuple(names)
        self._index = {_normalize_name(n): i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, class_name: str) -> int:
        key = _normalize_name(class_name)
        if key not in self._index:
            raise ClassNameError(class_name, self.names)
        return self._index[key]

    def name_of(self, index: int) -> str:
        if not 0 <= index < len(self.names):
            raise ClassNameError(str(index), self.names)
        return self.names[index]

    def canonical(self, class_name: str) -> str:
        return self.names[self.index_of(class_name)]


DEFAULT_TABLE = NoiseClassTable()


@dataclass(frozen=True)
class NoiseIndicator:
    class_index: int
    vector: Tuple[float, ...]

    @property
    def length(self) -> int:
        return len(self.vector)


def make_indicator(class_name: str, table: NoiseClassTable = DEFAULT_TABLE) -> NoiseIndicator:
    """클래스 이름 -> one-hot 인디케이터"""
    index = table.index_of(class_name)
    return indicator_from_index(index, table)


def indicator_from_index(index: int, table: NoiseClassTable = DEFAULT_TABLE) -> NoiseIndicator:
    table.name_of(index)
    vector = [0.0] * len(table)
    vector[index] = 1.0
    return NoiseIndicator(class_index=index, vector=tuple(vector))


def indicator_batch(indicators: Union[NoiseIndicator, Sequence[NoiseIndicator]], batch_size: int) -> Tensor:
    """인디케이터(들) -> (N, M) 상수 텐서. 하나만 주면 배치 전체에 복제"""
    if isinstance(indicators, NoiseIndicator):
        indicators = [indicators] * batch_size
    if len(indicators) != batch_size:
        raise DimensionError(f"인디케이터 개수 {len(indicators)} != 배치 {batch_size}", axis="N")
    return Tensor(np.array([ind.vector for ind in indicators], dtype=np.float64))


class NifmVariant(str, Enum):
    DEFAULT = "Default"
    RECURSIVE = "Recursive"
    HYBRID = "Hybrid"
    PROMPT = "Prompt"
    DISABLED = "Disabled"

    @classmethod
    def parse(cls, value: Union[str, "NifmVariant"]) -> "NifmVariant":
        if isinstance(value, NifmVariant):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise ClassNameError(str(value), [m.value for m in cls])


def hidden_dim_for(channels_in: int, indicator_len: int = len(NOISE_CLASSES)) -> int:
    return max(channels_in // 4, indicator_len)


class NifmBlock:
    """NIFM 파라미터 묶음 (fc1, fc2, 선택적으로 prompt)"""

    def __init__(self, channels_in: int, indicator_len: int, hidden_dim: int,
                 variant_role: str = "default", rng: Optional[np.random.Generator] = None,
                 name: str = "nifm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels_in = channels_in
        self.indicator_len = indicator_len
        self.hidden_dim = hidden_dim
        self.variant_role = variant_role
        self.name = name

        fan1 = channels_in + indicator_len
        bound1 = 1.0 / np.sqrt(fan1)
        bound2 = 1.0 / np.sqrt(hidden_dim)
        self.fc1_weight = parameter(rng.uniform(-bound1, bound1, (hidden_dim, fan1)), f"{name}.fc1_weight")
        self.fc1_bias = parameter(rng.uniform(-bound1, bound1, hidden_dim), f"{name}.fc1_bias")
        self.fc2_weight = parameter(rng.uniform(-bound2, bound2, (channels_in, hidden_dim)), f"{name}.fc2_weight")
        self.fc2_bias = parameter(rng.uniform(-bound2, bound2, channels_in), f"{name}.fc2_bias")
        self.prompt: Optional[Tensor] = None

    def parameters(self) -> Dict[str, Tensor]:
        params = {
            "fc1_weight": self.fc1_weight,
            "fc1_bias": self.fc1_bias,
            "fc2_weight": self.fc2_weight,
            "fc2_bias": self.fc2_bias,
        }
        if self.prompt is not None:
            params["prompt"] = self.prompt
        return params

    def fc_param_count(self) -> int:
        return sum(t.size for key, t in self.parameters().items() if key != "prompt")

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


def nifm_weights(block: NifmBlock, features: Tensor, conditioning: Tensor) -> Tensor:
    """W = sigmoid(fc2(relu(fc1(concat(GAP(F), cond)))))"""
    if features.ndim != 4 or features.shape[1] != block.channels_in:
        raise DimensionError(
            f"{block.name}: 특징 채널 {features.shape[1] if features.ndim > 1 else '?'} != {block.channels_in}",
            axis="C")
    if conditioning.ndim != 2 or conditioning.shape[1] != block.indicator_len:
        raise DimensionError(
            f"{block.name}: 조건 벡터 길이 {conditioning.shape[-1]} != {block.indicator_len}", axis="L")
    if conditioning.shape[0] != features.shape[0]:
        raise DimensionError(
            f"{block.name}: 조건 배치 {conditioning.shape[0]} != {features.shape[0]}", axis="N")

    pooled = global_average_pool(features)
    fused = concat([pooled, conditioning], axis=1)
    hidden = relu(linear(fused, block.fc1_weight, block.fc1_bias))
    return sigmoid(linear(hidden, block.fc2_weight, block.fc2_bias))


def nifm_forward(block: NifmBlock, features: Tensor, conditioning: Tensor) -> Tuple[Tensor, Tensor]:
    """(modulated, weights) 반환"""
    weights = nifm_weights(block, features, conditioning)
    return channel_scale(features, weights), weights


def conditioning_for_stage(variant: Union[NifmVariant, str], stage_index: int,
                           indicator: Union[Tensor, NoiseIndicator], prev_weights: Optional[Tensor] = None,
                           block: Optional[NifmBlock] = None) -> Tensor:
    """n번째 NIFM에 들어갈 조건 벡터

    - Default: T
    - Prompt: 블록의 학습 prompt (배치로 복제), 인디케이터 무시
    - Recursive: n=1은 T, n>=2는 W_{n-1}만
    - Hybrid: n=1은 T, n>=2는 Concat(T, W_{n-1})
    """
    variant = NifmVariant.parse(variant)
    if variant == NifmVariant.DISABLED:
        raise ClassNameError(variant.value, [m.value for m in NifmVariant if m != NifmVariant.DISABLED])
    if isinstance(indicator, NoiseIndicator):
        indicator = indicator_batch(indicator, prev_weights.shape[0] if prev_weights is not None else 1)
    if not 1 <= stage_index <= 4:
        raise DimensionError(f"NIFM stage 인덱스 {stage_index}는 1..4 범위여야 합니다", axis="stage")

    needs_prev = stage_index >= 2 and variant in (NifmVariant.RECURSIVE, NifmVariant.HYBRID)
    if needs_prev and prev_weights is None:
        raise DimensionError(
            f"{variant.value} stage {stage_index}: 이전 NIFM 가중치가 필요합니다", axis="prev_weights")

    if variant == NifmVariant.PROMPT:
        if block is None or block.prompt is None:
            raise DimensionError("Prompt 변형에는 prompt 블록이 필요합니다", axis="prompt")
        n = indicator.shape[0]
        ones = Tensor(np.ones((n, 1)))
        return mul(ones, block.prompt)

    if not needs_prev:
        return indicator
    if variant == NifmVariant.RECURSIVE:
        return prev_weights
    return concat([indicator, prev_weights], axis=1)


def make_prompt_block(channels_in: int, seed: int, prompt_len: int = len(NOISE_CLASSES),
                      name: str = "prompt") -> NifmBlock:
    """인디케이터 대신 학습되는 prompt(길이 9, N(0, 0.02²))를 쓰는 블록"""
    rng = np.random.default_rng(seed)
    block = NifmBlock(channels_in, prompt_len, hidden_dim_for(channels_in, prompt_len),
                      variant_role="prompt", rng=rng, name=name)
    block.prompt = parameter(rng.normal(0.0, PROMPT_INIT_STD, (1, prompt_len)), f"{name}.prompt")
    return block


def build_nifm_blocks(variant: Union[NifmVariant, str], stage_channels: Sequence[int],
                      rng: np.random.Generator, indicator_len: int = len(NOISE_CLASSES)) -> List[NifmBlock]:
    """stage 1..4 뒤에 들어갈 블록 4개 (Disabled면 빈 리스트)"""
    variant = NifmVariant.parse(variant)
    if variant == NifmVariant.DISABLED:
        return []
    blocks = []
    for n in range(1, 5):
        channels = stage_channels[n - 1]
        name = f"nifm{n}"
        if variant == NifmVariant.PROMPT:
            seed = int(rng.integers(0, 2 ** 31 - 1))
            blocks.append(make_prompt_block(channels, seed, indicator_len, name=name))
            continue
        if n >= 2 and variant == NifmVariant.RECURSIVE:
            cond_len = stage_channels[n - 2]
        elif n >= 2 and variant == NifmVariant.HYBRID:
            cond_len = indicator_len + stage_channels[n - 2]
        else:
            cond_len = indicator_len
        blocks.append(NifmBlock(channels, cond_len, hidden_dim_for(channels, indicator_len),
                                variant_role=variant.value.lower(), rng=rng, name=name))
    return blocks
