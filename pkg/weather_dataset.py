#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
합성 다중 날씨 SOD 데이터셋

- 장면: 텍스처 배경 + 물체 1~3개 (ellipse / rectangle / blob), GT = 물체 영역의 합집합
- 날씨: rain(밝은 사선 줄기), snow(밝은 원), fog(흰색 알파 블렌딩),
        light/dark(곱셈 게인), 복합 클래스는 구성 요소를 순서대로 적용
- 저장: <out>/<split>/<class>/<id>.png, <id>_gt.png, manifest.json
- WXSOD 형식 폴더 로더 (클래스별 하위 폴더, 이미지/마스크 쌍)
"""

import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from nifm_module import DEFAULT_TABLE, NoiseClassTable
from sod_errors import DataError, DomainError

MANIFEST_NAME = "manifest.json"
SHAPES = ("ellipse", "rectangle", "blob")
MASK_THRESHOLD = 128

# 복합 클래스는 구성 요소를 이 순서로 적용
CLASS_COMPONENTS: Dict[str, Tuple[str, ...]] = {
    "Clean": (),
    "Rain": ("rain",),
    "Snow": ("snow",),
    "Fog": ("fog",),
    "Light": ("light",),
    "Dark": ("dark",),
    "Rain&Snow": ("rain", "snow"),
    "Rain&Fog": ("rain", "fog"),
    "Snow&Fog": ("snow", "fog"),
}

_MASK64 = (1 << 64) - 1


def _noop(message: str):
    pass


def splitmix64(value: int) -> int:
    """64비트 splitmix 한 단계 (하위 시드 파생용)"""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, ordinal: int) -> int:
    return splitmix64((splitmix64(master_seed & _MASK64) + ordinal) & _MASK64)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0,1] -> uint8, round-half-up"""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# 장면 렌더링
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    seed: int
    image_size: int = 64
    n_objects: int = 1
    background_base: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    background_gradient: float = 0.2
    texture_amplitude: float = 0.05
    shapes: Tuple[str, ...] = SHAPES

    @classmethod
    def random(cls, seed: int, image_size: int = 64, n_objects_range: Tuple[int, int] = (1, 3)) -> "SceneSpec":
        rng = np.random.default_rng([seed, 0])
        lo, hi = n_objects_range
        return cls(seed=seed, image_size=image_size,
                   n_objects=int(rng.integers(lo, hi + 1)),
                   background_base=tuple(float(v) for v in rng.uniform(0.2, 0.6, 3)),
                   background_gradient=float(rng.uniform(0.0, 0.3)),
                   texture_amplitude=float(rng.uniform(0.02, 0.08)))


def _blob_points(rng: np.random.Generator, cx: float, cy: float, radius: float) -> List[Tuple[float, float]]:
    count = 10
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    radii = radius * rng.uniform(0.6, 1.0, count)
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]


def render_scene(spec: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(image HxWx3 float [0,1], mask HxW {0,1})"""
    size = spec.image_size
    rng = np.random.default_rng([spec.seed, 1])

    ramp = np.linspace(-0.5, 0.5, size)[None, :, None] * spec.background_gradient
    image = np.array(spec.background_base, dtype=np.float64)[None, None, :] + ramp
    image = image + rng.normal(0.0, spec.texture_amplitude, (size, size, 3))
    image = np.clip(np.broadcast_to(image, (size, size, 3)), 0.0, 1.0).copy()
    mask = np.zeros((size, size), dtype=np.float64)

    for _ in range(spec.n_objects):
        shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        radius = rng.uniform(0.12, 0.25) * size
        cx = rng.uniform(radius, size - radius)
        cy = rng.uniform(radius, size - radius)
        color = rng.uniform(0.55, 1.0, 3) if rng.random() < 0.5 else rng.uniform(0.0, 0.3, 3)

        support_img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(support_img)
        box = (cx - radius, cy - radius, cx + radius, cy + radius)
        if shape == "ellipse":
            draw.ellipse(box, fill=255)
        elif shape == "rectangle":
            draw.rectangle(box, fill=255)
        else:
            draw.polygon(_blob_points(rng, cx, cy, radius), fill=255)
        support = np.asarray(support_img) > 0

        image[support] = color
        mask[support] = 1.0
    return image, mask


# ---------------------------------------------------------------------------
# 날씨 열화
# ---------------------------------------------------------------------------

@dataclass
class WeatherSpec:
    class_index: int
    rain_streaks: int = 40
    rain_length: int = 8
    rain_angle_deg: float = 15.0
    rain_intensity: float = 0.6
    snow_flakes: int = 60
    snow_radius_min: float = 0.5
    snow_radius_max: float = 1.5
    snow_intensity: float = 0.8
    fog_alpha: float = 0.5
    fog_white: float = 0.9
    light_gain: float = 1.6
    dark_gain: float = 0.4

    @classmethod
    def from_config(cls, class_index: int, weather_cfg: dict) -> "WeatherSpec":
        return cls(class_index=class_index, **weather_cfg)

    @property
    def components(self) -> Tuple[str, ...]:
        return CLASS_COMPONENTS[DEFAULT_TABLE.name_of(self.class_index)]


def _streak_layer(rng: np.random.Generator, size: int, spec: WeatherSpec) -> np.ndarray:
    layer = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(layer)
    angle = math.radians(spec.rain_angle_deg)
    dx, dy = spec.rain_length * math.sin(angle), spec.rain_length * math.cos(angle)
    for _ in range(spec.rain_streaks):
        x, y = rng.uniform(0, size), rng.uniform(-spec.rain_length, size)
        draw.line((x, y, x + dx, y + dy), fill=255, width=1)
    return np.asarray(layer, dtype=np.float64) / 255.0 * spec.rain_intensity


def _flake_layer(rng: np.random.Generator, size: int, spec: WeatherSpec) -> np.ndarray:
    layer = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(layer)
    for _ in range(spec.snow_flakes):
        x, y = rng.uniform(0, size), rng.uniform(0, size)
        r = rng.uniform(spec.snow_radius_min, spec.snow_radius_max)
        draw.ellipse((x - r, y - r, x + r, y + r), fill=255)
    return np.asarray(layer, dtype=np.float64) / 255.0 * spec.snow_intensity


def apply_weather(image: np.ndarray, spec: WeatherSpec, rng: np.random.Generator) -> np.ndarray:
    """열화된 이미지 (Clean은 입력 그대로). 결과는 [0,1]로 clamp"""
    components = spec.components
    if not components:
        return image
    size = image.shape[0]
    out = image
    for kind in components:
        if kind == "rain":
            out = out + _streak_layer(rng, size, spec)[:, :, None]
        elif kind == "snow":
            out = out + _flake_layer(rng, size, spec)[:, :, None]
        elif kind == "fog":
            out = (1.0 - spec.fog_alpha) * out + spec.fog_alpha * spec.fog_white
        elif kind == "light":
            out = out * spec.light_gain
        elif kind == "dark":
            out = out * spec.dark_gain
        out = np.clip(out, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    mask: str
    class_name: str
    split: str

    def to_dict(self) -> dict:
        return {"image": self.image, "mask": self.mask, "class": self.class_name, "split": self.split}


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int = 0
    root: str = "."
    warnings: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> Dict[str, int]:
        result: Dict[str, int] = {}
        for entry in self.entries:
            result[entry.class_name] = result.get(entry.class_name, 0) + 1
        return result

    def splits(self) -> List[str]:
        return sorted({e.split for e in self.entries})

    def select(self, split: Optional[str]) -> "DatasetManifest":
        if split is None:
            return self
        return replace(self, entries=[e for e in self.entries if e.split == split])

    def resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "entries": [e.to_dict() for e in self.entries]}

    def save(self, path: Optional[str] = None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        except OSError as e:
            raise DataError(f"manifest 저장 실패 ({e})", path)
        return path


def load_manifest(data_dir: str, table: NoiseClassTable = DEFAULT_TABLE) -> DatasetManifest:
    path = data_dir if data_dir.endswith(".json") else os.path.join(data_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise DataError("manifest 파일이 없습니다", path)
    except json.JSONDecodeError:
        raise DataError("manifest 형식이 올바르지 않습니다", path)

    entries = []
    for item in data.get("entries", []):
        entries.append(ManifestEntry(image=item["image"], mask=item["mask"],
                                     class_name=table.canonical(item["class"]), split=item["split"]))
    return DatasetManifest(entries=entries, seed=int(data.get("seed", 0)), root=os.path.dirname(path) or ".")


# ---------------------------------------------------------------------------
# 생성
# ---------------------------------------------------------------------------

@dataclass
class GenerationJob:
    ordinal: int
    split: str
    class_name: str
    sample_id: str


def _write_png(array: np.ndarray, path: str):
    try:
        Image.fromarray(quantize(array)).save(path, format="PNG")
    except OSError as e:
        raise DataError(f"PNG 저장 실패 ({e})", path)


def render_sample(seed: int, ordinal: int, class_name: str, image_size: int,
                  weather_cfg: dict, n_objects_range: Tuple[int, int] = (1, 3),
                  table: NoiseClassTable = DEFAULT_TABLE) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(clean, degraded, mask) - 같은 ordinal이면 같은 장면"""
    scene_seed = derive_seed(seed, ordinal)
    clean, mask = render_scene(SceneSpec.random(scene_seed, image_size, n_objects_range))
    spec = WeatherSpec.from_config(table.index_of(class_name), weather_cfg)
    degraded = apply_weather(clean, spec, np.random.default_rng([scene_seed, 2]))
    return clean, degraded, mask


def generate(counts: Dict[str, Dict[str, int]], seed: int, out_dir: str,
             image_size: int = 64, weather_cfg: Optional[dict] = None,
             n_objects_range: Tuple[int, int] = (1, 3), workers: int = 4,
             table: NoiseClassTable = DEFAULT_TABLE,
             log_callback: Callable[[str], None] = _noop) -> DatasetManifest:
    """counts: {split: {class: 개수}} -> 이미지/마스크 PNG + manifest.json"""
    weather_cfg = weather_cfg or {}
    jobs: List[GenerationJob] = []
    for split, per_class in counts.items():
        for class_name, count in per_class.items():
            canonical = table.canonical(class_name)
            for k in range(int(count)):
                jobs.append(GenerationJob(ordinal=len(jobs), split=split, class_name=canonical,
                                          sample_id=f"{split}_{table.index_of(canonical)}_{k:05d}"))

    try:
        os.makedirs(out_dir, exist_ok=True)
        for split, per_class in counts.items():
            for class_name in per_class:
                os.makedirs(os.path.join(out_dir, split, table.canonical(class_name)), exist_ok=True)
    except OSError as e:
        raise DataError(f"출력 폴더를 만들 수 없습니다 ({e})", out_dir)

    log_callback(f"  합성 이미지 {len(jobs)}개 생성 (seed={seed}, {image_size}x{image_size})")

    def run(job: GenerationJob) -> ManifestEntry:
        _, degraded, mask = render_sample(seed, job.ordinal, job.class_name, image_size,
                                          weather_cfg, n_objects_range, table)
        rel_dir = os.path.join(job.split, job.class_name)
        image_rel = os.path.join(rel_dir, f"{job.sample_id}.png").replace(os.sep, "/")
        mask_rel = os.path.join(rel_dir, f"{job.sample_id}_gt.png").replace(os.sep, "/")
        _write_png(degraded, os.path.join(out_dir, image_rel))
        _write_png(mask, os.path.join(out_dir, mask_rel))
        return ManifestEntry(image=image_rel, mask=mask_rel, class_name=job.class_name, split=job.split)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        entries = list(executor.map(run, jobs))

    manifest = DatasetManifest(entries=entries, seed=seed, root=out_dir)
    manifest.save()
    for class_name, count in manifest.counts().items():
        log_callback(f"    {class_name}: {count}")
    return manifest


# ---------------------------------------------------------------------------
# 분할 필터
# ---------------------------------------------------------------------------

def subset_size(total: int, fraction: float) -> int:
    """fraction·N 반올림 (0.5는 내림): 12891 -> 6445 (50%), 3867 (30%)"""
    return int(math.ceil(fraction * total - 0.5))


def filter_split(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """비복원 균등 추출, 원래 순서 유지"""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction은 (0, 1] 범위여야 합니다: {fraction}")
    if fraction == 1.0:
        return replace(manifest, entries=list(manifest.entries))
    k = subset_size(len(manifest.entries), fraction)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(manifest.entries), size=k, replace=False))
    return replace(manifest, entries=[manifest.entries[i] for i in chosen])


# ---------------------------------------------------------------------------
# WXSOD 형식 폴더 로더
# ---------------------------------------------------------------------------

def load_wxsod_layout(root_dir: str, split_tag: str = "test_real",
                      mask_pattern: str = r"^(?P<stem>.+)_gt\.png$",
                      image_extensions: Sequence[str] = (".png", ".jpg", ".jpeg"),
                      table: NoiseClassTable = DEFAULT_TABLE,
                      log_callback: Callable[[str], None] = _noop) -> DatasetManifest:
    """root/<class>/ 아래 이미지와 마스크를 짝지어 manifest 생성"""
    if not os.path.isdir(root_dir):
        raise DataError("데이터 폴더가 없습니다", root_dir)

    compiled = re.compile(mask_pattern)
    extensions = tuple(ext.lower() for ext in image_extensions)
    entries: List[ManifestEntry] = []
    warnings = 0

    for class_dir in sorted(os.listdir(root_dir)):
        class_path = os.path.join(root_dir, class_dir)
        if not os.path.isdir(class_path):
            continue
        class_name = table.canonical(class_dir)

        masks: Dict[str, str] = {}
        images: Dict[str, str] = {}
        for name in sorted(os.listdir(class_path)):
            match = compiled.match(name)
            if match:
                masks[match.group("stem")] = name
            elif name.lower().endswith(extensions):
                images[os.path.splitext(name)[0]] = name

        for stem in sorted(set(masks) - set(images)):
            raise DataError("마스크에 대응하는 이미지가 없습니다", os.path.join(class_path, masks[stem]))
        for stem in sorted(images):
            if stem not in masks:
                raise DataError("이미지에 대응하는 마스크가 없습니다", os.path.join(class_path, images[stem]))
            mask_path = os.path.join(class_path, masks[stem])
            with Image.open(mask_path) as mask_img:
                values = np.unique(np.asarray(mask_img.convert("L")))
            if not np.all(np.isin(values, (0, 255))):
                warnings += 1
                log_callback(f"    ⚠️ 이진이 아닌 마스크 ({MASK_THRESHOLD}/255 기준 이진화): {mask_path}")
            entries.append(ManifestEntry(
                image=f"{class_dir}/{images[stem]}", mask=f"{class_dir}/{masks[stem]}",
                class_name=class_name, split=split_tag))

    log_callback(f"  WXSOD 폴더: {len(entries)}개 샘플, 경고 {warnings}건")
    return DatasetManifest(entries=entries, seed=0, root=root_dir, warnings=warnings)


# ---------------------------------------------------------------------------
# 샘플 로딩
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray   # (3, H, W) [0,1]
    mask: np.ndarray    # (1, H, W) {0,1}
    class_index: int
    class_name: str
    meta: Dict[str, str] = field(default_factory=dict)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, image_size: Optional[int] = None,
                table: NoiseClassTable = DEFAULT_TABLE) -> Sample:
    image_path, mask_path = manifest.resolve(entry.image), manifest.resolve(entry.mask)
    try:
        with Image.open(image_path) as img:
            img = img.convert("RGB")
            if image_size and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.Resampling.BILINEAR)
            image = np.asarray(img, dtype=np.float64) / 255.0
        with Image.open(mask_path) as msk:
            msk = msk.convert("L")
            if image_size and msk.size != (image_size, image_size):
                msk = msk.resize((image_size, image_size), Image.Resampling.NEAREST)
            mask = (np.asarray(msk) >= MASK_THRESHOLD).astype(np.float64)
    except FileNotFoundError as e:
        raise DataError("이미지 파일이 없습니다", e.filename)
    except OSError as e:
        raise DataError(f"이미지를 읽을 수 없습니다 ({e})", image_path)

    if image.shape[:2] != mask.shape:
        raise DataError(f"이미지 {image.shape[:2]}와 마스크 {mask.shape} 크기가 다릅니다", mask_path)
    return Sample(image=image.transpose(2, 0, 1).copy(), mask=mask[None, :, :],
                  class_index=table.index_of(entry.class_name), class_name=entry.class_name,
                  meta={"image": entry.image, "mask": entry.mask, "split": entry.split})


def load_samples(manifest: DatasetManifest, image_size: Optional[int] = None, workers: int = 4,
                 table: NoiseClassTable = DEFAULT_TABLE) -> List[Sample]:
    """manifest 순서대로 로딩 (스레드 풀)"""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(lambda e: load_sample(manifest, e, image_size, table), manifest.entries))
