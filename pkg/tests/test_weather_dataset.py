# -*- coding: utf-8 -*-
import json

import numpy as np
import pytest
from PIL import Image

import weather_dataset as wd
from nifm_module import NOISE_CLASSES
from sod_config import default_config
from sod_errors import ClassNameError, DataError, DomainError

WEATHER = default_config()["weather"]
SMALL_COUNTS = {
    "train": {"Clean": 1, "Rain": 2, "Fog": 1, "Rain&Fog": 1},
    "test": {"Dark": 1, "Snow": 2},
}


def _write_png(path, array):
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# 시드 / 양자화
# ---------------------------------------------------------------------------

def test_splitmix64_reference_value():
    assert wd.splitmix64(0) == 0xE220A8397B1DCDAF


def test_derive_seed_is_distinct_per_ordinal():
    seeds = {wd.derive_seed(7, k) for k in range(100)}
    assert len(seeds) == 100
    assert wd.derive_seed(7, 3) == wd.derive_seed(7, 3)
    assert wd.derive_seed(7, 3) != wd.derive_seed(8, 3)


def test_quantize_rounds_half_up_and_clips():
    out = wd.quantize(np.array([0.0, 1.0, 0.5, 2.0, -1.0]))
    assert out.dtype == np.uint8
    assert out.tolist() == [0, 255, 128, 255, 0]


# ---------------------------------------------------------------------------
# 장면 / 날씨
# ---------------------------------------------------------------------------

def test_scene_mask_is_binary_and_deterministic():
    spec = wd.SceneSpec.random(123, image_size=32, n_objects_range=(1, 3))
    assert 1 <= spec.n_objects <= 3
    image, mask = wd.render_scene(spec)
    assert image.shape == (32, 32, 3)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert mask.sum() > 0
    assert np.all((image >= 0) & (image <= 1))
    image2, mask2 = wd.render_scene(spec)
    np.testing.assert_array_equal(image, image2)
    np.testing.assert_array_equal(mask, mask2)


def test_clean_is_identity():
    image, _ = wd.render_scene(wd.SceneSpec.random(5, 32))
    out = wd.apply_weather(image, wd.WeatherSpec.from_config(0, WEATHER), np.random.default_rng(0))
    np.testing.assert_array_equal(out, image)


def test_dark_gain_example():
    image = np.full((4, 4, 3), 0.5)
    out = wd.apply_weather(image, wd.WeatherSpec.from_config(NOISE_CLASSES.index("Dark"), WEATHER),
                           np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.2, atol=1e-15)


def test_light_clips_to_one():
    out = wd.apply_weather(np.full((4, 4, 3), 0.9),
                           wd.WeatherSpec.from_config(NOISE_CLASSES.index("Light"), WEATHER),
                           np.random.default_rng(0))
    assert np.all(out == 1.0)


@pytest.mark.parametrize("class_name", NOISE_CLASSES)
def test_weather_keeps_range_and_mask(class_name):
    clean, degraded, mask = wd.render_sample(3, 0, class_name, 32, WEATHER)
    _, _, clean_mask = wd.render_sample(3, 0, "Clean", 32, WEATHER)
    assert np.all((degraded >= 0) & (degraded <= 1))
    np.testing.assert_array_equal(mask, clean_mask)
    if class_name == "Clean":
        assert np.array_equal(wd.quantize(clean), wd.quantize(degraded))
    else:
        assert not np.array_equal(clean, degraded)


def test_compound_differs_from_constituents():
    _, rain_fog, _ = wd.render_sample(9, 4, "Rain&Fog", 32, WEATHER)
    _, rain, _ = wd.render_sample(9, 4, "Rain", 32, WEATHER)
    _, fog, _ = wd.render_sample(9, 4, "Fog", 32, WEATHER)
    assert not np.allclose(rain_fog, rain)
    assert not np.allclose(rain_fog, fog)


def test_weather_components():
    assert wd.WeatherSpec(class_index=6).components == ("rain", "snow")
    assert wd.WeatherSpec(class_index=0).components == ()


# ---------------------------------------------------------------------------
# 생성 / manifest
# ---------------------------------------------------------------------------

def test_generate_layout_and_counts(tmp_path):
    messages = []
    manifest = wd.generate(SMALL_COUNTS, seed=1, out_dir=str(tmp_path), image_size=32,
                           weather_cfg=WEATHER, workers=2, log_callback=messages.append)
    assert len(manifest) == 8
    assert manifest.counts() == {"Clean": 1, "Rain": 2, "Fog": 1, "Rain&Fog": 1, "Dark": 1, "Snow": 2}
    assert manifest.splits() == ["test", "train"]
    assert len(manifest.select("train")) == 5
    assert messages

    first = manifest.entries[0]
    assert first.image == "train/Clean/train_0_00000.png"
    assert first.mask == "train/Clean/train_0_00000_gt.png"
    for entry in manifest.entries:
        assert (tmp_path / entry.image).is_file()
        with Image.open(tmp_path / entry.mask) as mask:
            assert mask.mode == "L"
            assert set(np.unique(np.asarray(mask))) <= {0, 255}
        with Image.open(tmp_path / entry.image) as image:
            assert image.mode == "RGB" and image.size == (32, 32)

    data = json.loads((tmp_path / wd.MANIFEST_NAME).read_text(encoding="utf-8"))
    assert data["seed"] == 1
    assert data["entries"][0] == {"image": first.image, "mask": first.mask, "class": "Clean", "split": "train"}


def test_generate_is_bytewise_deterministic(tmp_path):
    a = wd.generate(SMALL_COUNTS, seed=4, out_dir=str(tmp_path / "a"), image_size=32, weather_cfg=WEATHER, workers=1)
    wd.generate(SMALL_COUNTS, seed=4, out_dir=str(tmp_path / "b"), image_size=32, weather_cfg=WEATHER, workers=3)
    for entry in a.entries:
        for rel in (entry.image, entry.mask):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert (tmp_path / "a" / wd.MANIFEST_NAME).read_bytes() == (tmp_path / "b" / wd.MANIFEST_NAME).read_bytes()


def test_generate_rejects_unknown_class(tmp_path):
    with pytest.raises(ClassNameError):
        wd.generate({"train": {"Hail": 1}}, seed=0, out_dir=str(tmp_path))


def test_load_manifest_round_trip(tmp_path):
    manifest = wd.generate(SMALL_COUNTS, seed=2, out_dir=str(tmp_path), image_size=32, weather_cfg=WEATHER)
    loaded = wd.load_manifest(str(tmp_path))
    assert loaded.entries == manifest.entries
    assert loaded.seed == 2
    with pytest.raises(DataError):
        wd.load_manifest(str(tmp_path / "missing"))


def test_load_samples(tmp_path):
    manifest = wd.generate(SMALL_COUNTS, seed=2, out_dir=str(tmp_path), image_size=32, weather_cfg=WEATHER)
    samples = wd.load_samples(manifest.select("test"), workers=2)
    assert [s.class_name for s in samples] == ["Dark", "Snow", "Snow"]
    assert samples[0].class_index == 5
    assert samples[0].image.shape == (3, 32, 32)
    assert samples[0].mask.shape == (1, 32, 32)
    assert set(np.unique(samples[0].mask)) <= {0.0, 1.0}

    clean, degraded, mask = wd.render_sample(2, 5, "Dark", 32, WEATHER)
    np.testing.assert_array_equal(samples[0].image, wd.quantize(degraded).transpose(2, 0, 1) / 255.0)
    np.testing.assert_array_equal(samples[0].mask[0], mask)

    resized = wd.load_sample(manifest, manifest.entries[0], image_size=64)
    assert resized.image.shape == (3, 64, 64)


# ---------------------------------------------------------------------------
# 분할 필터
# ---------------------------------------------------------------------------

def test_subset_size_rounds_half_down():
    assert wd.subset_size(12891, 0.5) == 6445
    assert wd.subset_size(12891, 0.3) == 3867
    assert wd.subset_size(12891, 1.0) == 12891


def _fake_manifest(n):
    entries = [wd.ManifestEntry(f"i{k}.png", f"i{k}_gt.png", NOISE_CLASSES[k % 9], "train") for k in range(n)]
    return wd.DatasetManifest(entries=entries, seed=0)


def test_filter_split():
    manifest = _fake_manifest(12891)
    assert wd.filter_split(manifest, 1.0, seed=0).entries == manifest.entries
    half = wd.filter_split(manifest, 0.5, seed=3)
    assert len(half) == 6445
    assert len(set(half.entries)) == 6445
    assert len(wd.filter_split(manifest, 0.3, seed=3)) == 3867
    assert wd.filter_split(manifest, 0.5, seed=3).entries == half.entries
    assert wd.filter_split(manifest, 0.5, seed=4).entries != half.entries
    positions = [int(e.image[1:-4]) for e in half.entries]
    assert positions == sorted(positions)
    assert all(e.class_name == NOISE_CLASSES[p % 9] for e, p in zip(half.entries, positions))


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_filter_split_rejects_bad_fraction(fraction):
    with pytest.raises(DomainError):
        wd.filter_split(_fake_manifest(10), fraction, seed=0)


# ---------------------------------------------------------------------------
# WXSOD 폴더
# ---------------------------------------------------------------------------

def test_wxsod_empty_root(tmp_path):
    manifest = wd.load_wxsod_layout(str(tmp_path))
    assert len(manifest) == 0
    assert manifest.warnings == 0


def test_wxsod_single_rain_pair(tmp_path):
    rain = tmp_path / "rain"
    rain.mkdir()
    _write_png(rain / "0001.png", np.zeros((8, 8, 3)))
    _write_png(rain / "0001_gt.png", np.full((8, 8), 255))
    manifest = wd.load_wxsod_layout(str(tmp_path))
    assert len(manifest) == 1
    entry = manifest.entries[0]
    assert entry.class_name == "Rain" and entry.split == "test_real"
    sample = wd.load_sample(manifest, entry)
    assert sample.class_index == 1
    assert np.all(sample.mask == 1.0)


def test_wxsod_nonbinary_mask_warns_and_binarizes(tmp_path):
    fog = tmp_path / "Fog"
    fog.mkdir()
    _write_png(fog / "a.png", np.zeros((4, 4, 3)))
    mask = np.zeros((4, 4))
    mask[:, :2] = 200
    mask[:, 2] = 100
    _write_png(fog / "a_gt.png", mask)
    messages = []
    manifest = wd.load_wxsod_layout(str(tmp_path), log_callback=messages.append)
    assert manifest.warnings == 1
    assert any("⚠️" in m for m in messages)
    sample = wd.load_sample(manifest, manifest.entries[0])
    np.testing.assert_array_equal(sample.mask[0, 0], [1.0, 1.0, 0.0, 0.0])


def test_wxsod_errors(tmp_path):
    with pytest.raises(DataError):
        wd.load_wxsod_layout(str(tmp_path / "missing"))

    bad = tmp_path / "bad"
    (bad / "Hail").mkdir(parents=True)
    with pytest.raises(ClassNameError):
        wd.load_wxsod_layout(str(bad))

    orphan = tmp_path / "orphan"
    (orphan / "Snow").mkdir(parents=True)
    _write_png(orphan / "Snow" / "x.png", np.zeros((4, 4, 3)))
    with pytest.raises(DataError) as info:
        wd.load_wxsod_layout(str(orphan))
    assert info.value.path.endswith("x.png")

    lonely = tmp_path / "lonely"
    (lonely / "Snow").mkdir(parents=True)
    _write_png(lonely / "Snow" / "y_gt.png", np.zeros((4, 4)))
    with pytest.raises(DataError):
        wd.load_wxsod_layout(str(lonely))
