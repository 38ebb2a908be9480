# -*- coding: utf-8 -*-
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import sod_training as st
from report_writer import COMPARISON_COLUMNS, HAS_OPENPYXL
from sod_errors import DataError, DomainError, MissingGradientError
from sod_metrics import METRIC_COLUMNS
from sod_model import DecoderSpec, EncoderSpec, ModelSpec, SodModel, load_checkpoint
from tensor_autodiff import parameter
from tests.oracles import scalar_adam
from weather_dataset import generate


def small_train_config(variant="Default", decoder="PlainTopDown", **kwargs):
    spec = ModelSpec(encoder=EncoderSpec(stage_channels=[4, 4, 4, 4, 4], nifm_variant=variant),
                     decoder=DecoderSpec(kind=decoder, channels=4), seed=kwargs.get("seed", 0))
    defaults = dict(epochs=1, batch_size=2, image_size=32, model_spec=spec)
    defaults.update(kwargs)
    return st.TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# 옵티마이저
# ---------------------------------------------------------------------------

def test_lr_schedule():
    assert st.lr_at_epoch(0) == 0.001
    assert st.lr_at_epoch(39) == 0.001
    assert st.lr_at_epoch(40) == pytest.approx(0.0002, rel=1e-12)
    assert st.lr_at_epoch(80) == pytest.approx(0.00004, rel=1e-12)
    for e in range(0, 130, 7):
        assert st.lr_at_epoch(e) == 0.001 * 0.2 ** (e // 40)


def test_adam_first_step_example():
    params = {"w": parameter(np.zeros(1), "w")}
    state = st.OptimState.for_params(params)
    st.adam_step(params, state, 0.001, {"w": np.ones(1)})
    assert params["w"].data[0] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-18)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params():
    start = np.random.default_rng(0).normal(size=(3, 2))
    params = {"w": parameter(start.copy(), "w")}
    state = st.OptimState.for_params(params)
    for _ in range(3):
        st.adam_step(params, state, 0.01, {"w": np.zeros((3, 2))})
    np.testing.assert_array_equal(params["w"].data, start)


@pytest.mark.parametrize("seed", range(5))
def test_adam_matches_scalar_trajectory(seed):
    rng = np.random.default_rng(seed)
    grads = rng.normal(size=100)
    start = float(rng.normal())
    params = {"p": parameter(np.array([start]), "p")}
    state = st.OptimState.for_params(params)
    expected = scalar_adam(start, grads)
    for t, g in enumerate(grads):
        st.adam_step(params, state, 0.001, {"p": np.array([g])})
        assert params["p"].data[0] == pytest.approx(expected[t], abs=1e-12)
    assert state.step == 100


def test_adam_missing_gradient_names_param():
    params = {"a": parameter(np.zeros(2), "a"), "b": parameter(np.zeros(2), "b")}
    params["a"].grad = np.ones(2)
    state = st.OptimState.for_params(params)
    with pytest.raises(MissingGradientError) as info:
        st.adam_step(params, state, 0.001)
    assert info.value.param_name == "b"
    assert state.step == 0


def test_epoch_batches_cover_each_sample_once():
    rng = np.random.default_rng(3)
    for _ in range(3):
        batches = st.epoch_batches(7, 3, rng)
        assert [len(b) for b in batches] == [3, 3, 1]
        assert sorted(np.concatenate(batches).tolist()) == list(range(7))


# ---------------------------------------------------------------------------
# 학습
# ---------------------------------------------------------------------------

def test_one_epoch_one_step(tiny_samples):
    cfg = small_train_config(batch_size=4)
    result = st.train_on_samples(cfg, tiny_samples[:4])
    assert result.steps == 1
    assert len(result.loss_log) == 1
    assert result.loss_log[0]["epoch"] == 1
    assert result.loss_log[0]["lr"] == 0.001
    assert np.isfinite(result.loss_log[0]["mean_loss"])


def test_training_changes_parameters(tiny_samples):
    cfg = small_train_config("Hybrid", "DeepSupervised", epochs=2)
    initial = SodModel(cfg.model_spec)
    result = st.train_on_samples(cfg, tiny_samples)
    assert result.steps == 2 * 3
    changed = [name for name, tensor in initial.parameters().items()
               if not np.array_equal(result.model.params[name].data, tensor.data)]
    assert len(changed) > len(initial.parameters()) // 2
    assert any(name.startswith("nifm") or ".nifm" in name for name in changed)


def test_training_is_deterministic(tmp_path, tiny_samples):
    cfg = small_train_config(epochs=2, checkpoint_every=1)
    a = st.train_on_samples(cfg, tiny_samples, str(tmp_path / "a" / "model"))
    b = st.train_on_samples(cfg, tiny_samples, str(tmp_path / "b" / "model"))
    assert a.loss_log == b.loss_log
    for suffix in (".json", ".bin"):
        assert (tmp_path / "a" / f"model{suffix}").read_bytes() == (tmp_path / "b" / f"model{suffix}").read_bytes()
    assert (tmp_path / "a" / "model_epoch001.json").is_file()
    assert not (tmp_path / "a" / "model_epoch002.json").exists()

    loaded, extra = load_checkpoint(a.checkpoint_path)
    assert extra["epoch"] == 2
    assert len(extra["loss_log"]) == 2


def test_train_rejects_empty(tiny_samples):
    with pytest.raises(DataError):
        st.train_on_samples(small_train_config(), [])


def test_train_config_from_config(tiny_config):
    cfg = st.TrainConfig.from_config(tiny_config)
    assert cfg.epochs == 2 and cfg.batch_size == 2 and cfg.image_size == 32
    assert cfg.model_spec.encoder.stage_channels == [4, 4, 4, 4, 4]
    assert cfg.lr_for(40) == pytest.approx(0.0002)
    assert cfg.summary()["train_fraction"] == 1.0
    with pytest.raises(DomainError):
        replace(cfg, epochs=0)


def test_train_from_manifest_with_fraction(tmp_path, tiny_config):
    ds = tiny_config["dataset"]
    manifest = generate({"train": ds["train_counts"], "test": ds["test_counts"]}, 0, str(tmp_path / "data"),
                        image_size=32, weather_cfg=tiny_config["weather"], workers=1)
    cfg = replace(st.TrainConfig.from_config(tiny_config), train_fraction=0.5)
    assert len(st.training_manifest(cfg, manifest)) == 2
    result = st.train(cfg, manifest, workers=1)
    assert result.steps == cfg.epochs * 1

    with pytest.raises(DataError):
        st.train(replace(cfg, train_split="validation"), manifest, workers=1)


# ---------------------------------------------------------------------------
# 평가 / 특징
# ---------------------------------------------------------------------------

def test_indicator_classes(tiny_samples):
    labels = [s.class_index for s in tiny_samples]
    assert st.indicator_classes(tiny_samples, "correct") == labels
    assert st.indicator_classes(tiny_samples, "fixed", "Dark") == [5] * len(labels)
    shuffled = st.indicator_classes(tiny_samples, "shuffled", seed=2)
    assert sorted(shuffled) == sorted(labels)
    assert shuffled == st.indicator_classes(tiny_samples, "shuffled", seed=2)
    with pytest.raises(DomainError):
        st.indicator_classes(tiny_samples, "random")


def test_fixed_indicator_default_is_clean_for_every_sample(tiny_samples, tiny_config):
    assert tiny_config["evaluation"]["fixed_class"] == "Clean"
    clean = replace(tiny_samples[0], class_index=0, class_name="Clean")
    samples = [clean, *tiny_samples]
    assert st.indicator_classes(samples, "fixed") == [0] * len(samples)
    # Clean 샘플만 정답과 같음
    fixed = st.indicator_classes(samples, "fixed", tiny_config["evaluation"]["fixed_class"])
    labels = st.indicator_classes(samples, "correct")
    assert [a == b for a, b in zip(fixed, labels)] == [True] + [False] * len(tiny_samples)


def test_evaluate_reports(tiny_samples):
    model = SodModel(small_train_config().model_spec)
    messages = []
    result = st.evaluate(model, tiny_samples, workers=2, log_callback=messages.append)
    assert len(result.reports) == len(tiny_samples)
    assert result.names == [f"s{k}.png" for k in range(len(tiny_samples))]
    assert set(result.by_class) == {"Rain", "Snow", "Fog", "Dark"}
    assert 0.0 <= result.aggregate.mae <= 1.0
    with pytest.raises(DataError):
        st.evaluate(model, [])


def test_disabled_model_ignores_indicator_policy(tiny_samples):
    model = SodModel(small_train_config("Disabled").model_spec)
    correct = st.evaluate(model, tiny_samples, "correct", workers=1)
    fixed = st.evaluate(model, tiny_samples, "fixed", fixed_class="Snow", workers=1)
    shuffled = st.evaluate(model, tiny_samples, "shuffled", shuffle_seed=1, workers=1)
    for other in (fixed, shuffled):
        for a, b in zip(correct.reports, other.reports):
            assert a.scalars() == b.scalars()


def test_nifm_model_reacts_to_indicator_policy(tiny_samples):
    model = SodModel(small_train_config("Default").model_spec)
    classes = st.indicator_classes(tiny_samples, "correct")
    maps_correct, _ = st.predict(model, tiny_samples, classes)
    maps_fixed, _ = st.predict(model, tiny_samples, [0] * len(classes))
    assert any(not np.array_equal(a, b) for a, b in zip(maps_correct, maps_fixed))


def test_export_features(tiny_samples):
    model = SodModel(small_train_config().model_spec)
    features, labels, score = st.export_features(model, tiny_samples, stage=4, batch_size=4)
    assert features.shape == (len(tiny_samples), 4)
    assert labels == [s.class_index for s in tiny_samples]
    assert -1.0 <= score <= 1.0
    with pytest.raises(DomainError):
        st.export_features(model, tiny_samples, stage=6)


# ---------------------------------------------------------------------------
# 실험
# ---------------------------------------------------------------------------

def test_delta_pct():
    assert st.delta_pct("mae", 0.0339, 0.0315) == pytest.approx(7.0796, abs=1e-4)
    assert st.delta_pct("f_max", 0.8, 0.84) == pytest.approx(5.0)
    assert st.delta_pct("s_measure", 0.7, 0.7) == 0.0
    assert st.delta_pct("mae", 0.0, 0.1) == 0.0


def test_run_experiment_outputs(tmp_path, tiny_config):
    ds = tiny_config["dataset"]
    manifest = generate({"train": ds["train_counts"], "test": ds["test_counts"]}, 0, str(tmp_path / "data"),
                        image_size=32, weather_cfg=tiny_config["weather"], workers=1)
    out_dir = tmp_path / "results"
    messages = []
    result = st.run_experiment(tiny_config, manifest, [0], str(out_dir), messages.append)

    assert list(result.comparison.columns) == COMPARISON_COLUMNS
    assert len(result.comparison) == len(METRIC_COLUMNS)
    assert result.comparison["metric"].tolist() == list(METRIC_COLUMNS)
    assert set(result.comparison["nifm_variant"]) == {"Default"}
    assert len(result.separation) == 1

    for name in ("comparison.csv", "separation.csv", "pr_curve_PlainTopDown_Disabled_f1.csv",
                 "pr_curve_PlainTopDown_Default_f1.csv"):
        assert (out_dir / name).is_file(), name
    assert (out_dir / "checkpoints" / "PlainTopDown_Default_f1_s0.json").is_file()
    assert (out_dir / "checkpoints" / "PlainTopDown_Disabled_f1_s0.bin").is_file()
    assert (out_dir / "comparison.xlsx").is_file() == HAS_OPENPYXL

    curve = pd.read_csv(out_dir / "pr_curve_PlainTopDown_Default_f1.csv")
    assert list(curve.columns) == ["threshold", "precision", "recall", "f_measure"]
    assert len(curve) == 256
    assert b"\r\n" not in (out_dir / "comparison.csv").read_bytes()

    row = result.comparison.iloc[0]
    assert row["delta_pct"] == pytest.approx(st.delta_pct("mae", row["baseline"], row["variant"]))


def test_run_experiment_rejects_disabled_variant(tiny_config, tmp_path):
    config = {**tiny_config, "experiment": {**tiny_config["experiment"], "variants": ["Disabled"]}}
    with pytest.raises(DomainError):
        st.run_experiment(config, None, [0], str(tmp_path))
