# -*- coding: utf-8 -*-
import numpy as np
import pytest

import nifm_module as nm
from sod_errors import ClassNameError, DimensionError
from tensor_autodiff import Tensor, channel_scale, sum_all
from tests.oracles import analytic_grads, assert_grads_match, scalar_nifm_weights


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def test_class_table_order_and_aliases():
    assert nm.DEFAULT_TABLE.index_of("Rain") == 1
    assert nm.DEFAULT_TABLE.index_of("Snow") == 2
    assert nm.DEFAULT_TABLE.index_of("rain_snow") == 6
    assert nm.DEFAULT_TABLE.canonical("SNOW&fog") == "Snow&Fog"
    assert nm.DEFAULT_TABLE.name_of(0) == "Clean"
    assert len(nm.DEFAULT_TABLE) == 9


def test_unknown_class_lists_valid_names():
    with pytest.raises(ClassNameError) as info:
        nm.make_indicator("Hail")
    assert "Hail" in info.value.message
    assert list(info.value.valid_names) == list(nm.NOISE_CLASSES)
    with pytest.raises(ClassNameError):
        nm.indicator_from_index(9)


@pytest.mark.parametrize("name", nm.NOISE_CLASSES)
def test_indicator_is_one_hot(name):
    ind = nm.make_indicator(name)
    assert ind.length == 9
    assert sum(ind.vector) == 1.0
    assert ind.vector[ind.class_index] == 1.0
    assert nm.NOISE_CLASSES[ind.class_index] == name


def test_indicator_batch_broadcast_and_count():
    batch = nm.indicator_batch(nm.make_indicator("Fog"), 3)
    assert batch.shape == (3, 9)
    assert np.all(batch.data[:, 3] == 1.0)
    with pytest.raises(DimensionError):
        nm.indicator_batch([nm.make_indicator("Fog")], 2)


def test_variant_parse():
    assert nm.NifmVariant.parse("hybrid") is nm.NifmVariant.HYBRID
    assert nm.NifmVariant.parse(nm.NifmVariant.PROMPT) is nm.NifmVariant.PROMPT
    with pytest.raises(ClassNameError):
        nm.NifmVariant.parse("Attention")


def test_hidden_dim_floor():
    assert nm.hidden_dim_for(16) == 9
    assert nm.hidden_dim_for(64) == 16
    assert nm.hidden_dim_for(512) == 128


def test_block_param_count():
    block = nm.NifmBlock(32, 9, nm.hidden_dim_for(32), rng=np.random.default_rng(0))
    hidden = 9
    assert block.param_count() == hidden * (32 + 9) + hidden + 32 * hidden + 32
    assert block.fc_param_count() == block.param_count()


def test_weights_match_scalar_loop(rng):
    block = nm.NifmBlock(6, 9, 9, rng=rng)
    features = rng.normal(size=(2, 6, 4, 4))
    cond = nm.indicator_batch([nm.make_indicator("Rain"), nm.make_indicator("Dark")], 2)
    weights = nm.nifm_weights(block, Tensor(features), cond)
    expected = scalar_nifm_weights(features, cond.data, block.fc1_weight.data, block.fc1_bias.data,
                                   block.fc2_weight.data, block.fc2_bias.data)
    np.testing.assert_allclose(weights.data, expected, rtol=1e-12)
    assert np.all((weights.data > 0) & (weights.data < 1))


def test_forward_scales_channels(rng):
    block = nm.NifmBlock(4, 9, 9, rng=rng)
    features = Tensor(rng.normal(size=(1, 4, 3, 3)))
    modulated, weights = nm.nifm_forward(block, features, nm.indicator_batch(nm.make_indicator("Snow"), 1))
    np.testing.assert_allclose(modulated.data, features.data * weights.data[:, :, None, None])


def test_different_indicators_give_different_weights(rng):
    block = nm.NifmBlock(8, 9, 9, rng=rng)
    features = Tensor(rng.normal(size=(1, 8, 4, 4)))
    w_rain = nm.nifm_weights(block, features, nm.indicator_batch(nm.make_indicator("Rain"), 1))
    w_fog = nm.nifm_weights(block, features, nm.indicator_batch(nm.make_indicator("Fog"), 1))
    assert not np.allclose(w_rain.data, w_fog.data)


def test_shape_errors(rng):
    block = nm.NifmBlock(4, 9, 9, rng=rng)
    cond = nm.indicator_batch(nm.make_indicator("Rain"), 1)
    with pytest.raises(DimensionError) as info:
        nm.nifm_weights(block, Tensor(rng.normal(size=(1, 5, 2, 2))), cond)
    assert info.value.axis == "C"
    with pytest.raises(DimensionError) as info:
        nm.nifm_weights(block, Tensor(rng.normal(size=(1, 4, 2, 2))), Tensor(np.ones((1, 8))))
    assert info.value.axis == "L"
    with pytest.raises(DimensionError) as info:
        nm.nifm_weights(block, Tensor(rng.normal(size=(2, 4, 2, 2))), cond)
    assert info.value.axis == "N"


def test_gradients_through_block(rng):
    block = nm.NifmBlock(3, 9, 9, rng=rng)
    features = Tensor(rng.normal(size=(2, 3, 2, 2)))
    cond = nm.indicator_batch([nm.make_indicator("Light"), nm.make_indicator("Rain&Fog")], 2)
    target = rng.normal(size=(2, 3, 2, 2))

    def fn():
        modulated, _ = nm.nifm_forward(block, features, cond)
        return sum_all(modulated * Tensor(target))

    params = list(block.parameters().values())
    assert_grads_match(fn, params)


# ---------------------------------------------------------------------------
# 조건 벡터 (변형별)
# ---------------------------------------------------------------------------

def test_conditioning_default_uses_indicator():
    ind = nm.indicator_batch(nm.make_indicator("Rain"), 2)
    for stage in range(1, 5):
        assert nm.conditioning_for_stage("Default", stage, ind) is ind


def test_conditioning_recursive_and_hybrid(rng):
    ind = nm.indicator_batch(nm.make_indicator("Rain"), 2)
    prev = Tensor(rng.uniform(size=(2, 16)))
    assert nm.conditioning_for_stage("Recursive", 1, ind) is ind
    assert nm.conditioning_for_stage("Recursive", 3, ind, prev) is prev
    hybrid = nm.conditioning_for_stage("Hybrid", 2, ind, prev)
    assert hybrid.shape == (2, 25)
    np.testing.assert_allclose(hybrid.data[:, :9], ind.data)
    np.testing.assert_allclose(hybrid.data[:, 9:], prev.data)
    with pytest.raises(DimensionError):
        nm.conditioning_for_stage("Hybrid", 2, ind)


def test_conditioning_prompt_ignores_indicator():
    block = nm.make_prompt_block(8, seed=5)
    a = nm.conditioning_for_stage("Prompt", 1, nm.indicator_batch(nm.make_indicator("Rain"), 3), block=block)
    b = nm.conditioning_for_stage("Prompt", 1, nm.indicator_batch(nm.make_indicator("Dark"), 3), block=block)
    assert a.shape == (3, 9)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data[0], block.prompt.data[0])


def test_conditioning_rejects_disabled_and_bad_stage():
    ind = nm.indicator_batch(nm.make_indicator("Rain"), 1)
    with pytest.raises(ClassNameError):
        nm.conditioning_for_stage("Disabled", 1, ind)
    with pytest.raises(DimensionError):
        nm.conditioning_for_stage("Default", 5, ind)


def test_prompt_block_init():
    block = nm.make_prompt_block(16, seed=1)
    assert block.prompt.shape == (1, 9)
    assert np.abs(block.prompt.data).max() < 0.2
    assert block.param_count() == block.fc_param_count() + 9


def test_build_blocks_condition_lengths(rng):
    channels = [8, 16, 32, 64, 128]
    assert nm.build_nifm_blocks("Disabled", channels, rng) == []
    default = nm.build_nifm_blocks("Default", channels, rng)
    assert [b.indicator_len for b in default] == [9, 9, 9, 9]
    assert [b.channels_in for b in default] == [8, 16, 32, 64]
    recursive = nm.build_nifm_blocks("Recursive", channels, rng)
    assert [b.indicator_len for b in recursive] == [9, 8, 16, 32]
    hybrid = nm.build_nifm_blocks("Hybrid", channels, rng)
    assert [b.indicator_len for b in hybrid] == [9, 17, 25, 41]
    prompt = nm.build_nifm_blocks("Prompt", channels, rng)
    assert all(b.prompt is not None for b in prompt)
    assert [b.name for b in prompt] == ["nifm1", "nifm2", "nifm3", "nifm4"]


# ---------------------------------------------------------------------------
# 인디케이터 민감도 / gradient 경로
# ---------------------------------------------------------------------------

def test_indicator_changes_weights_across_init_seeds():
    rain = nm.indicator_batch(nm.make_indicator("Rain"), 1)
    fog = nm.indicator_batch(nm.make_indicator("Fog"), 1)
    differing = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        block = nm.NifmBlock(8, 9, nm.hidden_dim_for(8), rng=rng)
        features = Tensor(rng.normal(size=(1, 8, 4, 4)))
        w_rain = nm.nifm_weights(block, features, rain)
        w_fog = nm.nifm_weights(block, features, fog)
        differing += not np.array_equal(w_rain.data, w_fog.data)
    assert differing >= 99


def test_fc1_gradient_reaches_indicator_column(rng):
    block = nm.NifmBlock(6, 9, 9, rng=rng)
    features = Tensor(rng.normal(size=(1, 6, 4, 4)))
    cond = nm.indicator_batch(nm.make_indicator("Snow"), 1)
    target = Tensor(rng.normal(size=(1, 6, 4, 4)))

    def fn():
        modulated, _ = nm.nifm_forward(block, features, cond)
        return sum_all(modulated * target)

    grad = analytic_grads(fn, [block.fc1_weight])[0]
    snow = 6 + nm.DEFAULT_TABLE.index_of("Snow")
    assert np.any(grad[:, snow] != 0)
    others = [6 + k for k in range(9) if 6 + k != snow]
    assert np.all(grad[:, others] == 0)


def test_prompt_block_seed_and_gradient(rng):
    a = nm.make_prompt_block(8, seed=3)
    b = nm.make_prompt_block(8, seed=3)
    c = nm.make_prompt_block(8, seed=4)
    for key, tensor in a.parameters().items():
        np.testing.assert_array_equal(tensor.data, b.parameters()[key].data)
    assert not np.array_equal(a.prompt.data, c.prompt.data)

    features = Tensor(rng.normal(size=(2, 8, 4, 4)))
    ind = nm.indicator_batch(nm.make_indicator("Rain"), 2)
    target = Tensor(rng.normal(size=(2, 8, 4, 4)))

    def fn():
        cond = nm.conditioning_for_stage("Prompt", 1, ind, block=a)
        modulated, _ = nm.nifm_forward(a, features, cond)
        return sum_all(modulated * target)

    grad = analytic_grads(fn, [a.prompt])[0]
    assert np.any(grad != 0)
    assert_grads_match(fn, [a.prompt])


def test_channel_scale_identity_and_zero(rng):
    features = Tensor(rng.normal(size=(2, 5, 3, 3)))
    np.testing.assert_array_equal(channel_scale(features, Tensor(np.ones((2, 5)))).data, features.data)
    np.testing.assert_array_equal(channel_scale(features, Tensor(np.zeros((2, 5)))).data, np.zeros((2, 5, 3, 3)))
