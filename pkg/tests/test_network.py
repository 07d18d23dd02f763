"""Network construction, block semantics, shapes, and gradient checks."""

import numpy as np
import pytest

import wasr.tensor as T
from wasr.errors import ContractViolation
from wasr.network import (
    NetConfig,
    arm1,
    arm2,
    aspp,
    build_network,
    encoder_forward,
    ffm,
    init_arm1,
    init_arm2,
    init_aspp,
    init_ffm,
    wasr_forward,
)
from wasr.params import ParamStore

from helpers import check_grad

TINY = NetConfig(input_size=(16, 16), encoder_channels=(2, 4, 6, 8), aspp_rates=(1, 2))


def tiny_inputs(seed=0, size=(16, 16)):
    rng = np.random.default_rng(seed)
    h, w = size
    img = rng.uniform(size=(3, h, w))
    mask = (np.arange(h)[:, None] > h // 2).astype(float) * np.ones((h, w))
    return img, mask[None]


# -- config validation -----------------------------------------------------------

def test_config_rejects_bad_dims():
    with pytest.raises(ContractViolation):
        NetConfig(input_size=(20, 32))


def test_config_rejects_single_class():
    with pytest.raises(ContractViolation):
        NetConfig(class_count=1)


def test_config_rejects_duplicate_rates():
    with pytest.raises(ContractViolation):
        NetConfig(aspp_rates=(1, 2, 2))


# -- construction ------------------------------------------------------------------

def test_same_seed_builds_identical_stores():
    a = build_network(NetConfig(seed=7))
    b = build_network(NetConfig(seed=7))
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)


def test_different_seeds_differ():
    a = build_network(NetConfig(seed=0))
    b = build_network(NetConfig(seed=1))
    assert any(
        not np.array_equal(a[n].data, b[n].data)
        for n in a.names()
        if n.endswith(".weight")
    )


def test_xavier_variance_on_large_kernels():
    store = build_network(NetConfig())
    checked = 0
    for name in store.names():
        if not name.endswith(".weight"):
            continue
        w = store[name].data
        if w.ndim != 4 or w.size < 500:
            continue
        out_c, in_c, kh, kw = w.shape
        expected = 2.0 / (in_c * kh * kw + out_c * kh * kw)
        assert abs(w.var() - expected) <= 0.2 * expected, name
        checked += 1
    assert checked >= 3


def test_biases_zero_scales_one():
    store = build_network(NetConfig())
    for name in store.names():
        if name.endswith(".bias") or name.endswith(".shift"):
            assert not np.any(store[name].data)
        if name.endswith(".scale"):
            assert np.all(store[name].data == 1.0)


# -- encoder -------------------------------------------------------------------------

def test_encoder_shapes_default_config():
    cfg = NetConfig()
    params = build_network(cfg)
    img, _ = tiny_inputs(size=(96, 128))
    res2, res3, res5 = encoder_forward(img, params, cfg)
    assert res2.shape == (16, 24, 32)
    assert res3.shape == (32, 12, 16)
    assert res5.shape == (64, 12, 16)


def test_encoder_doubling_input_doubles_extents():
    params = build_network(TINY)
    img, _ = tiny_inputs(size=(32, 32))
    res2, res3, res5 = encoder_forward(img, params, TINY)
    assert res2.shape == (2, 8, 8)
    assert res3.shape == (4, 4, 4)
    assert res5.shape == (8, 4, 4)


def test_encoder_rejects_indivisible_dims():
    params = build_network(TINY)
    with pytest.raises(ContractViolation):
        encoder_forward(np.zeros((3, 20, 16)), params, TINY)


def test_encoder_gradient_matches_finite_differences():
    params = build_network(TINY)
    img, _ = tiny_inputs(seed=3)
    x = T.Tensor(img, requires_grad=True)
    check_grad(lambda t: T.tsum(encoder_forward(t, params, TINY)[2]), x, tol=1e-5)


# -- ARM1 ------------------------------------------------------------------------------

def arm1_fixture(channels=6, hw=(4, 4), seed=11):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_arm1(store, rng, "a", channels + 1)
    feats = T.Tensor(rng.normal(size=(channels, *hw)))
    imu = T.Tensor(rng.uniform(size=(1, *hw)))
    return store, feats, imu


def test_arm1_adds_mask_channel():
    store, feats, imu = arm1_fixture()
    out = arm1(feats, imu, store, "a")
    assert out.shape == (7, 4, 4)


def test_arm1_zero_attention_weights_halve_everything():
    store, feats, imu = arm1_fixture()
    store["a.att.weight"].data[...] = 0.0
    out = arm1(feats, imu, store, "a")
    cat = np.concatenate([feats.data, imu.data], axis=0)
    np.testing.assert_allclose(out.data, 0.5 * cat, atol=1e-12)


def test_arm1_output_bounded_by_input():
    store, feats, imu = arm1_fixture(seed=13)
    out = arm1(feats, imu, store, "a")
    cat = np.concatenate([feats.data, imu.data], axis=0)
    assert np.all(np.abs(out.data) <= np.abs(cat) + 1e-12)


def test_arm1_spatial_mismatch():
    store, feats, _ = arm1_fixture()
    bad = T.Tensor(np.zeros((1, 3, 4)))
    with pytest.raises(ContractViolation):
        arm1(feats, bad, store, "a")


def test_arm1_gradcheck():
    store, feats, imu = arm1_fixture(channels=3, hw=(3, 3), seed=17)
    r = T.Tensor(np.random.default_rng(1).normal(size=(4, 3, 3)))
    feats.requires_grad = True
    check_grad(lambda t: T.tsum(T.mul(arm1(t, imu, store, "a"), r)), feats)


# -- ARM2 ---------------------------------------------------------------------------------

def arm2_fixture(deep_c=8, res3_c=5, hw=(4, 4), seed=19):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_arm2(store, rng, "m", deep_c, res3_c)
    deep = T.Tensor(rng.normal(size=(deep_c, *hw)))
    skip = T.Tensor(rng.normal(size=(res3_c, *hw)))
    imu = T.Tensor(rng.uniform(size=(1, *hw)))
    return store, deep, skip, imu


def test_arm2_output_matches_res3_shape():
    store, deep, skip, imu = arm2_fixture()
    out = arm2(deep, skip, imu, store, "m")
    assert out.shape == skip.shape


def test_arm2_zero_res3_returns_projection():
    store, deep, skip, imu = arm2_fixture()
    zeros = T.Tensor(np.zeros(skip.shape))
    with_skip = arm2(deep, skip, imu, store, "m")
    without = arm2(deep, zeros, imu, store, "m")
    np.testing.assert_allclose(with_skip.data - without.data, skip.data, atol=1e-12)


def test_arm2_gradcheck():
    store, deep, skip, imu = arm2_fixture(deep_c=8, res3_c=4, hw=(3, 3), seed=23)
    deep.requires_grad = True
    r = T.Tensor(np.random.default_rng(2).normal(size=skip.shape))
    check_grad(lambda t: T.tsum(T.mul(arm2(t, skip, imu, store, "m"), r)), deep)


# -- FFM -------------------------------------------------------------------------------------

def ffm_fixture(deep_c=48, skip_c=16, hw=(4, 4), seed=29):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    out_c = init_ffm(store, rng, "f", deep_c, skip_c)
    deep = T.Tensor(rng.normal(size=(deep_c, *hw)))
    skip = T.Tensor(rng.normal(size=(skip_c, *hw)))
    imu = T.Tensor(rng.uniform(size=(1, *hw)))
    return store, out_c, deep, skip, imu


def test_ffm_halves_concat_depth():
    store, out_c, deep, skip, imu = ffm_fixture()
    assert out_c == 33  # (48 + 16 + 1 + 1) // 2
    out = ffm(deep, skip, imu, store, "f")
    assert out.shape == (33, 4, 4)


def test_ffm_output_between_x_and_2x():
    store, _, deep, skip, imu = ffm_fixture(seed=31)
    out = ffm(deep, skip, imu, store, "f").data
    # out = x * (1 + w) with x >= 0 (post-relu) and w in (0, 1)
    assert np.all(out >= -1e-12)
    # reconstruct x by running the trunk only
    from wasr.network import _bn, _conv  # internal, but the bound needs x

    x = T.relu(_bn(store, "f.bn", _conv(store, "f.conv", T.concat_channels([deep, skip, imu])))).data
    assert np.all(out >= x - 1e-12) and np.all(out <= 2 * x + 1e-12)


def test_ffm_gradcheck():
    store, _, deep, skip, imu = ffm_fixture(deep_c=5, skip_c=3, hw=(3, 3), seed=37)
    deep.requires_grad = True
    check_grad(lambda t: T.tsum(T.mul(ffm(t, skip, imu, store, "f"), 0.37)), deep)


# -- ASPP --------------------------------------------------------------------------------------

def test_aspp_shape_and_bias_only_logits():
    rng = np.random.default_rng(41)
    store = ParamStore()
    init_aspp(store, rng, "p", 6, (3,), 3)
    store["p.r3.weight"].data[...] = 0.0
    store["p.r3.bias"].data[:] = [0.5, -1.0, 2.0]
    feats = T.Tensor(rng.normal(size=(6, 5, 5)))
    out = aspp(feats, store, (3,), 3, "p")
    assert out.shape == (3, 5, 5)
    for c, b in enumerate([0.5, -1.0, 2.0]):
        np.testing.assert_allclose(out.data[c], b, atol=1e-12)


def test_aspp_identical_branches_double_single():
    rng = np.random.default_rng(43)
    store = ParamStore()
    init_aspp(store, rng, "p", 4, (1,), 3)
    feats = T.Tensor(rng.normal(size=(4, 6, 6)))
    single = aspp(feats, store, (1,), 3, "p")
    # both entries read the same rate-1 parameters: pure branch summation
    both = aspp(feats, store, (1, 1), 3, "p")
    np.testing.assert_allclose(both.data, 2.0 * single.data, atol=1e-12)


# -- full forward -----------------------------------------------------------------------------------

def test_forward_output_shapes_and_sums():
    params = build_network(TINY)
    img, mask = tiny_inputs()
    out, res5 = wasr_forward(img, mask, params, TINY)
    assert out.probs.shape == (3, 16, 16)
    assert out.internal_probs.shape == (3, 4, 4)
    assert res5.shape == (8, 2, 2)
    np.testing.assert_allclose(out.probs.data.sum(axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.internal_probs.data.sum(axis=0), 1.0, atol=1e-9)


def test_forward_probs_are_upsampled_internal():
    params = build_network(TINY)
    img, mask = tiny_inputs(seed=5)
    out, _ = wasr_forward(img, mask, params, TINY)
    up = T.upsample_bilinear(T.Tensor(out.internal_probs.data), 4)
    np.testing.assert_array_equal(out.probs.data, up.data)


def test_forward_resolution_contract_other_config():
    cfg = NetConfig(input_size=(48, 64), encoder_channels=(4, 6, 8, 10), aspp_rates=(1, 3))
    params = build_network(cfg)
    img, mask = tiny_inputs(size=(48, 64))
    out, _ = wasr_forward(img, mask, params, cfg)
    assert out.probs.shape == (3, 48, 64)
    assert out.internal_probs.shape == (3, 12, 16)


def test_forward_is_deterministic():
    params = build_network(TINY)
    img, mask = tiny_inputs(seed=9)
    a, _ = wasr_forward(img, mask, params, TINY)
    b, _ = wasr_forward(img, mask, params, TINY)
    assert np.array_equal(a.probs.data, b.probs.data)


def test_imu_mask_changes_output():
    params = build_network(TINY)
    img, mask = tiny_inputs(seed=13)
    base, _ = wasr_forward(img, mask, params, TINY)
    moved, _ = wasr_forward(img, np.roll(mask, 4, axis=1), params, TINY)
    assert np.abs(base.probs.data - moved.probs.data).max() > 0.0


def test_no_imu_ignores_mask():
    cfg = NetConfig(
        input_size=(16, 16), encoder_channels=(2, 4, 6, 8), aspp_rates=(1, 2), use_imu=False
    )
    params = build_network(cfg)
    img, mask = tiny_inputs(seed=15)
    without, _ = wasr_forward(img, None, params, cfg)
    with_mask, _ = wasr_forward(img, mask, params, cfg)
    assert np.array_equal(without.probs.data, with_mask.probs.data)


def test_use_imu_requires_mask():
    params = build_network(TINY)
    img, _ = tiny_inputs()
    with pytest.raises(ContractViolation):
        wasr_forward(img, None, params, TINY)


def test_full_forward_gradcheck():
    params = build_network(TINY)
    img, mask = tiny_inputs(seed=21)
    x = T.Tensor(img, requires_grad=True)
    r = T.Tensor(np.random.default_rng(4).normal(size=(3, 16, 16)))

    def loss(t):
        out, _ = wasr_forward(t, mask, params, TINY)
        return T.tsum(T.mul(out.probs, r))

    check_grad(loss, x, tol=1e-4)
