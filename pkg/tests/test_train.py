import numpy as np
import pytest

import wasr.train as train_mod
from wasr.errors import ContractViolation, DataError, NumericFailure
from wasr.losses import LossWeights
from wasr.network import NetConfig, build_network
from wasr.params import ParamStore
from wasr.synth import SceneParams, default_camera, make_dataset
from wasr.tensor import Tensor
from wasr.train import (
    OptimState,
    load_checkpoint,
    make_optim_state,
    poly_lr,
    rmsprop_step,
    save_checkpoint,
    train,
)

TOY_PARAMS = SceneParams(
    image_size=(48, 64), obstacle_size_range=(8, 14), seed=21
)
TOY_CFG = NetConfig(input_size=(48, 64), encoder_channels=(4, 4, 4, 4), seed=5)


def toy_store():
    store = ParamStore()
    store.add("a.weight", Tensor(np.ones((2, 3)), requires_grad=True))
    store.add("a.bias", Tensor(np.zeros(2), requires_grad=True))
    return store


def test_poly_lr_half_way():
    assert poly_lr(500, 1000) == pytest.approx(1e-4 * 0.5**0.9, rel=1e-12)
    assert poly_lr(500, 1000) == pytest.approx(5.3589e-5, rel=1e-4)


def test_poly_lr_endpoints():
    assert poly_lr(0, 100) == 1e-4
    assert poly_lr(100, 100) == 0.0


def test_poly_lr_validation():
    with pytest.raises(ContractViolation, match="max_steps"):
        poly_lr(0, 0)
    with pytest.raises(ContractViolation, match="outside"):
        poly_lr(11, 10)


def test_rmsprop_hand_case():
    store = toy_store()
    state = make_optim_state(store, max_steps=10, lr0=1e-2)
    store["a.weight"].grad = np.ones((2, 3))
    store["a.bias"].grad = np.zeros(2)
    lr = rmsprop_step(store, state)
    assert lr == 1e-2
    assert np.allclose(state.square["a.weight"], 0.1)
    m_expected = 1.0 / np.sqrt(0.1 + 1e-8)
    assert np.allclose(state.momentum["a.weight"], m_expected, rtol=1e-12)
    assert np.allclose(store["a.weight"].data, 1.0 - 1e-2 * m_expected)
    assert state.step == 1
    assert store["a.weight"].grad is None


def test_rmsprop_zero_grad_is_fixed_point_from_rest():
    store = toy_store()
    state = make_optim_state(store, max_steps=10)
    rmsprop_step(store, state)  # no grads set: treated as zero
    assert np.array_equal(store["a.weight"].data, np.ones((2, 3)))
    assert np.allclose(state.square["a.weight"], 0.0)


def test_rmsprop_momentum_decays_without_gradient():
    store = toy_store()
    state = make_optim_state(store, max_steps=10, lr0=1e-2)
    store["a.weight"].grad = np.ones((2, 3))
    rmsprop_step(store, state)
    m1 = state.momentum["a.weight"].copy()
    rmsprop_step(store, state)  # gradient cleared by the first step
    assert np.allclose(state.momentum["a.weight"], 0.9 * m1)
    assert np.allclose(state.square["a.weight"], 0.09)


def test_rmsprop_shape_mismatch():
    store = toy_store()
    state = make_optim_state(store, max_steps=10)
    store["a.weight"].grad = np.ones(5)
    with pytest.raises(ContractViolation, match="shape"):
        rmsprop_step(store, state)


def test_checkpoint_round_trip(tmp_path):
    cfg = NetConfig(input_size=(16, 16), encoder_channels=(2, 4, 6, 8),
                    aspp_rates=(1, 2), seed=3)
    store = build_network(cfg)
    state = make_optim_state(store, max_steps=40, lr0=2e-4, power=0.8)
    rng = np.random.default_rng(0)
    for name, t in store.items():
        t.grad = rng.normal(size=t.data.shape)
    rmsprop_step(store, state)
    save_checkpoint(tmp_path, "epoch_001", store, state, epoch=1, seed=3)

    fresh = build_network(cfg)
    loaded, manifest = load_checkpoint(tmp_path, "epoch_001", fresh)
    for name, t in store.items():
        assert np.array_equal(fresh[name].data, t.data)
        assert np.array_equal(loaded.square[name], state.square[name])
        assert np.array_equal(loaded.momentum[name], state.momentum[name])
    assert loaded.step == 1
    assert loaded.max_steps == 40
    assert loaded.lr0 == 2e-4
    assert manifest["epoch"] == 1
    assert manifest["rng"]["seed"] == 3


def test_checkpoint_missing_manifest(tmp_path):
    cfg = NetConfig(input_size=(16, 16), encoder_channels=(2, 4, 6, 8),
                    aspp_rates=(1,), seed=3)
    store = build_network(cfg)
    state = make_optim_state(store, max_steps=4)
    save_checkpoint(tmp_path, "t", store, state, epoch=0, seed=3)
    (tmp_path / "t.json").unlink()
    with pytest.raises(DataError, match="manifest"):
        load_checkpoint(tmp_path, "t", build_network(cfg))


def test_toy_training_decreases_loss():
    samples = make_dataset(TOY_PARAMS, 8)
    cam = default_camera(TOY_PARAMS.image_size)
    store, log = train(samples, cam, TOY_CFG, epochs=7)
    totals = np.array([p["total"] for p in log])[:50]
    assert len(totals) == 50
    ma = np.convolve(totals, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    drops = np.diff(ma)
    assert (drops < 0).mean() > 0.8  # steady descent, tiny upticks tolerated
    assert ma[-1] < 0.6 * ma[0]


def test_lambda1_zero_never_evaluates_separation(monkeypatch):
    def bomb(*args, **kwargs):
        raise AssertionError("separation loss evaluated with lambda1=0")

    monkeypatch.setattr(train_mod, "water_separation_loss", bomb)
    samples = make_dataset(TOY_PARAMS, 2)
    cam = default_camera(TOY_PARAMS.image_size)
    _, log = train(samples, cam, TOY_CFG, epochs=1,
                   weights=LossWeights(lambda1=0.0))
    assert all(p["ws"] == 0.0 for p in log)


def test_nan_loss_aborts_with_diagnostic(monkeypatch):
    monkeypatch.setattr(
        train_mod, "focal_loss", lambda *a, **k: Tensor(float("nan"))
    )
    samples = make_dataset(TOY_PARAMS, 2)
    cam = default_camera(TOY_PARAMS.image_size)
    with pytest.raises(NumericFailure, match="non-finite focal.*step 0"):
        train(samples, cam, TOY_CFG, epochs=1)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    samples = make_dataset(TOY_PARAMS, 4)
    cam = default_camera(TOY_PARAMS.image_size)
    full_dir = tmp_path / "full"
    store_full, _ = train(samples, cam, TOY_CFG, epochs=3, out_dir=full_dir)
    final_bytes = (full_dir / "epoch_003.params").read_bytes()

    resumed_dir = tmp_path / "resumed"
    resumed_dir.mkdir()
    for suffix in (".params", ".optim", ".json"):
        (resumed_dir / f"epoch_002{suffix}").write_bytes(
            (full_dir / f"epoch_002{suffix}").read_bytes()
        )
    store_res, log = train(samples, cam, TOY_CFG, epochs=3,
                           out_dir=resumed_dir, resume_tag="epoch_002")
    assert len(log) == 4  # only the final epoch was replayed
    assert (resumed_dir / "epoch_003.params").read_bytes() == final_bytes
    for name, t in store_full.items():
        assert np.array_equal(store_res[name].data, t.data)


def test_repeated_runs_bit_identical(tmp_path):
    samples = make_dataset(TOY_PARAMS, 3)
    cam = default_camera(TOY_PARAMS.image_size)
    train(samples, cam, TOY_CFG, epochs=1, out_dir=tmp_path / "a")
    train(samples, cam, TOY_CFG, epochs=1, out_dir=tmp_path / "b")
    assert (tmp_path / "a/epoch_001.params").read_bytes() == \
        (tmp_path / "b/epoch_001.params").read_bytes()
    assert (tmp_path / "a/epoch_001.optim").read_bytes() == \
        (tmp_path / "b/epoch_001.optim").read_bytes()


def test_resume_rejects_mismatched_schedule(tmp_path):
    samples = make_dataset(TOY_PARAMS, 2)
    cam = default_camera(TOY_PARAMS.image_size)
    train(samples, cam, TOY_CFG, epochs=2, out_dir=tmp_path)
    with pytest.raises(DataError, match="max_steps"):
        train(samples, cam, TOY_CFG, epochs=5, out_dir=tmp_path,
              resume_tag="epoch_002")


def test_train_rejects_bad_stage():
    samples = make_dataset(TOY_PARAMS, 1)
    cam = default_camera(TOY_PARAMS.image_size)
    with pytest.raises(ContractViolation, match="stage"):
        train(samples, cam, TOY_CFG, epochs=1, ws_stage="res9")


def test_train_res4_stage_runs():
    samples = make_dataset(TOY_PARAMS, 1)
    cam = default_camera(TOY_PARAMS.image_size)
    _, log = train(samples, cam, TOY_CFG, epochs=1, ws_stage="res4")
    assert len(log) == 1
