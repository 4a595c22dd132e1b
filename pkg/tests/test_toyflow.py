import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coatsim.core import Rng, TraitVector
from coatsim.toyflow import (DivergenceError, FlowModel, TrainConfig, build_conditioning, cfm_loss, embed_traits,
                             embedding_terms, grad_check, gradient_errors, integrate, learning_rate, load_checkpoint,
                             pack, reference_instance, sample, save_checkpoint, space_to_depth, train, unpack)


def test_pack_shapes():
    assert pack(np.zeros((16, 128, 128)), 2).shape == (4096, 64)
    assert pack(np.zeros((3, 32, 32)), 2).shape == (256, 12)
    with pytest.raises(ValueError):
        pack(np.zeros((3, 5, 4)), 2)


def test_pack_layout():
    x = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    tok = pack(x, 2)
    # first token: top-left 2x2 block of channel 0, then of channel 1
    assert tok[0].tolist() == [0, 1, 4, 5, 16, 17, 20, 21]
    # second token is the block to its right
    assert tok[1].tolist()[:4] == [2, 3, 6, 7]


@given(arrays(np.float64, (3, 6, 8), elements=st.floats(-1e6, 1e6)))
def test_pack_roundtrip(x):
    assert np.array_equal(unpack(pack(x, 2), 3, 6, 8, 2), x)


def test_space_to_depth():
    m = np.arange(16.0).reshape(4, 4)
    s = space_to_depth(m, 2)
    assert s.shape == (4, 2, 2)
    assert s[:, 0, 0].tolist() == [0, 1, 4, 5]


def test_toy_conditioning_layout():
    img = np.random.default_rng(0).random((3, 32, 32))
    cond = build_conditioning(img, np.zeros_like(img), np.ones((32, 32)), 2)
    assert cond.tokens.shape == (256, 28)
    assert cond.layout == {"image": 12, "albedo": 12, "mask": 4}
    assert not cond.slice("albedo").any()
    assert np.array_equal(cond.slice("image"), pack(img, 2))


def test_conditioning_shape_errors():
    with pytest.raises(ValueError):
        build_conditioning(np.zeros((3, 8, 8)), np.zeros((3, 4, 4)), np.zeros((8, 8)), 2)
    with pytest.raises(ValueError):
        build_conditioning(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), np.zeros((12, 8)), 2)


@pytest.fixture
def table():
    return FlowModel(hidden=16, seed=1).params


def test_embedding_x_zero_is_position(table):
    tokens = embed_traits(TraitVector(0.0, 0.0, 0.0, 0.0), "add_textured", table)
    assert len(tokens) == 5
    assert np.array_equal(tokens[1], table["emb_pos"][0])


def test_embedding_remove_is_single_token(table):
    assert len(embed_traits(None, "remove", table)) == 1
    assert len(embedding_terms(TraitVector(), "remove")) == 1


def test_embedding_binary_difference(table):
    on = embed_traits(TraitVector(0.5, 1.0, 0.0, 0.5), "add_uniform", table)
    off = embed_traits(TraitVector(0.5, 0.0, 0.0, 0.5), "add_uniform", table)
    np.testing.assert_allclose(on[2] - off[2], table["val_metal_on"] - table["val_metal_off"], atol=1e-15)


def test_embedding_thickness_branch(table):
    solid = embed_traits(TraitVector(0.5, 0.0, 0.0, 1.0), "add_uniform", table)[4]
    clear = embed_traits(TraitVector(0.5, 0.0, 1.0, 1.0), "add_uniform", table)[4]
    np.testing.assert_allclose(solid, table["emb_pos"][3] + table["val_thick_solid"])
    np.testing.assert_allclose(clear, table["emb_pos"][3] + table["val_thick_transmissive"])


def test_unknown_task():
    with pytest.raises(ValueError):
        embedding_terms(None, "paint")


def test_cfm_loss_oracle_is_zero():
    g = np.random.default_rng(1)
    x0, noise = g.random((4, 12)), g.normal(size=(4, 12))
    assert cfm_loss(lambda z, t, c, e: x0 - noise, x0, noise, 0.3, None, None) == 0.0


def test_cfm_interpolant_end():
    g = np.random.default_rng(2)
    x0, noise = g.random((4, 12)), g.normal(size=(4, 12))
    seen = {}
    cfm_loss(lambda z, t, c, e: seen.setdefault("z", z), x0, noise, 1.0, None, None)
    assert np.array_equal(seen["z"], x0)


def test_cfm_loss_hand_computed():
    x0 = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
    noise = np.array([[0.0, 1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
    # z = [[.5,1.5,1.5,2.5],[.5,.5,.5,.5]], v = 2z, target = [[1,1,3,3],[-1,-1,-1,-1]]
    # squared errors: 0+4+0+4 and 4+4+4+4 -> 24 / 8
    assert cfm_loss(lambda z, t, c, e: 2 * z, x0, noise, 0.5, None, None) == 3.0


def test_cfm_loss_matches_model_batch_loss():
    model, batch = reference_instance(0)
    i = 1
    emb = [sum(c * (model.params[n] if r is None else model.params[n][r]) for n, r, c in tok)
           for tok in batch["terms"][i]]
    single = cfm_loss(model, batch["x0"][i], batch["noise"][i], batch["t"][i], batch["cond"][i], emb)
    one = {k: v[i:i + 1] for k, v in batch.items() if k != "terms"}
    one["terms"] = batch["terms"][i:i + 1]
    assert single == pytest.approx(model.loss(one), rel=1e-12)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(150, cfg) == pytest.approx(0.5e-4)
    assert learning_rate(300, cfg) == pytest.approx(1e-4)
    assert learning_rate(cfg.total_steps, cfg) == pytest.approx(0.0, abs=1e-12)
    mid = learning_rate(400, cfg)
    assert 0 < mid < 1e-4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(side=31, patch=2)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1})


def test_grad_check_passes():
    model, batch = reference_instance(0)
    assert model.n_params <= 1000
    assert grad_check(model, batch) < 1e-4


def test_grad_check_catches_zeroed_gradient():
    model, batch = reference_instance(0)

    def broken(b):
        loss, grads = model.loss_and_grads(b)
        grads["w_out"] = grads["w_out"].copy()
        grads["w_out"][0, 0] = 0.0
        return loss, grads

    errors = gradient_errors(model, batch, grad_fn=broken)
    assert errors["w_out"] >= 1e-2
    assert max(v for k, v in errors.items() if k != "w_out") < 1e-4


def test_grad_check_frozen_model():
    model, batch = reference_instance(0)
    assert grad_check(model, batch, frozen=tuple(model.params)) == 0


def test_euler_single_step_constant_velocity():
    z = np.random.default_rng(3).normal(size=(5, 4))
    c = np.full((5, 4), 0.25)
    np.testing.assert_array_equal(integrate(lambda zz, t: c, z, 1), z + c)


def test_euler_recovers_x0():
    g = np.random.default_rng(4)
    x0, noise = g.random((5, 4)), g.normal(size=(5, 4))
    np.testing.assert_allclose(integrate(lambda zz, t: x0 - noise, noise, 1), x0, atol=1e-15)


def test_sample_needs_steps():
    model = FlowModel(hidden=8)
    cond = build_conditioning(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((4, 4)), 2)
    with pytest.raises(ValueError):
        sample(model, cond, None, 0, Rng(0), task="remove")


def test_sample_deterministic_and_clamped():
    model = FlowModel(hidden=8, seed=2)
    cond = build_conditioning(np.ones((3, 8, 8)), np.zeros((3, 8, 8)), np.ones((8, 8)), 2)
    a = sample(model, cond, TraitVector(), 4, Rng(1))
    b = sample(model, cond, TraitVector(), 4, Rng(1))
    assert a.shape == (8, 8, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def _stream(side=8):
    from coatsim.dataset import TrainingSample
    g = np.random.default_rng(0)
    while True:
        img = g.random((side, side, 3))
        yield TrainingSample("add_uniform", img, img * 0.5, np.ones((side, side)), np.full((side, side, 3), 0.5),
                             TraitVector())


def test_training_is_deterministic():
    cfg = TrainConfig(total_steps=6, warmup_steps=2, side=8, batch_size=2, hidden=8, learning_rate=1e-3)
    _, a = train(_stream(), cfg)
    _, b = train(_stream(), cfg)
    assert a == b and len(a) == 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts():
    cfg = TrainConfig(total_steps=50, warmup_steps=1, side=8, batch_size=2, hidden=8, learning_rate=1e300)
    with pytest.raises(DivergenceError):
        train(_stream(), cfg)


def test_checkpoint_roundtrip(tmp_path):
    model = FlowModel(hidden=8, seed=5)
    cfg = TrainConfig(hidden=8)
    save_checkpoint(tmp_path / "m.ckpt", model, cfg)
    back, back_cfg = load_checkpoint(tmp_path / "m.ckpt")
    assert back_cfg == cfg
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"COATFLOW"


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
