import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from warmstart_nav.actions import ActionChunk, Frame, FrameError
from warmstart_nav.world_model import (
    Encoder, EncoderSpec, PredictorSpec, RolloutConfig, WorldModel, encode_dataset,
    gradient_check, init_params, layer_norm, make_segments, rollout_loss_and_grad,
    split_episodes, train,
)


@given(arrays(float, (3, 2, 8), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes_each_token(x):
    y = layer_norm(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    # tokens with real spread come out with unit variance
    big = var > 1e-2
    np.testing.assert_allclose(y.var(axis=-1)[big], 1.0, rtol=1e-3)


def test_encoder_is_frozen_and_seeded(world):
    spec = EncoderSpec(world.obs_dim, 2, 4, seed=3)
    a, b = Encoder(spec), Encoder(spec)
    assert a.checksum() == b.checksum()
    assert a.checksum() != Encoder(EncoderSpec(world.obs_dim, 2, 4, seed=4)).checksum()
    with pytest.raises(ValueError):
        a.projection[0, 0] = 1.0
    with pytest.raises(ValueError, match="features"):
        a(np.zeros(world.obs_dim + 1))
    assert a(np.zeros((5, world.obs_dim))).shape == (5, 2, 4)


def norm_chunk(values):
    return ActionChunk(np.asarray(values, dtype=float), Frame.LOCAL, normalized=True)


def test_batch_rollout_matches_step_by_step(small_model, small_dataset):
    """Route 1: vectorized unroll. Route 2: predict_step with an explicit sliding context."""
    wm = small_model
    z0 = wm.encode(small_dataset.episodes[0].observations[0])
    acts = np.random.default_rng(1).uniform(-1, 1, (6, 4))
    batch = wm.rollout(z0, norm_chunk(acts))
    lat = [z0]
    w = wm.spec.context
    for j in range(6):
        lo = max(0, j + 1 - w)
        lat.append(wm.predict_step(lat[lo: j + 1], norm_chunk(acts[lo: j + 1])))
    np.testing.assert_allclose(batch, np.stack(lat[1:]), atol=1e-12)


def test_rollout_rejects_physical_or_global_actions(small_model):
    z = np.zeros(small_model.latent_shape)
    with pytest.raises(FrameError):
        small_model.rollout(z, ActionChunk(np.zeros((2, 4)), Frame.LOCAL))
    with pytest.raises(FrameError):
        small_model.predict_step([z], np.zeros((1, 4)))
    with pytest.raises(ValueError, match="latents"):
        small_model.predict_step([z] * 4, norm_chunk(np.zeros((4, 4))))


def test_predictor_shape_must_match_encoder(world):
    enc = Encoder(EncoderSpec(world.obs_dim, 2, 4))
    spec = PredictorSpec(4, 4)
    with pytest.raises(ValueError, match="latent shape"):
        WorldModel(enc, spec, init_params(spec, np.random.default_rng(0)))


def test_unknown_predictor_kind():
    with pytest.raises(ValueError, match="kind"):
        PredictorSpec(kind="transformer")


def segments(model, dataset, k=4, n=6):
    flat, acts = encode_dataset(model, dataset)
    Z, A = make_segments(flat, acts, k)
    return Z[:n], A[:n]


@pytest.mark.parametrize("kind", ["mlp", "linear"])
def test_gradients_match_finite_differences(kind, small_model, small_dataset):
    spec = PredictorSpec(2, 4, kind, hidden=16, layers=2, action_embed=6, context=3)
    params = init_params(spec, np.random.default_rng(7))
    Z, A = segments(small_model, small_dataset)
    rep = gradient_check(params, Z, A, spec, RolloutConfig(k_roll=4, tbptt_window=4), n_weights=60)
    assert rep.n_checked >= 40
    assert rep.max_rel_error < 1e-5


def test_truncation_cuts_long_gradient_paths(small_model, small_dataset):
    Z, A = segments(small_model, small_dataset)
    p, spec = small_model.params, small_model.spec
    _, full = rollout_loss_and_grad(p, Z, A, spec, 4, 4)
    _, per_term = rollout_loss_and_grad(p, Z, A, spec, 4, 4, per_term=True)
    _, short = rollout_loss_and_grad(p, Z, A, spec, 4, 1)
    for k in full:
        # summing per-term backward passes is the same linear map
        np.testing.assert_allclose(per_term[k], full[k], atol=1e-12)
    assert any(not np.allclose(short[k], full[k]) for k in full)


def test_mean_over_k_scales_loss(small_model, small_dataset):
    Z, A = segments(small_model, small_dataset)
    p, spec = small_model.params, small_model.spec
    s, _ = rollout_loss_and_grad(p, Z, A, spec, 4, 4, need_grad=False)
    m, _ = rollout_loss_and_grad(p, Z, A, spec, 4, 4, mean_over_k=True, need_grad=False)
    assert m == pytest.approx(s / 4, rel=1e-12)


def test_segments_too_short():
    with pytest.raises(ValueError, match="long enough"):
        make_segments([np.zeros((3, 2))], [np.zeros((2, 4))], 4)
    Z, A = make_segments([np.zeros((7, 2))], [np.zeros((6, 4))], 4)
    assert Z.shape == (3, 5, 2) and A.shape == (3, 4, 4)


@given(st.integers(2, 50), st.floats(0.05, 0.5), st.integers(0, 100))
def test_split_is_disjoint_and_covering(n, frac, seed):
    tr, va = split_episodes(n, frac, seed)
    assert set(tr).isdisjoint(va)
    assert sorted(set(tr) | set(va)) == list(range(n))
    assert len(tr) >= 1 and len(va) >= 1


def test_training_reduces_loss_and_round_trips(small_dataset):
    cfg = RolloutConfig(epochs=5, batch_size=16, learning_rate=0.05)
    enc = EncoderSpec(small_dataset.world.obs_dim, 2, 4)
    spec = PredictorSpec(2, 4, hidden=16, layers=2, action_embed=6)
    res = train(small_dataset, cfg, np.random.default_rng(0), enc, spec)
    assert len(res.train_loss) == 5 and len(res.val_loss) == 5
    assert res.train_loss[-1] < res.initial_loss
    back = WorldModel.from_checkpoint(json.loads(json.dumps(res.model.to_checkpoint())))
    assert back.params_checksum() == res.model.params_checksum()
    assert back.encoder.checksum() == res.model.encoder.checksum()
    np.testing.assert_array_equal(back.bounds.upper, small_dataset.bounds.upper)


def test_checkpoint_validation(small_model):
    ck = small_model.to_checkpoint()
    bad = json.loads(json.dumps(ck))
    bad["weights"]["b_in"] = bad["weights"]["b_in"][:-1]
    with pytest.raises(ValueError, match="b_in"):
        WorldModel.from_checkpoint(bad)
    bad = json.loads(json.dumps(ck))
    bad["format_version"] = 99
    with pytest.raises(ValueError, match="version"):
        WorldModel.from_checkpoint(bad)
    bad = json.loads(json.dumps(ck))
    bad["weights"]["extra"] = [1.0]
    with pytest.raises(ValueError, match="unexpected"):
        WorldModel.from_checkpoint(bad)
