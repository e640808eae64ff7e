import numpy as np
import pytest

from dcdm import masks
from dcdm.autodiff import Tape, Tensor
from dcdm.config import tiny_reference_config
from dcdm.model import NEG_LOGIT, Denoiser, time_features
from dcdm.noise import corrupt
from dcdm.objective import total_loss


def batch_for(cfg, seed=0, t=(0.4, 0.8)):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, cfg.mask_id, size=(len(t), cfg.seq_len))
    return corrupt(x, np.array(t), rng, cfg.mask_id)


@pytest.fixture
def cfg():
    return tiny_reference_config(max_len=10, seq_len=10)


def test_output_shapes(cfg):
    model = Denoiser(cfg, seed=1)
    out = model.forward_train(batch_for(cfg), rng=np.random.default_rng(0))
    assert out.logits.shape == (2, 10, cfg.vocab_size)
    assert out.chunks.shape == (2, 10) and out.chunks.min() >= 1 and out.chunks.max() <= cfg.K
    assert out.counts.sum() == 20


def test_mask_logit_is_never_predicted(cfg):
    out = Denoiser(cfg, seed=1).forward_infer(np.full(10, cfg.mask_id), 1.0)
    assert np.all(out.logits.data[..., -1] == NEG_LOGIT)


def test_fully_masked_inference_is_finite(cfg):
    out = Denoiser(cfg, seed=2).forward_infer(np.full(10, cfg.mask_id), 1.0)
    assert np.isfinite(out.logits.data).all()


def test_frozen_chunks_match_computed(cfg):
    model = Denoiser(cfg, seed=3)
    z = batch_for(cfg).z_t[0]
    free = model.forward_infer(z, 0.5)
    frozen = model.forward_infer(z, 0.5, frozen_c=free.chunks[0])
    assert np.array_equal(free.logits.data, frozen.logits.data)


def test_frozen_chunk_length_checked(cfg):
    with pytest.raises(ValueError):
        Denoiser(cfg).forward_infer(np.zeros(10, dtype=int), 0.5, frozen_c=np.ones(9, dtype=int))


def test_too_long_rejected(cfg):
    with pytest.raises(ValueError, match="max_len"):
        Denoiser(cfg).forward_infer(np.zeros(11, dtype=int), 0.5)


def test_mdlm_has_no_aux_and_single_chunk(cfg):
    model = Denoiser(cfg.replace(mode="mdlm"), seed=0)
    out = model.forward_train(batch_for(cfg))
    assert out.aux.item() == 0.0 and np.all(out.chunks == 1)
    with pytest.raises(ValueError):
        model.forward_train(batch_for(cfg), chunks="positional")


def test_bdlm_uses_positional_blocks(cfg):
    out = Denoiser(cfg.replace(mode="bdlm", block_size=3), seed=0).forward_train(batch_for(cfg))
    assert out.chunks[0].tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4]


def test_dcdm_positional_override_bitwise_equals_bdlm(cfg):
    dcdm = Denoiser(cfg, seed=4)
    bdlm = Denoiser(cfg.replace(mode="bdlm"), dcdm.params)
    b = batch_for(cfg, seed=5)
    a = dcdm.forward_train(b, chunks="positional", track=False)
    o = bdlm.forward_train(b)
    assert np.array_equal(a.logits.data, o.logits.data) and a.aux.item() == 0.0


def test_k1_inference_matches_mdlm(cfg):
    one = Denoiser(cfg.replace(K=1), seed=6)
    mdlm = Denoiser(cfg.replace(mode="mdlm", K=1), one.params)
    z = batch_for(cfg, seed=7).z_t
    np.testing.assert_allclose(one.forward_infer(z, 0.5).logits.data,
                               mdlm.forward_infer(z, 0.5).logits.data, rtol=0, atol=1e-12)


def test_routing_ignores_clean_stream(cfg):
    # chunk ids come from the noisy half only
    model = Denoiser(cfg, seed=8)
    b = batch_for(cfg, seed=9)
    g = np.zeros((2, 10, cfg.K))
    c1 = model.forward_train(b, gumbel=g, track=False).chunks
    b.x = (b.x + 1) % cfg.mask_id
    c2 = model.forward_train(b, gumbel=g, track=False).chunks
    assert np.array_equal(c1, c2)


def test_track_flag_controls_counts(cfg):
    model = Denoiser(cfg, seed=0)
    model.forward_train(batch_for(cfg), gumbel=np.zeros((2, 10, cfg.K)), track=False)
    assert model.bias.counts.sum() == 0
    model.forward_train(batch_for(cfg), gumbel=np.zeros((2, 10, cfg.K)))
    assert model.bias.counts.sum() == 20


def test_dual_stream_halves_are_separable(cfg):
    """The split stage-1 and split attention agree with a dense 2L pass."""
    model = Denoiser(cfg, seed=10)
    b = batch_for(cfg, seed=11)
    P = model.constants()
    L = cfg.seq_len
    deep = masks.batch_training_masks(np.tile(np.arange(L) // 3 + 1, (2, 1)), b.nu)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2 * L, cfg.d)))
    split = model._attention(P, "blocks.1.", x, deep, split=L).data
    dense = model._attention(P, "blocks.1.", x, deep).data
    np.testing.assert_allclose(split, dense, rtol=0, atol=1e-13)
    stage1 = masks.batch_stage1_masks(b.nu)
    h_dense, _ = model._chunk_layer(P, model._block(P, 0, x, stage1), stage1)
    x2 = x.reshape(2, 2, L, cfg.d).reshape(4, L, cfg.d)
    per_half = np.repeat(masks.batch_noise_masks(b.nu), 2, axis=0)
    h_split, _ = model._chunk_layer(P, model._block(P, 0, x2, per_half), per_half)
    np.testing.assert_allclose(h_split.data.reshape(2, 2 * L, cfg.d), h_dense.data,
                               rtol=0, atol=1e-13)


def test_time_features_shape_and_range():
    f = time_features(np.array([0.001, 0.5, 1.0]), 9)
    assert f.shape == (3, 9) and np.abs(f).max() <= 1.0


def test_gradients_reach_every_parameter(cfg):
    model = Denoiser(cfg, seed=12)
    b = batch_for(cfg, seed=13)
    tape = Tape()
    P = model.taped(tape)
    out = model.forward_train(b, P, np.random.default_rng(0), track=False)
    loss = total_loss(out, b, cfg).total
    grads = dict(zip(P, tape.gradients(loss, list(P.values()))))
    assert all(np.abs(g).max() > 0 for g in grads.values())
