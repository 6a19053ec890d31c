import dataclasses

import numpy as np
import pytest
from conftest import finite_difference, relative_error

from syngrid import autodiff as ad
from syngrid.autodiff import Tensor
from syngrid.errors import OutOfVocab, ShapeMismatch
from syngrid.model import (
    EOS_ID,
    N_VISUAL,
    PAD_ID,
    Batch,
    ModelConfig,
    MultimodalTransformer,
    action_ids,
    make_batch,
    text_ids,
)


@pytest.fixture
def episodes(small_corpus):
    return small_corpus.train[:3]


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(mask_source="semantic")
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_vocab_lookups():
    assert text_ids(["push", "the", "box"])[1] != 0
    with pytest.raises(OutOfVocab):
        text_ids(["push", "the", "banana"])
    with pytest.raises(OutOfVocab):
        action_ids(["jump"])


def test_forward_shapes(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config, seed=0)
    batch = make_batch(episodes, tiny_config)
    logits = model.forward(batch)
    b, t = batch.dec_in.shape
    assert logits.shape == (b, t, tiny_config.action_vocab_size)
    record = []
    model.forward(batch, record=record)
    n = batch.text.shape[1]
    for (kind, _), probs in record:
        if kind == "t2v_cross":
            assert probs.shape == (b, 2, n, N_VISUAL)
        if kind == "dec_cross":
            assert probs.shape == (b, 2, t, n + N_VISUAL)


def test_world_encoding_shape_checked(tiny_config):
    model = MultimodalTransformer(tiny_config)
    with pytest.raises(ShapeMismatch, match="6, 6, 17"):
        model.embed_world(np.zeros((1, 5, 5, 17)))


def test_text_position_embedding_distinguishes_order(tiny_config):
    model = MultimodalTransformer(tiny_config)
    ids = np.array([[3, 3]])
    emb = model.embed_text(ids).data
    assert not np.allclose(emb[0, 0], emb[0, 1])


def test_world_row_col_embeddings(tiny_config):
    model = MultimodalTransformer(tiny_config)
    emb = model.embed_world(np.zeros((36, 17))).data[0]
    assert not np.allclose(emb[0], emb[1])  # (0,0) vs (0,1)
    assert not np.allclose(emb[0], emb[6])  # (0,0) vs (1,0)


def test_full_mask_equals_mask_off(tiny_config, episodes):
    on = MultimodalTransformer(tiny_config, seed=1)
    off = MultimodalTransformer(dataclasses.replace(tiny_config, use_text_mask=False), seed=1)
    batch = make_batch(episodes, tiny_config)
    n = batch.text.shape[1]
    key = batch.key_allow
    full = (key[:, :, None] & key[:, None, :]) | np.eye(n, dtype=bool)[None]
    batch_full = dataclasses.replace(batch, text_allow=full)
    a = on.forward(batch_full).data
    b = off.forward(batch).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_masked_text_attention_is_zero_where_disallowed(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config)
    batch = make_batch(episodes, tiny_config)
    record = []
    model.forward(batch, record=record)
    for (kind, _), probs in record:
        if kind == "text_self":
            assert np.all(probs[np.broadcast_to(~batch.text_allow[:, None], probs.shape)] == 0.0)
            np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)


def _sublayer_params(model, name):
    return [p for n, p in model.params.items() if f".{name}." in n]


@pytest.mark.parametrize(
    "sublayer,changes_text,changes_vis",
    [("t2v_cross", True, False), ("v2t_cross", False, True), ("self_attn_text", True, False), ("self_attn_vis", False, True)],
)
def test_perturbing_one_sublayer_in_a_single_layer(tiny_config, episodes, sublayer, changes_text, changes_vis):
    cfg = dataclasses.replace(tiny_config, n_encoder_layers=1, share_encoder_weights=False)
    model = MultimodalTransformer(cfg)
    batch = make_batch(episodes, cfg)
    text, vis = model.embed_text(batch.text), model.embed_world(batch.world)
    base_t, base_v = (x.data.copy() for x in model.encode(text, vis, batch))
    rng = np.random.default_rng(0)
    for p in _sublayer_params(model, sublayer):
        if p.name.endswith(".wo"):
            # random, not constant: a constant shift would be erased by layer norm
            p.data = p.data + rng.standard_normal(p.shape)
    new_t, new_v = (x.data for x in model.encode(text, vis, batch))
    assert (not np.allclose(base_t, new_t)) == changes_text
    assert (not np.allclose(base_v, new_v)) == changes_vis


def test_sharing_reduces_parameters(tiny_config):
    shared = MultimodalTransformer(tiny_config)
    unshared = MultimodalTransformer(dataclasses.replace(tiny_config, share_encoder_weights=False))
    per_layer = ad.count_params({n: p for n, p in unshared.params.items() if n.startswith("encoder.layer0.")})
    assert ad.count_params(unshared.params) - ad.count_params(shared.params) == per_layer * (tiny_config.n_encoder_layers - 1)


def test_shared_gradient_is_sum_of_per_layer_gradients(tiny_config, episodes):
    shared = MultimodalTransformer(tiny_config, seed=4)
    unshared = MultimodalTransformer(dataclasses.replace(tiny_config, share_encoder_weights=False), seed=4)
    for name, p in shared.params.items():
        if name.startswith("encoder.shared."):
            for i in range(tiny_config.n_encoder_layers):
                unshared.params[name.replace("shared", f"layer{i}")].data = p.data.copy()
        else:
            unshared.params[name].data = p.data.copy()
    batch = make_batch(episodes, tiny_config)
    for m in (shared, unshared):
        ad.zero_grads(m.params)
        m.loss(batch).backward()
    for name, p in shared.params.items():
        if name.startswith("encoder.shared."):
            total = sum(unshared.params[name.replace("shared", f"layer{i}")].grad for i in range(tiny_config.n_encoder_layers))
            np.testing.assert_allclose(p.grad, total, atol=1e-10)


def test_decoder_is_causal(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config)
    batch = make_batch(episodes[:1], tiny_config)
    logits = model.forward(batch).data
    changed = batch.dec_in.copy()
    changed[0, -1] = (changed[0, -1] + 1) % 5
    logits2 = model.forward(dataclasses.replace(batch, dec_in=changed)).data
    np.testing.assert_array_equal(logits[0, :-1], logits2[0, :-1])


def test_padding_does_not_change_predictions(tiny_config, small_corpus):
    model = MultimodalTransformer(tiny_config)
    eps = sorted(small_corpus.train[:10], key=lambda e: len(e.tokens))
    short, long_ = eps[0], eps[-1]
    assert len(short.tokens) < len(long_.tokens)
    alone = model.forward(make_batch([short], tiny_config)).data[0]
    padded = make_batch([short, long_], tiny_config)
    t = len(short.actions) + 1
    together = model.forward(padded).data[0, :t]
    np.testing.assert_allclose(alone, together, atol=1e-10)


def test_rigged_eos_decodes_empty(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config)
    model.params["out_proj.b"].data[EOS_ID] = 1e6
    assert model.greedy_decode(make_batch(episodes, tiny_config, with_targets=False)) == [[]] * len(episodes)


def test_decode_length_is_capped(tiny_config, episodes):
    cfg = dataclasses.replace(tiny_config, max_decode_len=6)
    model = MultimodalTransformer(cfg)
    model.params["out_proj.b"].data[0] = 1e6  # always turn_left
    out = model.greedy_decode(make_batch(episodes, cfg, with_targets=False))
    assert all(seq == ["turn_left"] * 5 for seq in out)


def test_targets_are_shifted(tiny_config, episodes):
    batch = make_batch(episodes, tiny_config)
    for i, ep in enumerate(episodes):
        k = len(ep.actions)
        assert list(batch.dec_in[i, 1 : k + 1]) == list(batch.dec_out[i, :k])
        assert batch.dec_out[i, k] == EOS_ID
        assert np.all(batch.dec_out[i, k + 1 :] == PAD_ID)


def test_cross_attention_permutation_equivariance(tiny_config, episodes):
    """Visual self-attention and t2v cross-attention ignore key order once
    positional embeddings are applied, so permuting visual memory rows
    leaves text outputs unchanged."""
    model = MultimodalTransformer(tiny_config)
    batch = make_batch(episodes, tiny_config)
    text = model.embed_text(batch.text)
    vis = model.embed_world(batch.world)
    perm = np.random.default_rng(0).permutation(N_VISUAL)
    vis_perm = Tensor(vis.data[:, perm])
    t1, v1 = model.encode(text, vis, batch)
    t2, v2 = model.encode(text, vis_perm, batch)
    np.testing.assert_allclose(t1.data, t2.data, atol=1e-10)
    np.testing.assert_allclose(v1.data[:, perm], v2.data, atol=1e-10)


def test_model_gradients_match_finite_differences(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config, seed=2)
    batch = make_batch(episodes[:2], tiny_config)
    ad.zero_grads(model.params)
    model.loss(batch).backward()
    rng = np.random.default_rng(0)

    def loss():
        with ad.no_grad():
            return model.loss(batch).item()

    worst = 0.0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(3, flat.size), replace=False)
        for k in picks:
            view = flat[k : k + 1]
            numeric = finite_difference(loss, view)[0]
            worst = max(worst, relative_error(p.grad.reshape(-1)[k], numeric))
    assert worst < 1e-4, worst


def test_batch_shape_mismatch(tiny_config, episodes):
    model = MultimodalTransformer(tiny_config)
    batch = make_batch(episodes, tiny_config)
    bad = Batch(batch.text, batch.text_len, batch.text_allow[:, :-1, :-1], batch.world, batch.dec_in, batch.dec_out)
    with pytest.raises(ShapeMismatch):
        model.forward(bad)
