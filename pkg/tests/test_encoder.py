import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stilts_lab.autodiff import Graph, grad_check
from stilts_lab.datakit import TaskSpec, Vocab
from stilts_lab.encoder import (EncoderConfig, EncoderGraph, encode, init_params, lm_logits, param_count, pool,
                                siamese_features, swap_head)
from stilts_lab.pipeline import PhaseConfig, lm_batch, pretrain_lm
from stilts_lab.selfcheck import ENCODER_TOLERANCE, encoder_case

SMALL = EncoderConfig(vocab_size=20, max_len=12, d_model=16, n_heads=4, n_layers=2, dropout_rate=0.0)
CAUSAL = EncoderConfig(vocab_size=20, max_len=12, d_model=16, n_heads=4, n_layers=2, dropout_rate=0.0,
                       objective_style="causal_lm")


def closed_form_count(v, t, d, layers):
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    return v * d + t * d + layers * per_layer + 2 * d + (d * v + v) + (d * d + d)


def test_param_count_closed_form():
    cfg = EncoderConfig(vocab_size=100, max_len=32, d_model=32, n_heads=4, n_layers=2)
    assert param_count(cfg) == closed_form_count(100, 32, 32, 2)
    assert sum(p.size for p in init_params(cfg, 0).values()) == param_count(cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(vocab_size=10, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, pooling="mean")
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, dropout_rate=1.0)


def test_init_is_deterministic_and_seeded():
    a, b, c = init_params(SMALL, 3), init_params(SMALL, 3), init_params(SMALL, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert not a["layer0.attn.bq"].any() and np.all(a["ln_f.g"] == 1.0)
    assert abs(np.std(init_params(EncoderConfig(vocab_size=500), 0)["tok_emb"]) - 0.02) < 0.001


def test_out_of_range_token_rejected():
    with pytest.raises(ValueError, match="token id 20"):
        encode(init_params(SMALL, 0), SMALL, [2, 20])
    with pytest.raises(ValueError, match="max_len"):
        encode(init_params(SMALL, 0), SMALL, list(range(13)))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(5, 19), min_size=1, max_size=7), st.integers(1, 5), st.integers(0, 100),
       st.sampled_from(["masked_lm", "causal_lm"]))
def test_padding_never_changes_real_positions(tokens, n_pad, seed, style):
    cfg = EncoderConfig(**{**SMALL.to_dict(), "objective_style": style})
    params = init_params(cfg, seed)
    h = encode(params, cfg, tokens)
    padded = tokens + [0] * n_pad
    mask = [True] * len(tokens) + [False] * n_pad
    hp = encode(params, cfg, padded, mask)
    assert np.allclose(hp[:len(tokens)], h, atol=1e-9, rtol=0)
    for mode in ("cls_token", "last_token"):
        assert np.allclose(pool(hp, mode, mask), pool(h, mode), atol=1e-9, rtol=0)
    pu = pool(hp, "siamese_pair", mask, hidden_b=h, params=params)
    assert np.allclose(pu, pool(h, "siamese_pair", hidden_b=h, params=params), atol=1e-9, rtol=0)


def test_causal_prefix_unaffected_by_later_tokens():
    params = init_params(CAUSAL, 1)
    ids = np.array([5, 6, 7, 8, 9, 10])
    changed = ids.copy()
    changed[3] = 15
    h1, h2 = encode(params, CAUSAL, ids), encode(params, CAUSAL, changed)
    assert np.array_equal(h1[:3], h2[:3])
    assert not np.allclose(h1[3:], h2[3:])


def test_bidirectional_change_reaches_every_position():
    params = init_params(SMALL, 1)
    ids = np.array([5, 6, 7, 8, 9, 10])
    changed = ids.copy()
    changed[4] = 15
    diff = np.abs(encode(params, SMALL, ids) - encode(params, SMALL, changed)).max(axis=1)
    assert np.all(diff > 1e-9)


def test_causal_gradient_to_future_embeddings_is_zero():
    cfg = EncoderConfig(**{**CAUSAL.to_dict(), "dropout_rate": 0.0})
    params = init_params(cfg, 2)
    ids = np.array([[5, 6, 7, 8, 9]])
    g = Graph()
    eg = EncoderGraph(g, params, cfg)
    h = eg.encode(ids, np.ones_like(ids, dtype=bool))
    # loss reads only position 1
    loss = g.sum(g.slice(h, (slice(None), 1)))
    grads = g.named_grads(g.backward(loss))
    assert not grads["pos_emb"][2:].any()
    assert grads["pos_emb"][:2].any()
    assert not grads["tok_emb"][[7, 8, 9]].any()


def test_pool_definitions():
    rng = np.random.default_rng(0)
    params = init_params(SMALL, 0)
    h = encode(params, SMALL, [2, 5, 6, 3])
    assert np.array_equal(pool(h, "cls_token"), h[0])
    assert np.array_equal(pool(h, "last_token"), h[3])
    u = rng.normal(size=5)
    feats = siamese_features(u, u)
    assert feats.shape == (20,)
    assert not feats[10:15].any()
    assert np.array_equal(feats[15:], u ** 2)
    with pytest.raises(ValueError, match="second segment"):
        pool(h, "siamese_pair", params=params)


def test_siamese_pair_dimension():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "pooling": "siamese_pair"})
    params = init_params(cfg, 0)
    h = encode(params, cfg, [2, 5, 3])
    assert pool(h, "siamese_pair", hidden_b=h, params=params).shape == (4 * cfg.d_model,)
    assert cfg.pooled_dim == 64


def test_lm_logits_shapes_and_bounds():
    params = init_params(CAUSAL, 0)
    h = encode(params, CAUSAL, [5, 6, 7])
    logits = lm_logits(params, CAUSAL, h)
    assert logits.shape == (2, CAUSAL.vocab_size)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert lm_logits(params, CAUSAL, encode(params, CAUSAL, [5])).shape == (0, CAUSAL.vocab_size)
    with pytest.raises(ValueError, match="out of range"):
        lm_logits(params, CAUSAL, h, [2])
    mparams = init_params(SMALL, 0)
    mh = encode(mparams, SMALL, [5, 4, 7])
    assert lm_logits(mparams, SMALL, mh, [1]).shape == (1, SMALL.vocab_size)
    with pytest.raises(ValueError):
        lm_logits(mparams, SMALL, mh)


def test_swap_head():
    three = TaskSpec("three", "single", "classification", 3)
    two = TaskSpec("two")
    sts = TaskSpec("sts", label_kind="regression", metrics=("pearson",), chance={"pearson": 0.0})
    params = init_params(SMALL, 0)
    before = encode(params, SMALL, [2, 5, 3])
    h0 = swap_head(None, two, SMALL, 1)
    h3 = swap_head(h0, three, SMALL, 2)
    assert h3.n_out == 3 and h3.w.shape == (16, 3)
    back = swap_head(h3, two, SMALL, 3)
    assert not np.array_equal(back.w, h0.w)
    assert swap_head(None, sts, SMALL, 4).n_out == 1
    assert np.array_equal(encode(params, SMALL, [2, 5, 3]), before)


def test_task_gradients_reach_the_encoder():
    build, params, _ = encoder_case("cls_token", "masked_lm", jitter=0.0)
    g, loss = build(params)
    grads = g.named_grads(g.backward(loss))
    for name in ("tok_emb", "layer0.attn.wq", "layer1.ff.w1", "ln_f.g", "head.w"):
        assert np.abs(grads[name]).max() > 0, name


@pytest.mark.parametrize("pooling,style", [("cls_token", "masked_lm"), ("last_token", "causal_lm"),
                                           ("siamese_pair", "masked_lm")])
def test_full_encoder_grad_check(pooling, style):
    build, params, config = encoder_case(pooling, style)
    assert param_count(config) + params["head.w"].size + params["head.b"].size <= 5000
    assert grad_check(build, params) < ENCODER_TOLERANCE


def test_dropout_only_with_rng():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "dropout_rate": 0.5})
    params = init_params(cfg, 0)
    ids, mask = np.array([[2, 5, 6, 3]]), np.ones((1, 4), dtype=bool)
    plain = [EncoderGraph(Graph(), params, cfg) for _ in range(2)]
    a, b = (eg.g.value(eg.encode(ids, mask)) for eg in plain)
    assert np.array_equal(a, b)
    eg = EncoderGraph(Graph(), params, cfg, np.random.default_rng(0))
    assert not np.allclose(eg.g.value(eg.encode(ids, mask)), a)


def test_overfit_repeating_corpus():
    words = ["p", "q", "r", "s", "t"]
    corpus = [tuple(words[(i + j) % 5] for j in range(8)) for i in range(64)]
    vocab = Vocab(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + words)
    cfg = EncoderConfig(vocab_size=len(vocab), max_len=12, d_model=16, n_heads=2, n_layers=1,
                        dropout_rate=0.0, objective_style="causal_lm")
    # 64 sentences / batch 16 = 4 steps per epoch, 50 epochs = 200 steps
    params = pretrain_lm(cfg, vocab, corpus, PhaseConfig(objective="lm_only", epochs=50, batch_size=16,
                                                         base_lr=1e-2, seed=0))
    ids, _ = lm_batch([("q", "r", "s", "t", "p", "q")], vocab, cfg)
    h = encode(params, cfg, ids[0])
    pred = vocab.decode(np.argmax(lm_logits(params, cfg, h), axis=1))
    # position 0 is [CLS], which is followed by any word; the rest continue the cycle
    assert pred[1:6] == ["r", "s", "t", "p", "q"]
