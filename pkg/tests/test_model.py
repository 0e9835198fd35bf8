"""Unit tests for the encoder-decoder model and its PEFT injection points."""

import numpy as np
import pytest

import hyperpeft.tensor as T
from hyperpeft.model import (AttentionInjection, EncoderDecoder, LoraDelta,
                             ModelConfig, attention, seq_loss)
from hyperpeft.peft import PeftConfig, PrefixParams, init_peft
from hyperpeft.tensor import ShapeError, Tensor


def desk_config(vocab=64, **kw):
    base = dict(n_layers=2, d_model=32, n_heads=2, d_ff=64, vocab_size=vocab,
                max_src_len=24, max_tgt_len=16, decoder_causal=True)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def model():
    return EncoderDecoder(desk_config(), np.random.default_rng(0))


def rand_tokens(rng, n, vocab=64):
    return [int(t) for t in rng.integers(0, vocab, size=n)]


def test_config_validation():
    with pytest.raises(ValueError):
        desk_config(n_layers=0).validate()
    with pytest.raises(ValueError):
        desk_config(d_model=30, n_heads=4).validate()
    with pytest.raises(ValueError):
        desk_config(max_src_len=0).validate()


# --- attention-level no-op and shape behavior -----------------------------


def _attn_weights(rng, h=32):
    return [Tensor(rng.normal(size=(h, h))) for _ in range(4)]


def test_attention_noop_injection_bitwise():
    rng = np.random.default_rng(1)
    w = _attn_weights(rng)
    x = Tensor(rng.normal(size=(5, 32)))
    base = attention(x, x, w, n_heads=2, causal=True)
    injected = attention(x, x, w, n_heads=2, causal=True,
                         inj=AttentionInjection())
    np.testing.assert_array_equal(base.data, injected.data)


def test_attention_lora_zero_gate_bitwise():
    rng = np.random.default_rng(2)
    w = _attn_weights(rng)
    x = Tensor(rng.normal(size=(5, 32)))
    delta = LoraDelta(down=Tensor(rng.normal(size=(4, 32))),
                      up=Tensor(rng.normal(size=(4, 32))),
                      gate=Tensor(np.tanh(0.0)))
    base = attention(x, x, w, n_heads=2, causal=True)
    out = attention(x, x, w, n_heads=2, causal=True,
                    inj=AttentionInjection(lora_q=delta, lora_v=delta))
    np.testing.assert_array_equal(base.data, out.data)


def test_attention_prefix_changes_output_and_prefix_never_masked():
    rng = np.random.default_rng(3)
    w = _attn_weights(rng)
    x = Tensor(rng.normal(size=(5, 32)))
    inj = AttentionInjection(key_prefix=Tensor(rng.normal(size=(8, 32))),
                             value_prefix=Tensor(rng.normal(size=(8, 32))))
    base = attention(x, x, w, n_heads=2, causal=True)
    out = attention(x, x, w, n_heads=2, causal=True, inj=inj)
    assert out.shape == (5, 32)
    # even the first (most-masked) position must see the prefix
    assert not np.allclose(base.data[0], out.data[0])


def test_attention_prefix_hidden_mismatch_raises():
    rng = np.random.default_rng(4)
    w = _attn_weights(rng)
    x = Tensor(rng.normal(size=(5, 32)))
    inj = AttentionInjection(key_prefix=Tensor(rng.normal(size=(8, 16))),
                             value_prefix=Tensor(rng.normal(size=(8, 16))))
    with pytest.raises(ShapeError):
        attention(x, x, w, n_heads=2, causal=True, inj=inj)


def test_attention_key_prefix_requires_value_prefix():
    rng = np.random.default_rng(5)
    w = _attn_weights(rng)
    x = Tensor(rng.normal(size=(5, 32)))
    inj = AttentionInjection(key_prefix=Tensor(rng.normal(size=(8, 32))))
    with pytest.raises(ShapeError):
        attention(x, x, w, n_heads=2, causal=True, inj=inj)


# --- encode/decode ---------------------------------------------------------


def test_encode_output_shape(model):
    out = model.encode(rand_tokens(np.random.default_rng(6), 7))
    assert out.shape == (7, 32)


def test_encode_rejects_bad_tokens(model):
    with pytest.raises(ShapeError):
        model.encode([])
    with pytest.raises(ShapeError):
        model.encode([999])
    with pytest.raises(ShapeError):
        model.encode(list(range(25)))  # exceeds max_src_len


def test_decode_logits_shape(model):
    rng = np.random.default_rng(7)
    enc = model.encode(rand_tokens(rng, 6))
    logits = model.decode(rand_tokens(rng, 4), enc)
    assert logits.shape == (4, 64)


def test_causal_decode_ignores_future_tokens(model):
    rng = np.random.default_rng(8)
    enc = model.encode(rand_tokens(rng, 6))
    tokens = rand_tokens(rng, 5)
    base = model.decode(tokens, enc).data
    perturbed = list(tokens)
    perturbed[4] = (perturbed[4] + 1) % 64
    out = model.decode(perturbed, enc).data
    np.testing.assert_array_equal(base[:4], out[:4])
    assert not np.allclose(base[4], out[4])


def test_noncausal_decode_sees_future_tokens():
    model = EncoderDecoder(desk_config(decoder_causal=False),
                           np.random.default_rng(0))
    rng = np.random.default_rng(9)
    enc = model.encode(rand_tokens(rng, 6))
    tokens = rand_tokens(rng, 5)
    base = model.decode(tokens, enc).data
    perturbed = list(tokens)
    perturbed[4] = (perturbed[4] + 1) % 64
    out = model.decode(perturbed, enc).data
    assert not np.allclose(base[0], out[0])


# --- model-level no-op equivalences ----------------------------------------


def test_rand_lora_is_exact_noop(model):
    rng = np.random.default_rng(10)
    peft_cfg = PeftConfig(kind="lora", prefix_len=0, rank=4, reparam_hidden=8)
    peft = init_peft(peft_cfg, "rand", rng, model.config)
    tokens = rand_tokens(rng, 6)
    base_enc = model.encode(tokens)
    lora_enc = model.encode(tokens, peft)
    np.testing.assert_array_equal(base_enc.data, lora_enc.data)
    dec_tokens = rand_tokens(rng, 4)
    np.testing.assert_array_equal(model.decode(dec_tokens, base_enc).data,
                                  model.decode(dec_tokens, lora_enc, peft).data)


def test_zero_length_prefix_is_exact_noop(model):
    rng = np.random.default_rng(11)
    peft = PrefixParams(Tensor(np.zeros((2, 2, 2, 0, 32)), requires_grad=True))
    tokens = rand_tokens(rng, 6)
    np.testing.assert_array_equal(model.encode(tokens).data,
                                  model.encode(tokens, peft).data)


# --- seq_loss ---------------------------------------------------------------


def test_seq_loss_nonnegative_and_deterministic():
    model = EncoderDecoder(desk_config(vocab=263), np.random.default_rng(0))
    rng = np.random.default_rng(12)
    src, tgt = rand_tokens(rng, 6), rand_tokens(rng, 4)
    a = seq_loss(model, src, tgt)
    b = seq_loss(model, src, tgt)
    assert float(a.data) >= 0.0
    assert float(a.data) == float(b.data)


def test_seq_loss_cached_peft_equals_recompute():
    model = EncoderDecoder(desk_config(vocab=263), np.random.default_rng(0))
    rng = np.random.default_rng(13)
    peft_cfg = PeftConfig(kind="prefix_flat", prefix_len=4, rank=4,
                          reparam_hidden=8)
    peft = init_peft(peft_cfg, "rand", rng, model.config)
    src, tgt = rand_tokens(rng, 6), rand_tokens(rng, 4)
    first = float(seq_loss(model, src, tgt, peft).data)
    for _ in range(3):
        assert float(seq_loss(model, src, tgt, peft).data) == first


def test_freeze_marks_every_parameter(model):
    model.freeze()
    assert all(p.frozen for p in model.parameters().values())


def test_param_hash_tracks_changes(model):
    h0 = model.param_hash()
    assert model.param_hash() == h0
    model.params["lm_head"].tensor.data = model.params["lm_head"].data + 1.0
    assert model.param_hash() != h0


def test_snapshot_roundtrip(model):
    snap = model.snapshot()
    h0 = model.param_hash()
    model.params["emb.tok"].tensor.data = model.params["emb.tok"].data * 2.0
    assert model.param_hash() != h0
    model.load_snapshot(snap)
    assert model.param_hash() == h0


def test_full_model_gradcheck_desk_config():
    """Analytic gradients through the whole encoder-decoder match finite
    differences at rel err < 1e-4 (double precision)."""
    model = EncoderDecoder(desk_config(vocab=64), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    src, tgt = rand_tokens(rng, 5), rand_tokens(rng, 4)

    def f():
        logits = model.decode(tgt, model.encode(src))
        return T.cross_entropy(logits, tgt, pad_id=-1)

    err = T.grad_check(f, list(model.parameters().values()),
                       rng=np.random.default_rng(2), max_coords_per_param=3)
    assert err < 1e-4
