"""T5-style encoder-decoder with prefix and LoRA injection points.

Blocks are pre-norm RMS-normalized with residual connections and a plain
ReLU FFN.  Positions use learned absolute embeddings.  Prefixes attach to
encoder and decoder self-attention; LoRA attaches to the Q and V maps of
self- and cross-attention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS, PAD
from .tensor import Parameter, ShapeError, Tensor

MASK_NEG = -1e9


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_src_len: int
    max_tgt_len: int
    decoder_causal: bool = True

    def validate(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_src_len < 1 or self.max_tgt_len < 1:
            raise ValueError("max lengths must be >= 1")


@dataclass
class LoraDelta:
    down: Tensor  # [R, H]
    up: Tensor  # [R, H]
    gate: Tensor  # scalar, already tanh-squashed


@dataclass
class AttentionInjection:
    key_prefix: Tensor | None = None  # [P, H]
    value_prefix: Tensor | None = None  # [P, H]
    lora_q: LoraDelta | None = None
    lora_v: LoraDelta | None = None


def _lora_apply(x: Tensor, delta: LoraDelta) -> Tensor:
    low = T.matmul(x, T.transpose(delta.down))  # [T, R]
    return T.mul(T.matmul(low, delta.up), delta.gate)


def attention(x_q: Tensor, x_kv: Tensor, weights, n_heads: int, causal: bool,
              inj: AttentionInjection | None = None) -> Tensor:
    wq, wk, wv, wo = weights
    h = wq.shape[1]
    if x_q.shape[-1] != wq.shape[0]:
        raise ShapeError(f"attention: query dim {x_q.shape} vs W_q {wq.shape}")
    q = T.matmul(x_q, wq)
    k = T.matmul(x_kv, wk)
    v = T.matmul(x_kv, wv)
    if inj is not None and inj.lora_q is not None:
        q = T.add(q, _lora_apply(x_q, inj.lora_q))
    if inj is not None and inj.lora_v is not None:
        v = T.add(v, _lora_apply(x_kv, inj.lora_v))
    p = 0
    if inj is not None and inj.key_prefix is not None:
        if inj.value_prefix is None:
            raise ShapeError("key prefix without value prefix")
        if inj.key_prefix.shape[-1] != h:
            raise ShapeError(f"prefix hidden {inj.key_prefix.shape} vs {h}")
        p = inj.key_prefix.shape[0]
        k = T.concat([inj.key_prefix, k], axis=0)
        v = T.concat([inj.value_prefix, v], axis=0)

    tq, tk = q.shape[0], k.shape[0]
    mask = None
    if causal:
        # prefix positions are never masked
        real = np.arange(tk - p)
        m = np.zeros((tq, tk))
        m[:, p:] = np.where(real[None, :] > np.arange(tq)[:, None], MASK_NEG, 0.0)
        mask = m

    dh = h // n_heads
    scale = dh ** -0.5
    heads = []
    for i in range(n_heads):
        sl = (slice(None), slice(i * dh, (i + 1) * dh))
        qh, kh, vh = q[sl], k[sl], v[sl]
        scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        if mask is not None:
            scores = T.add(scores, mask)
        att = T.softmax(scores, axis=-1)
        heads.append(T.matmul(att, vh))
    merged = heads[0] if n_heads == 1 else T.concat(heads, axis=1)
    return T.matmul(merged, wo)


def _init_linear(rng, n_in, n_out, std=0.02):
    return rng.normal(0.0, std, size=(n_in, n_out))


class EncoderDecoder:
    """Shared backbone for the downstream model and the hypermodel.  The
    downstream model owns an LM head; the hypermodel backbone exposes raw
    decoder hidden states instead."""

    def __init__(self, config: ModelConfig, rng, lm_head: bool = True, name: str = "model"):
        config.validate()
        self.config = config
        self.name = name
        self.has_lm_head = lm_head
        self.params: dict[str, Parameter] = {}
        c = config

        def p(pname, data):
            param = Parameter(pname, data)
            self.params[pname] = param
            return param

        p("emb.tok", _init_linear(rng, c.vocab_size, c.d_model))
        p("emb.pos_enc", _init_linear(rng, c.max_src_len, c.d_model))
        p("emb.pos_dec", _init_linear(rng, c.max_tgt_len, c.d_model))
        for i in range(c.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                p(f"enc.{i}.attn.{w}", _init_linear(rng, c.d_model, c.d_model))
            p(f"enc.{i}.norm_attn", np.ones(c.d_model))
            p(f"enc.{i}.ffn.w1", _init_linear(rng, c.d_model, c.d_ff))
            p(f"enc.{i}.ffn.w2", _init_linear(rng, c.d_ff, c.d_model))
            p(f"enc.{i}.norm_ffn", np.ones(c.d_model))
        p("enc.final_norm", np.ones(c.d_model))
        for i in range(c.n_layers):
            for blk in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    p(f"dec.{i}.{blk}.{w}", _init_linear(rng, c.d_model, c.d_model))
            p(f"dec.{i}.norm_self", np.ones(c.d_model))
            p(f"dec.{i}.norm_cross", np.ones(c.d_model))
            p(f"dec.{i}.ffn.w1", _init_linear(rng, c.d_model, c.d_ff))
            p(f"dec.{i}.ffn.w2", _init_linear(rng, c.d_ff, c.d_model))
            p(f"dec.{i}.norm_ffn", np.ones(c.d_model))
        p("dec.final_norm", np.ones(c.d_model))
        if lm_head:
            p("lm_head", _init_linear(rng, c.d_model, c.vocab_size))

    def _t(self, pname: str) -> Tensor:
        return self.params[pname].tensor

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def freeze(self) -> None:
        for param in self.params.values():
            param.frozen = True

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.tensor.grad = None

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for pname in sorted(self.params):
            h.update(pname.encode())
            h.update(self.params[pname].data.tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {pname: param.data.copy() for pname, param in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for pname, arr in snap.items():
            param = self.params[pname]
            if param.data.shape != arr.shape:
                raise ShapeError(f"snapshot shape mismatch for {pname}")
            param.tensor.data = np.asarray(arr, dtype=T.get_dtype()).copy()

    # --- forward passes ---------------------------------------------------

    def _check_tokens(self, tokens, limit):
        tokens = [int(t) for t in tokens]
        if len(tokens) == 0:
            raise ShapeError("empty token sequence")
        if len(tokens) > limit:
            raise ShapeError(f"sequence length {len(tokens)} exceeds {limit}")
        if any(t < 0 or t >= self.config.vocab_size for t in tokens):
            raise ShapeError("token id out of range")
        return tokens

    def _ffn(self, x, prefix):
        h = T.matmul(x, self._t(f"{prefix}.ffn.w1"))
        return T.matmul(T.relu(h), self._t(f"{prefix}.ffn.w2"))

    def encode(self, tokens, peft=None) -> Tensor:
        resolved = peft.resolve() if peft is not None else None
        tokens = self._check_tokens(tokens, self.config.max_src_len)
        return self._encode_resolved(tokens, resolved)

    def _encode_resolved(self, tokens, resolved) -> Tensor:
        n = len(tokens)
        x = T.add(T.embedding(self._t("emb.tok"), tokens),
                  self._t("emb.pos_enc")[:n])
        for i in range(self.config.n_layers):
            inj = resolved.injection("enc", i) if resolved is not None else None
            normed = T.rms_norm(x, self._t(f"enc.{i}.norm_attn"))
            x = T.add(x, attention(normed, normed,
                                   [self._t(f"enc.{i}.attn.{w}") for w in ("wq", "wk", "wv", "wo")],
                                   self.config.n_heads, causal=False, inj=inj))
            x = T.add(x, self._ffn(T.rms_norm(x, self._t(f"enc.{i}.norm_ffn")), f"enc.{i}"))
        return T.rms_norm(x, self._t("enc.final_norm"))

    def decoder_hidden(self, x: Tensor, enc_out: Tensor, resolved=None,
                       causal: bool | None = None) -> Tensor:
        if causal is None:
            causal = self.config.decoder_causal
        for i in range(self.config.n_layers):
            self_inj = resolved.injection("dec", i) if resolved is not None else None
            cross_inj = resolved.injection("cross", i) if resolved is not None else None
            normed = T.rms_norm(x, self._t(f"dec.{i}.norm_self"))
            x = T.add(x, attention(normed, normed,
                                   [self._t(f"dec.{i}.self.{w}") for w in ("wq", "wk", "wv", "wo")],
                                   self.config.n_heads, causal=causal, inj=self_inj))
            normed = T.rms_norm(x, self._t(f"dec.{i}.norm_cross"))
            x = T.add(x, attention(normed, enc_out,
                                   [self._t(f"dec.{i}.cross.{w}") for w in ("wq", "wk", "wv", "wo")],
                                   self.config.n_heads, causal=False, inj=cross_inj))
            x = T.add(x, self._ffn(T.rms_norm(x, self._t(f"dec.{i}.norm_ffn")), f"dec.{i}"))
        return T.rms_norm(x, self._t("dec.final_norm"))

    def decode(self, tokens, enc_out: Tensor, peft=None, causal: bool | None = None) -> Tensor:
        if not self.has_lm_head:
            raise ShapeError("decode requires an LM head")
        resolved = peft.resolve() if peft is not None else None
        tokens = self._check_tokens(tokens, self.config.max_tgt_len)
        return self._decode_resolved(tokens, enc_out, resolved, causal)

    def _decode_resolved(self, tokens, enc_out, resolved, causal=None) -> Tensor:
        n = len(tokens)
        x = T.add(T.embedding(self._t("emb.tok"), tokens),
                  self._t("emb.pos_dec")[:n])
        hidden = self.decoder_hidden(x, enc_out, resolved, causal)
        return T.matmul(hidden, self._t("lm_head"))


def seq_loss(model: EncoderDecoder, src_tokens, tgt_tokens, peft=None) -> Tensor:
    """Teacher-forced cross-entropy over target tokens, shifted by one with
    a leading BOS."""
    resolved = peft.resolve() if peft is not None else None
    src = model._check_tokens(src_tokens, model.config.max_src_len)
    tgt = model._check_tokens(tgt_tokens, model.config.max_tgt_len)
    enc = model._encode_resolved(src, resolved)
    dec_in = [BOS] + tgt[:-1]
    logits = model._decode_resolved(dec_in, enc, resolved)
    return T.cross_entropy(logits, tgt, PAD)
