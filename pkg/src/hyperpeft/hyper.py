"""The hypermodel: an encoder-decoder backbone that reads few-shot tokens,
a fixed set of learned decoder queries, and MLP heads that emit prefix or
LoRA parameters for the frozen downstream model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import EncoderDecoder, ModelConfig
from .peft import (LoraParams, PeftConfig, PeftError, PrefixMlpReparam,
                   PrefixParams, assemble_prefix, mlp_head_forward,
                   _lora_keys)
from .tensor import Parameter, Tensor

INIT_STD = 0.02
# Raw gates start small-but-nonzero: generated up/down matrices are zero at
# init (zeroed head output layers), so the adapter is still an exact no-op,
# but a zero gate on top of zero up/down would be a stationary saddle where
# neither the gates nor the generator heads ever receive gradient.
GATE_INIT = 0.5


@dataclass
class HyperModelConfig:
    backbone: ModelConfig
    target: PeftConfig
    downstream: ModelConfig

    def validate(self):
        self.backbone.validate()
        self.target.validate()
        self.downstream.validate()
        if self.backbone.decoder_causal:
            raise PeftError("hypermodel decoder must be non-causal")

    @property
    def n_queries(self) -> int:
        if self.target.kind == "lora":
            return 3 * self.downstream.n_layers
        return 2 * self.target.prefix_len


class HyperModel:
    def __init__(self, config: HyperModelConfig, rng):
        config.validate()
        self.config = config
        self.backbone = EncoderDecoder(config.backbone, rng, lm_head=False, name="hyper")
        hb = config.backbone.d_model
        ld, hd = config.downstream.n_layers, config.downstream.d_model

        self.params: dict[str, Parameter] = {}
        for pname, param in self.backbone.params.items():
            param.name = f"hyper.backbone.{pname}"
            self.params[param.name] = param

        def p(pname, data):
            param = Parameter(pname, data)
            self.params[pname] = param
            return param

        q = config.n_queries
        self.queries = p("hyper.queries", rng.normal(0.0, INIT_STD, size=(q, hb)))

        self.heads: dict[str, dict[str, Parameter]] = {}
        if config.target.kind == "lora":
            out_dim = 2 * config.target.rank * hd
            head_names = [f"{t}_{m}" for t, m in _lora_keys()]
        else:
            out_dim = ld * hd
            head_names = ["enc_k", "enc_v", "dec_k", "dec_v"]
        for hn in head_names:
            # final linear zero-initialized: generated PEFT starts as a
            # minimal perturbation
            b2 = np.zeros(out_dim)
            if config.target.kind == "lora":
                # the down half of each head output starts random, the up
                # half zero — like standard LoRA init, the generated delta
                # is an exact no-op, yet gradients reach the up generators
                # (grad(up) scales with down; all-zero down and up would
                # leave every LoRA parameter at a gradient-free saddle)
                half = config.target.rank * hd
                b2[half:] = rng.normal(0.0, INIT_STD, size=half)
            self.heads[hn] = {
                "norm": p(f"hyper.head.{hn}.norm", np.ones(hb)),
                "w1": p(f"hyper.head.{hn}.w1", rng.normal(0.0, INIT_STD, size=(hb, hb))),
                "b1": p(f"hyper.head.{hn}.b1", np.zeros(hb)),
                "w2": p(f"hyper.head.{hn}.w2", np.zeros((hb, out_dim))),
                "b2": p(f"hyper.head.{hn}.b2", b2),
            }

        self.raw_gates: dict[tuple, Parameter] = {}
        if config.target.kind == "lora":
            for key in _lora_keys():
                t, m = key
                self.raw_gates[key] = p(f"hyper.gate.{t}.{m}", np.full(ld, GATE_INIT))

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.tensor.grad = None

    def param_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for pname in sorted(self.params):
            h.update(pname.encode())
            h.update(self.params[pname].data.tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {pname: param.data.copy() for pname, param in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for pname, arr in snap.items():
            self.params[pname].tensor.data = np.asarray(arr, dtype=T.get_dtype()).copy()

    def _head_tensors(self, hn: str) -> dict[str, Tensor]:
        return {k: v.tensor for k, v in self.heads[hn].items()}

    # --- generation --------------------------------------------------------

    def encode_fewshot(self, fewshot_tokens) -> Tensor:
        """Encoder over the few-shot tokens, non-causal decoder over the
        learned queries; returns one hidden vector per query."""
        enc = self.backbone.encode(fewshot_tokens)
        return self.backbone.decoder_hidden(self.queries.tensor, enc, causal=False)

    def generate(self, fewshot_tokens):
        if self.config.target.kind == "lora":
            return self.generate_lora(fewshot_tokens)
        return self.generate_prefix(fewshot_tokens)

    def generate_prefix(self, fewshot_tokens) -> PrefixParams:
        if self.config.target.kind == "lora":
            raise PeftError("this hypermodel targets LoRA")
        p = self.config.target.prefix_len
        ld, hd = self.config.downstream.n_layers, self.config.downstream.d_model
        hid = self.encode_fewshot(fewshot_tokens)  # [2P, Hb]
        outs = []
        for hn in ("enc_k", "enc_v", "dec_k", "dec_v"):
            rows = hid[:p] if hn.startswith("enc") else hid[p:]
            flat = mlp_head_forward(rows, self._head_tensors(hn))  # [P, L*H]
            outs.append(T.reshape(flat, (p, ld, hd)))
        return PrefixParams(assemble_prefix(*outs))

    def generate_lora(self, fewshot_tokens) -> LoraParams:
        if self.config.target.kind != "lora":
            raise PeftError("this hypermodel targets prefixes")
        ld = self.config.downstream.n_layers
        r, hd = self.config.target.rank, self.config.downstream.d_model
        hid = self.encode_fewshot(fewshot_tokens)  # [3L, Hb]
        reprs = {"enc": hid[:ld], "dec": hid[ld:2 * ld], "cross": hid[2 * ld:]}
        ups, downs, gates = {}, {}, {}
        for key in _lora_keys():
            t, m = key
            flat = mlp_head_forward(reprs[t], self._head_tensors(f"{t}_{m}"))  # [L, 2RH]
            cube = T.reshape(flat, (ld, 2, r, hd))
            ups[key] = cube[:, 0]  # [L, R, H]
            downs[key] = cube[:, 1]
            gates[key] = self.raw_gates[key].tensor
        return LoraParams(ups, downs, gates)

    def init_prefix_mlp(self, fewshot_tokens) -> PrefixMlpReparam:
        """Hyper initialization for MLP-reparameterized prefix tuning: the
        decoder outputs become the trainable embeddings and copies of the
        parameter heads become the reparameterization MLPs."""
        if self.config.target.kind == "lora":
            raise PeftError("this hypermodel targets LoRA")
        hid = self.encode_fewshot(fewshot_tokens)
        emb = Parameter("peft.emb", hid.data.copy())
        heads = {}
        for hn in ("enc_k", "enc_v", "dec_k", "dec_v"):
            heads[hn] = {
                k: Parameter(f"peft.{hn}.{k}", v.data.copy())
                for k, v in self.heads[hn].items()
            }
        return PrefixMlpReparam(emb, heads, self.config.downstream.n_layers,
                                self.config.downstream.d_model)
