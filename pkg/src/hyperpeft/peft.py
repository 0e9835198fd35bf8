"""PEFT parameter containers: soft prefixes (flat or MLP-reparameterized)
and gated low-rank adapters, with initialization schemes and a binary file
format for moving generated parameters between runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import AttentionInjection, LoraDelta, ModelConfig
from .serialize import FormatError, read_container, write_container
from .tensor import Parameter, Tensor

KINDS = ("prefix_flat", "prefix_mlp", "lora")
LORA_TYPES = ("enc", "dec", "cross")
LORA_MAPS = ("q", "v")
PREFIX_HEADS = ("enc_k", "enc_v", "dec_k", "dec_v")

PEFT_MAGIC = b"HPFT"
INIT_STD = 0.02


class PeftError(ValueError):
    pass


@dataclass
class PeftConfig:
    kind: str
    prefix_len: int = 0  # P
    rank: int = 0  # R
    reparam_hidden: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise PeftError(f"unknown PEFT kind {self.kind!r}")
        if self.kind in ("prefix_flat", "prefix_mlp") and self.prefix_len < 0:
            raise PeftError("prefix_len must be >= 0")
        if self.kind == "lora" and self.rank < 1:
            raise PeftError("rank must be >= 1")
        if self.kind == "prefix_mlp" and self.reparam_hidden < 1:
            raise PeftError("reparam_hidden must be >= 1")


def mlp_head_forward(x: Tensor, head: dict[str, Tensor]) -> Tensor:
    """norm -> linear -> tanh -> linear, shared by the prefix
    reparameterization and the hypermodel parameter heads."""
    h = T.rms_norm(x, head["norm"])
    h = T.tanh(T.add(T.matmul(h, head["w1"]), head["b1"]))
    return T.add(T.matmul(h, head["w2"]), head["b2"])


def assemble_prefix(enc_k: Tensor, enc_v: Tensor, dec_k: Tensor, dec_v: Tensor) -> Tensor:
    """Combine four [P, L, H] head outputs into the canonical
    [L, 2, 2, P, H] prefix tensor (layer, enc/dec, key/value, token, hidden)."""
    parts = [T.transpose(t, (1, 0, 2)) for t in (enc_k, enc_v, dec_k, dec_v)]  # [L, P, H]
    kv_enc = T.stack(parts[:2], axis=0)  # [2, L, P, H]
    kv_dec = T.stack(parts[2:], axis=0)
    full = T.stack([kv_enc, kv_dec], axis=0)  # [2, 2, L, P, H]
    return T.transpose(full, (2, 0, 1, 3, 4))


class PrefixParams:
    """Flat prefixes of shape [L, 2, 2, P, H]."""

    kind = "prefix_flat"

    def __init__(self, tensor: Tensor, params: dict[str, Parameter] | None = None):
        if tensor.ndim != 5 or tensor.shape[1] != 2 or tensor.shape[2] != 2:
            raise PeftError(f"prefix tensor must be [L,2,2,P,H], got {tensor.shape}")
        self.tensor = tensor
        self._params = params or {}

    @classmethod
    def trainable(cls, data: np.ndarray) -> "PrefixParams":
        p = Parameter("prefix", data)
        return cls(p.tensor, {"prefix": p})

    @classmethod
    def rand(cls, config: PeftConfig, model_config: ModelConfig, rng) -> "PrefixParams":
        shape = (model_config.n_layers, 2, 2, config.prefix_len, model_config.d_model)
        return cls.trainable(rng.normal(0.0, INIT_STD, size=shape))

    @property
    def shape(self):
        return self.tensor.shape

    def parameters(self) -> dict[str, Parameter]:
        return self._params

    def resolve(self):
        return self

    def injection(self, stack: str, layer: int) -> AttentionInjection | None:
        if stack == "cross":
            return None
        s = 0 if stack == "enc" else 1
        return AttentionInjection(
            key_prefix=self.tensor[layer, s, 0],
            value_prefix=self.tensor[layer, s, 1],
        )

    def copy(self) -> "PrefixParams":
        return PrefixParams.trainable(self.tensor.data.copy())


class PrefixMlpReparam:
    """Trainable embeddings plus four MLP heads that generate flat prefixes.
    Optimizing this instead of the prefixes themselves is the stable way to
    train prefixes."""

    kind = "prefix_mlp"

    def __init__(self, embeddings: Parameter, heads: dict[str, dict[str, Parameter]],
                 n_layers: int, d_model: int):
        self.embeddings = embeddings
        self.heads = heads
        self.n_layers = n_layers
        self.d_model = d_model
        self.prefix_len = embeddings.data.shape[0] // 2

    @classmethod
    def rand(cls, config: PeftConfig, model_config: ModelConfig, rng,
             in_dim: int | None = None) -> "PrefixMlpReparam":
        l, h = model_config.n_layers, model_config.d_model
        d_in = in_dim if in_dim is not None else h
        hid = config.reparam_hidden
        emb = Parameter("peft.emb", rng.normal(0.0, INIT_STD, size=(2 * config.prefix_len, d_in)))
        heads = {}
        for hd in PREFIX_HEADS:
            heads[hd] = {
                "norm": Parameter(f"peft.{hd}.norm", np.ones(d_in)),
                "w1": Parameter(f"peft.{hd}.w1", rng.normal(0.0, INIT_STD, size=(d_in, hid))),
                "b1": Parameter(f"peft.{hd}.b1", np.zeros(hid)),
                "w2": Parameter(f"peft.{hd}.w2", rng.normal(0.0, INIT_STD, size=(hid, l * h))),
                "b2": Parameter(f"peft.{hd}.b2", np.zeros(l * h)),
            }
        return cls(emb, heads, l, h)

    def parameters(self) -> dict[str, Parameter]:
        out = {self.embeddings.name: self.embeddings}
        for head in self.heads.values():
            for param in head.values():
                out[param.name] = param
        return out

    def forward(self) -> PrefixParams:
        p, l, h = self.prefix_len, self.n_layers, self.d_model
        emb = self.embeddings.tensor
        outs = []
        for i, hd in enumerate(PREFIX_HEADS):
            rows = emb[:p] if i < 2 else emb[p:]
            head = {k: v.tensor for k, v in self.heads[hd].items()}
            flat = mlp_head_forward(rows, head)  # [P, L*H]
            outs.append(T.reshape(flat, (p, l, h)))
        return PrefixParams(assemble_prefix(*outs))

    def resolve(self):
        return self.forward()

    def copy(self) -> "PrefixMlpReparam":
        emb = Parameter(self.embeddings.name, self.embeddings.data.copy())
        heads = {
            hd: {k: Parameter(v.name, v.data.copy()) for k, v in head.items()}
            for hd, head in self.heads.items()
        }
        return PrefixMlpReparam(emb, heads, self.n_layers, self.d_model)


class LoraParams:
    """Gated low-rank Q/V deltas for encoder self-, decoder self-, and
    cross-attention.  Stored per (type, map) as stacked [L, R, H] tensors
    plus a raw gate vector of length L; the effective gate is tanh(raw)."""

    kind = "lora"

    def __init__(self, ups: dict, downs: dict, raw_gates: dict,
                 params: dict[str, Parameter] | None = None):
        self.ups = ups
        self.downs = downs
        self.raw_gates = raw_gates
        self._params = params or {}
        for key in _lora_keys():
            if self.ups[key].shape != self.downs[key].shape:
                raise PeftError(f"up/down shape mismatch for {key}")

    @classmethod
    def trainable(cls, ups: dict, downs: dict, raw_gates: dict) -> "LoraParams":
        params = {}

        def wrap(prefix, arrs):
            out = {}
            for (t, m), arr in arrs.items():
                p = Parameter(f"lora.{t}.{m}.{prefix}", arr)
                params[p.name] = p
                out[(t, m)] = p.tensor
            return out

        return cls(wrap("up", ups), wrap("down", downs), wrap("raw_gate", raw_gates), params)

    @classmethod
    def rand(cls, config: PeftConfig, model_config: ModelConfig, rng) -> "LoraParams":
        l, h, r = model_config.n_layers, model_config.d_model, config.rank
        ups, downs, gates = {}, {}, {}
        for key in _lora_keys():
            downs[key] = rng.normal(0.0, INIT_STD, size=(l, r, h))
            ups[key] = np.zeros((l, r, h))  # zero up-projection: adapter starts as a no-op
            gates[key] = np.zeros(l)
        return cls.trainable(ups, downs, gates)

    @property
    def n_layers(self):
        return next(iter(self.ups.values())).shape[0]

    def parameters(self) -> dict[str, Parameter]:
        return self._params

    def resolve(self):
        gates = {key: T.tanh(g) for key, g in self.raw_gates.items()}
        return _ResolvedLora(self, gates)

    def copy(self) -> "LoraParams":
        return LoraParams.trainable(
            {k: v.data.copy() for k, v in self.ups.items()},
            {k: v.data.copy() for k, v in self.downs.items()},
            {k: v.data.copy() for k, v in self.raw_gates.items()},
        )


class _ResolvedLora:
    def __init__(self, lora: LoraParams, gates: dict):
        self.lora = lora
        self.gates = gates

    def injection(self, stack: str, layer: int) -> AttentionInjection:
        def delta(m):
            key = (stack, m)
            return LoraDelta(
                down=self.lora.downs[key][layer],
                up=self.lora.ups[key][layer],
                gate=self.gates[key][layer],
            )

        return AttentionInjection(lora_q=delta("q"), lora_v=delta("v"))


def _lora_keys():
    return [(t, m) for t in LORA_TYPES for m in LORA_MAPS]


def init_peft(config: PeftConfig, scheme: str, rng, model_config: ModelConfig,
              source=None, hyper=None, fewshot_tokens=None):
    """Rand / Shared / Hyper initialization of a PEFT container."""
    config.validate()
    scheme = scheme.lower()
    if scheme == "rand":
        if config.kind == "prefix_flat":
            return PrefixParams.rand(config, model_config, rng)
        if config.kind == "prefix_mlp":
            return PrefixMlpReparam.rand(config, model_config, rng)
        return LoraParams.rand(config, model_config, rng)
    if scheme == "shared":
        if source is None:
            raise PeftError("shared init requires a source artifact")
        if source.kind != config.kind:
            raise PeftError(f"shared source kind {source.kind} != {config.kind}")
        return source.copy()
    if scheme == "hyper":
        if hyper is None or fewshot_tokens is None:
            raise PeftError("hyper init requires a hypermodel and few-shot tokens")
        if hyper.config.target.kind == "lora" and config.kind != "lora":
            raise PeftError("hypermodel generates LoRA, not prefixes")
        if hyper.config.target.kind != "lora" and config.kind == "lora":
            raise PeftError("hypermodel generates prefixes, not LoRA")
        if config.kind == "prefix_mlp":
            return hyper.init_prefix_mlp(fewshot_tokens)
        generated = hyper.generate(fewshot_tokens)
        if config.kind == "prefix_flat":
            return PrefixParams.trainable(generated.tensor.data.copy())
        return LoraParams.trainable(
            {k: v.data.copy() for k, v in generated.ups.items()},
            {k: v.data.copy() for k, v in generated.downs.items()},
            {k: v.data.copy() for k, v in generated.raw_gates.items()},
        )
    raise PeftError(f"unknown init scheme {scheme!r}")


def flatten_reparam(reparam: PrefixMlpReparam) -> PrefixParams:
    """Run the reparameterization forward and detach the result into a
    standalone trainable prefix tensor."""
    return PrefixParams.trainable(reparam.forward().tensor.data.copy())


def peft_param_count(config: PeftConfig, model_config: ModelConfig) -> int:
    config.validate()
    l, h = model_config.n_layers, model_config.d_model
    if config.kind == "prefix_flat":
        return l * 2 * 2 * config.prefix_len * h
    if config.kind == "prefix_mlp":
        hid = config.reparam_hidden
        per_head = h + h * hid + hid + hid * l * h + l * h
        return 2 * config.prefix_len * h + 4 * per_head
    r = config.rank
    return 6 * l * 2 * r * h + 6 * l


def save_peft(params, path) -> None:
    if isinstance(params, PrefixParams):
        l, _, _, p, h = params.shape
        meta = {"kind": params.kind, "L": l, "H": h, "P": p}
        tensors = {"prefix": params.tensor.data}
    elif isinstance(params, PrefixMlpReparam):
        meta = {"kind": params.kind, "L": params.n_layers, "H": params.d_model,
                "P": params.prefix_len}
        tensors = {"embeddings": params.embeddings.data}
        for hd, head in params.heads.items():
            for k, v in head.items():
                tensors[f"head.{hd}.{k}"] = v.data
    elif isinstance(params, LoraParams):
        first = next(iter(params.ups.values()))
        meta = {"kind": params.kind, "L": first.shape[0], "H": first.shape[2],
                "R": first.shape[1]}
        tensors = {}
        for (t, m) in _lora_keys():
            tensors[f"{t}.{m}.up"] = params.ups[(t, m)].data
            tensors[f"{t}.{m}.down"] = params.downs[(t, m)].data
            tensors[f"{t}.{m}.raw_gate"] = params.raw_gates[(t, m)].data
    else:
        raise PeftError(f"cannot serialize {type(params).__name__}")
    write_container(path, PEFT_MAGIC, meta, tensors, dtype="f32")


def load_peft(path, expect_kind: str | None = None):
    header, tensors = read_container(path, PEFT_MAGIC)
    kind = header.get("kind")
    if kind not in KINDS:
        raise FormatError(f"unknown PEFT kind in file: {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise PeftError(f"file holds {kind}, expected {expect_kind}")
    if kind == "prefix_flat":
        return PrefixParams.trainable(tensors["prefix"])
    if kind == "prefix_mlp":
        emb = Parameter("peft.emb", tensors["embeddings"])
        heads = {}
        for hd in PREFIX_HEADS:
            heads[hd] = {
                k: Parameter(f"peft.{hd}.{k}", tensors[f"head.{hd}.{k}"])
                for k in ("norm", "w1", "b1", "w2", "b2")
            }
        return PrefixMlpReparam(emb, heads, header["L"], header["H"])
    ups, downs, gates = {}, {}, {}
    for key in _lora_keys():
        t, m = key
        ups[key] = tensors[f"{t}.{m}.up"]
        downs[key] = tensors[f"{t}.{m}.down"]
        gates[key] = tensors[f"{t}.{m}.raw_gate"]
    return LoraParams.trainable(ups, downs, gates)
