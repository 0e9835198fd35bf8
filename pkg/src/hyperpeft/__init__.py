"""Desk-scale hypertuning: a hypermodel that reads few-shot examples and
emits prefix or LoRA parameters for a frozen encoder-decoder LM."""

from .model import EncoderDecoder, ModelConfig, seq_loss
from .hyper import HyperModel, HyperModelConfig
from .peft import (LoraParams, PeftConfig, PrefixMlpReparam, PrefixParams,
                   flatten_reparam, init_peft, load_peft, peft_param_count,
                   save_peft)
from .train import Adam, TrainConfig, hyperpretrain, lm_warmup, mtf_train, peft_finetune

__all__ = [
    "Adam", "EncoderDecoder", "HyperModel", "HyperModelConfig", "LoraParams",
    "ModelConfig", "PeftConfig", "PrefixMlpReparam", "PrefixParams",
    "TrainConfig", "flatten_reparam", "hyperpretrain", "init_peft",
    "lm_warmup", "load_peft", "mtf_train", "peft_finetune",
    "peft_param_count", "save_peft", "seq_loss",
]

__version__ = "0.1.0"
