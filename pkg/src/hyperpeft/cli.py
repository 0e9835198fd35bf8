"""Command-line surface: JSON config plus dot-path flag overrides, driving
data synthesis, hyperpretraining, multi-task fine-tuning, adapter
generation, PEFT fine-tuning, evaluation, and gradient checking."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, optimizer_state_from, save_checkpoint
from .data import (DESK_CACLM_LENS, FewShotSet, load_tasks_jsonl,
                   save_tasks_jsonl, synth_corpus, synth_tasks)
from .evals import eval_task, write_report
from .hyper import HyperModel, HyperModelConfig
from .model import EncoderDecoder, ModelConfig, seq_loss
from .peft import PeftConfig, load_peft, save_peft
from .train import (Adam, NonFiniteLossError, TrainConfig, hyperpretrain,
                    lm_warmup, mtf_train, peft_finetune, write_history_csv)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NAN = 3


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def thread_limit() -> int:
    """Worker cap from HYPERPEFT_THREADS (default 1; compute here is
    single-threaded, so this caps rather than creates parallelism)."""
    raw = os.environ.get("HYPERPEFT_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("HYPERPEFT_THREADS", f"must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("HYPERPEFT_THREADS", "must be >= 1")
    return n


def default_config() -> dict:
    return {
        "model": {
            "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64,
            "vocab_size": 263, "max_src_len": 96, "max_tgt_len": 32,
            "decoder_causal": True,
        },
        "hyper": {
            "n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64,
            "vocab_size": 263, "max_src_len": 256, "max_tgt_len": 32,
            "decoder_causal": False,
        },
        "peft": {"kind": "prefix_flat", "prefix_len": 8, "rank": 4,
                 "reparam_hidden": 32},
        "train": {
            "steps": 200, "batch_size": 8, "lr": 1e-3, "seed": 0, "k_max": 16,
            "max_len_hyper": 256, "max_len_down": 96, "max_len_tgt": 24,
            "mode": "HyperFrozen", "precision": "float64", "clip_norm": 1.0,
            "checkpoint_fracs": [0.0, 0.25, 0.5, 1.0],
            "caclm_lens": list(DESK_CACLM_LENS),
            "warmup_steps": 300,
            "start_step": 0, "stop_step": None,
        },
        "data": {"corpus_seed": 0, "corpus_tokens": 20000, "task_seed": 0,
                 "task_file": None},
        "io": {"out_dir": "runs/out", "downstream_ckpt": None,
               "hyper_ckpt": None, "adapter": None, "task_name": None,
               "k": 16, "eval_seed": 0, "held_out": False},
    }


def _set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(dotted, "unknown config path")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown config field")
    node[parts[-1]] = value


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("config", str(e)) from e
        for section, values in user.items():
            if section not in cfg:
                raise ConfigError(section, "unknown config section")
            if not isinstance(values, dict):
                raise ConfigError(section, "section must be an object")
            for k, v in values.items():
                _set_path(cfg, f"{section}.{k}", v)
    for ov in overrides:
        if not ov.startswith("--") or "=" not in ov:
            raise ConfigError(ov, "overrides look like --section.field=value")
        key, _, raw = ov[2:].partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        model_config(cfg).validate()
        hyper_backbone_config(cfg).validate()
    except ValueError as e:
        raise ConfigError("model", str(e)) from e
    try:
        peft_config(cfg).validate()
    except ValueError as e:
        raise ConfigError("peft", str(e)) from e
    try:
        train_config(cfg).validate()
    except ValueError as e:
        raise ConfigError("train", str(e)) from e
    if cfg["hyper"]["decoder_causal"]:
        raise ConfigError("hyper.decoder_causal", "hypermodel decoder must be non-causal")
    if cfg["model"]["vocab_size"] != cfg["hyper"]["vocab_size"]:
        raise ConfigError("hyper.vocab_size", "must match model.vocab_size")


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def hyper_backbone_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["hyper"])


def peft_config(cfg: dict) -> PeftConfig:
    return PeftConfig(**cfg["peft"])


def train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg["train"])
    tc.pop("warmup_steps", None)
    tc.pop("start_step", None)
    tc.pop("stop_step", None)
    tc["checkpoint_fracs"] = tuple(tc["checkpoint_fracs"])
    tc["caclm_lens"] = tuple(tc["caclm_lens"])
    return TrainConfig(**tc)


def _span(cfg: dict) -> tuple[int, int | None]:
    """Optional partial-run bounds for interruptible training."""
    start = int(cfg["train"].get("start_step", 0) or 0)
    stop = cfg["train"].get("stop_step")
    return start, (int(stop) if stop is not None else None)


def build_hyper(cfg: dict, rng) -> HyperModel:
    hc = HyperModelConfig(backbone=hyper_backbone_config(cfg),
                          target=peft_config(cfg),
                          downstream=model_config(cfg))
    return HyperModel(hc, rng)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(cfg: dict, out: Path, command: str) -> None:
    with open(out / f"{command}.manifest.json", "w", encoding="utf-8") as f:
        json.dump({"command": command, "config": cfg, "threads": thread_limit()},
                  f, indent=2, sort_keys=True)


def _load_downstream(cfg: dict) -> EncoderDecoder:
    path = cfg["io"]["downstream_ckpt"]
    rng = np.random.default_rng([cfg["train"]["seed"], 0xD0])
    down = EncoderDecoder(model_config(cfg), rng)
    if path:
        ckpt = load_checkpoint(path)
        down.load_snapshot(ckpt.groups["down"])
    return down


def _load_hyper(cfg: dict) -> HyperModel:
    rng = np.random.default_rng([cfg["train"]["seed"], 0x47])
    hyper = build_hyper(cfg, rng)
    path = cfg["io"]["hyper_ckpt"]
    if path:
        ckpt = load_checkpoint(path)
        hyper.load_snapshot(ckpt.groups["hyper"])
    return hyper


def _tasks(cfg: dict):
    if cfg["data"]["task_file"]:
        tasks = load_tasks_jsonl(cfg["data"]["task_file"])
        return tasks, tasks
    held_in, held_out = synth_tasks(cfg["data"]["task_seed"])
    return held_in, held_out


# --- commands ---------------------------------------------------------------


def cmd_synth_data(cfg: dict) -> int:
    out = _out_dir(cfg)
    held_in, held_out = synth_tasks(cfg["data"]["task_seed"])
    save_tasks_jsonl(held_in, out / "tasks_heldin.jsonl")
    save_tasks_jsonl(held_out, out / "tasks_heldout.jsonl")
    corpus = synth_corpus(cfg["data"]["corpus_seed"], cfg["data"]["corpus_tokens"])
    np.save(out / "corpus.npy", corpus)
    _write_manifest(cfg, out, "synth-data")
    print(f"wrote {len(held_in)} held-in and {len(held_out)} held-out tasks, "
          f"{len(corpus)} corpus tokens to {out}")
    return EXIT_OK


def cmd_hyperpretrain(cfg: dict) -> int:
    out = _out_dir(cfg)
    tc = train_config(cfg)
    corpus = synth_corpus(cfg["data"]["corpus_seed"], cfg["data"]["corpus_tokens"])
    down = _load_downstream(cfg)
    warmup = int(cfg["train"]["warmup_steps"])
    if not cfg["io"]["downstream_ckpt"] and warmup > 0:
        from dataclasses import replace
        lm_warmup(down, corpus, replace(tc, steps=warmup, mode="FullMTF"))
    down.freeze()
    save_checkpoint(out / "downstream.hypt", cfg, 0, {"down": down.snapshot()})
    hyper = _load_hyper(cfg)
    start, stop = _span(cfg)
    optimizer = None
    if start > 0 and cfg["io"]["hyper_ckpt"]:
        ckpt = load_checkpoint(cfg["io"]["hyper_ckpt"])
        state = optimizer_state_from(ckpt)
        if state is not None:
            optimizer = Adam(hyper.parameters())
            optimizer.load_state_dict(state)
    result = hyperpretrain(hyper, down, corpus, tc, start_step=start,
                           optimizer=optimizer, stop_step=stop)
    last = stop if stop is not None else tc.steps
    for step, snap in result.checkpoints.items():
        save_checkpoint(out / f"hyperpretrain_step{step}.hypt", cfg, step,
                        {"hyper": snap, "down": down.snapshot()},
                        result.optimizer.state_dict() if step == last else None)
    if last not in result.checkpoints:
        save_checkpoint(out / f"hyperpretrain_step{last}.hypt", cfg, last,
                        {"hyper": hyper.snapshot(), "down": down.snapshot()},
                        result.optimizer.state_dict())
    write_history_csv(result.history, out / "hyperpretrain_metrics.csv")
    _write_manifest(cfg, out, "hyperpretrain")
    print(f"hyperpretrained {tc.steps} steps; final loss "
          f"{result.history[-1].loss:.4f}; checkpoints: {sorted(result.checkpoints)}")
    return EXIT_OK


def cmd_mtf(cfg: dict) -> int:
    out = _out_dir(cfg)
    tc = train_config(cfg)
    held_in, _ = _tasks(cfg)
    down = _load_downstream(cfg)
    hyper = peft = None
    if tc.mode in ("HyperFrozen", "HyperJoint"):
        hyper = _load_hyper(cfg)
    if tc.mode in ("SharedPeft", "PeftOnly"):
        from .peft import init_peft
        rng = np.random.default_rng([tc.seed, 0x5E])
        peft = init_peft(peft_config(cfg), "rand", rng, down.config)
    result = mtf_train(down, held_in, tc, hyper=hyper, peft=peft)
    models = {"down": down.snapshot()}
    if hyper is not None:
        models["hyper"] = hyper.snapshot()
    save_checkpoint(out / "mtf_final.hypt", cfg, tc.steps, models,
                    result.optimizer.state_dict())
    if peft is not None:
        save_peft(peft, out / "shared_peft.hpft")
    write_history_csv(result.history, out / "mtf_metrics.csv")
    _write_manifest(cfg, out, "mtf")
    print(f"mtf mode={tc.mode} {tc.steps} steps; final loss {result.history[-1].loss:.4f}")
    return EXIT_OK


def cmd_gen_adapter(cfg: dict) -> int:
    out = _out_dir(cfg)
    hyper = _load_hyper(cfg)
    held_in, held_out = _tasks(cfg)
    pool = held_out if cfg["io"]["held_out"] else held_in
    name = cfg["io"]["task_name"]
    matches = [t for t in pool + (held_in if pool is held_out else held_out)
               if t.name == name]
    if not matches:
        raise ConfigError("io.task_name", f"task {name!r} not found")
    task = matches[0]
    rng = np.random.default_rng([cfg["io"]["eval_seed"], 0x6E])
    k = min(int(cfg["io"]["k"]), len(task.train))
    idx = rng.choice(len(task.train), size=k, replace=False)
    shots = FewShotSet([task.train[int(i)] for i in idx],
                       definition=task.train[0].definition)
    adapter = hyper.generate(shots.tokens(cfg["train"]["max_len_hyper"]))
    path = out / f"adapter_{name}.hpft"
    save_peft(adapter, path)
    _write_manifest(cfg, out, "gen-adapter")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    down = _load_downstream(cfg)
    held_in, held_out = _tasks(cfg)
    pool = held_out if cfg["io"]["held_out"] else held_in
    seed = int(cfg["io"]["eval_seed"])
    rows = []
    if cfg["io"]["adapter"]:
        adapter = load_peft(cfg["io"]["adapter"])
        names = [cfg["io"]["task_name"]] if cfg["io"]["task_name"] else [t.name for t in pool]
        for task in pool:
            if task.name in names:
                rows.append(eval_task(down, task, adapter_source="finetuned",
                                      peft=adapter, seed=seed))
    elif cfg["io"]["hyper_ckpt"]:
        hyper = _load_hyper(cfg)
        for task in pool:
            rows.append(eval_task(down, task, adapter_source="hyper", hyper=hyper,
                                  k=int(cfg["io"]["k"]), seed=seed,
                                  max_len_hyper=cfg["train"]["max_len_hyper"]))
    else:
        for task in pool:
            rows.append(eval_task(down, task, adapter_source="none", seed=seed))
    path = out / "eval_report.csv"
    write_report(rows, path, config=cfg)
    _write_manifest(cfg, out, "eval")
    print(f"wrote {path} ({len(rows)} task rows)")
    return EXIT_OK


def cmd_peft_finetune(cfg: dict) -> int:
    out = _out_dir(cfg)
    tc = train_config(cfg)
    down = _load_downstream(cfg)
    down.freeze()
    _, held_out = _tasks(cfg)
    hyper = _load_hyper(cfg) if cfg["io"]["hyper_ckpt"] else None
    scheme_list = ["rand"] + (["hyper"] if hyper is not None else [])
    lines = ["task,scheme,lr,seed,step,value"]
    for task in held_out:
        for scheme in scheme_list:
            report = peft_finetune(down, task, scheme, peft_config(cfg), tc,
                                   hyper=hyper)
            for cell in report.cells:
                for step, value in cell.curve:
                    lines.append(f"{task.name},{scheme},{cell.lr:g},{cell.seed},"
                                 f"{step},{value:.6f}")
    path = out / "peft_finetune_curves.csv"
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    _write_manifest(cfg, out, "peft-finetune")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    rng = np.random.default_rng(cfg["train"]["seed"])
    down = EncoderDecoder(model_config(cfg), rng)
    hyper = build_hyper(cfg, rng)
    for head in hyper.heads.values():
        head["w2"].tensor.data = rng.normal(0.0, 0.05, size=head["w2"].data.shape)
    fewshot = [int(t) for t in rng.integers(0, 256, size=12)]
    src = [int(t) for t in rng.integers(0, 256, size=5)]
    tgt = [int(t) for t in rng.integers(0, 256, size=4)]

    def f():
        return seq_loss(down, src, tgt, hyper.generate(fewshot))

    params = list(hyper.parameters().values()) + list(down.parameters().values())
    err = T.grad_check(f, params, eps=1e-5, rng=np.random.default_rng(1),
                       max_coords_per_param=3)
    tol = 1e-4
    print(f"gradcheck max rel err = {err:.3e} (tolerance {tol:.0e})")
    return EXIT_OK if err < tol else EXIT_FAIL


COMMANDS = {
    "synth-data": cmd_synth_data,
    "hyperpretrain": cmd_hyperpretrain,
    "mtf": cmd_mtf,
    "gen-adapter": cmd_gen_adapter,
    "eval": cmd_eval,
    "peft-finetune": cmd_peft_finetune,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hyperpeft")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config file")
    args, extra = parser.parse_known_args(argv)
    try:
        thread_limit()
        cfg = load_config(args.config, extra)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
