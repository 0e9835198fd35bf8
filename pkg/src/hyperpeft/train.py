"""Optimizer, schedules, and the training regimes: CACLM hyperpretraining,
multi-task fine-tuning in five modes, and single-task PEFT fine-tuning with
Rand/Shared/Hyper initializations."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import (EOS, FewShotSet, Task, X, caclm_split, format_fewshot,
                   sample_mtf_batch, tokenize)
from .hyper import HyperModel
from .model import EncoderDecoder, seq_loss
from .peft import PeftConfig, init_peft
from .tensor import Parameter

MODES = ("HyperFrozen", "HyperJoint", "FullMTF", "FewshotMTF", "SharedPeft", "PeftOnly")

LR_GRID = (1e-3, 1e-4, 1e-5)
INIT_SEEDS = (0, 1, 2)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step} {detail}".rstrip())
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    k_max: int = 16
    max_len_hyper: int = 256
    max_len_down: int = 96
    max_len_tgt: int = 24
    mode: str = "HyperFrozen"
    precision: str = "float64"
    clip_norm: float = 1.0
    checkpoint_fracs: tuple = (0.0, 0.25, 0.5, 1.0)
    caclm_lens: tuple = (44, 8, 32, 44)

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def lr_at(step: int, config: TrainConfig) -> float:
    return config.lr * max(0.0, 1.0 - step / config.steps)


class Adam:
    """Standard Adam with bias correction.  Frozen parameters are excluded
    from the state and never updated."""

    def __init__(self, params: dict[str, Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = {n: p for n, p in params.items() if not p.frozen}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.tensor.grad
            if g is None:
                continue
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            p.tensor.data = p.data - lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for n in self.m:
            self.m[n] = np.asarray(state["m"][n]).copy()
            self.v[n] = np.asarray(state["v"][n]).copy()


def adam_step(params: dict[str, Parameter], state: Adam, lr: float) -> None:
    state.step(lr)


def clip_grad_norm(params, max_norm: float) -> float:
    sq = 0.0
    grads = []
    for p in params.values():
        if p.frozen or p.tensor.grad is None:
            continue
        grads.append(p.tensor)
        sq += float((p.tensor.grad ** 2).sum())
    norm = np.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in grads:
            t.grad = t.grad * scale
    return norm


@dataclass
class StepRecord:
    step: int
    mode: str
    loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainResult:
    history: list[StepRecord]
    checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer: Adam | None = None


def write_history_csv(history: list[StepRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,mode,loss,lr,wall_ms\n")
        for r in history:
            f.write(f"{r.step},{r.mode},{r.loss:.6f},{r.lr:.8g},{r.wall_ms:.1f}\n")


def _mean_loss(losses):
    total = losses[0]
    for l in losses[1:]:
        total = T.add(total, l)
    return T.mul(total, 1.0 / len(losses))


def _run_steps(cfg: TrainConfig, optimizer: Adam, loss_fn, start_step: int,
               mode: str, checkpoint_fn=None, stop_step: int | None = None) -> TrainResult:
    result = TrainResult(history=[], optimizer=optimizer)
    marks = sorted({min(cfg.steps, max(0, round(f * cfg.steps))) for f in cfg.checkpoint_fracs})
    if checkpoint_fn is not None and start_step == 0 and 0 in marks:
        result.checkpoints[0] = checkpoint_fn()
    end = cfg.steps if stop_step is None else min(stop_step, cfg.steps)
    for step in range(start_step, end):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, step])
        loss = loss_fn(rng, step)
        if not np.isfinite(loss.data):
            raise NonFiniteLossError(step)
        optimizer.zero_grad()
        T.backward(loss)
        clip_grad_norm(optimizer.params, cfg.clip_norm)
        optimizer.step(lr_at(step, cfg))
        result.history.append(StepRecord(step, mode, float(loss.data),
                                         lr_at(step, cfg),
                                         (time.perf_counter() - t0) * 1e3))
        if checkpoint_fn is not None and (step + 1) in marks:
            result.checkpoints[step + 1] = checkpoint_fn()
    return result


# --- CACLM hyperpretraining / downstream LM warmup --------------------------


def sample_window(corpus: np.ndarray, length: int, rng) -> np.ndarray:
    if len(corpus) < length:
        raise ValueError("corpus shorter than window")
    start = int(rng.integers(0, len(corpus) - length + 1))
    return corpus[start:start + length]


def hyperpretrain(hyper: HyperModel, down: EncoderDecoder, corpus: np.ndarray,
                  cfg: TrainConfig, start_step: int = 0,
                  optimizer: Adam | None = None,
                  stop_step: int | None = None) -> TrainResult:
    """CACLM: the frozen downstream model predicts segment C from the short
    segment B, helped only by parameters the hypermodel generates from the
    flanking segments A and D."""
    cfg.validate()
    down.freeze()
    if optimizer is None:
        optimizer = Adam(hyper.parameters())
    window_len = sum(cfg.caclm_lens)

    def loss_fn(rng, step):
        losses = []
        for _ in range(cfg.batch_size):
            ex = caclm_split(sample_window(corpus, window_len, rng), cfg.caclm_lens)
            phi = hyper.generate(ex.hyper_input)
            losses.append(seq_loss(down, ex.downstream_input, ex.target, phi))
        return _mean_loss(losses)

    return _run_steps(cfg, optimizer, loss_fn, start_step, "hyperpretrain",
                      checkpoint_fn=hyper.snapshot, stop_step=stop_step)


def lm_warmup(down: EncoderDecoder, corpus: np.ndarray, cfg: TrainConfig,
              start_step: int = 0, optimizer: Adam | None = None,
              stop_step: int | None = None) -> TrainResult:
    """Desk-scale stand-in for starting from an LM-adapted pretrained model:
    conditional language modeling B -> C on the synthetic corpus."""
    cfg.validate()
    if optimizer is None:
        optimizer = Adam(down.parameters())
    window_len = sum(cfg.caclm_lens)

    def loss_fn(rng, step):
        losses = []
        for _ in range(cfg.batch_size):
            ex = caclm_split(sample_window(corpus, window_len, rng), cfg.caclm_lens)
            losses.append(seq_loss(down, ex.downstream_input, ex.target))
        return _mean_loss(losses)

    return _run_steps(cfg, optimizer, loss_fn, start_step, "lm_warmup",
                      stop_step=stop_step)


# --- multi-task fine-tuning --------------------------------------------------


def _pair_tokens(cfg: TrainConfig, target) -> tuple[list[int], list[int]]:
    src = tokenize(target.input)[:cfg.max_len_down]
    tgt = (tokenize(target.target) + [EOS])[:cfg.max_len_tgt]
    return src, tgt


def pair_loss(mode: str, cfg: TrainConfig, down: EncoderDecoder, task: Task,
              target, shots: FewShotSet, hyper=None, peft=None):
    src, tgt = _pair_tokens(cfg, target)
    if mode in ("HyperFrozen", "HyperJoint"):
        phi = hyper.generate(shots.tokens(cfg.max_len_hyper))
        return seq_loss(down, src, tgt, phi)
    if mode == "FewshotMTF":
        few = shots.tokens(cfg.max_len_hyper)
        src = (few + [X] + src)[:cfg.max_len_hyper + cfg.max_len_down]
        return seq_loss(down, src, tgt)
    if mode == "FullMTF":
        return seq_loss(down, src, tgt)
    if mode in ("SharedPeft", "PeftOnly"):
        return seq_loss(down, src, tgt, peft)
    raise ValueError(f"unknown mode {mode!r}")


def mode_trainable_params(mode: str, down: EncoderDecoder, hyper=None,
                          peft=None) -> dict[str, Parameter]:
    if mode == "HyperFrozen":
        return dict(hyper.parameters())
    if mode == "HyperJoint":
        return {**hyper.parameters(), **down.parameters()}
    if mode in ("FullMTF", "FewshotMTF"):
        return dict(down.parameters())
    if mode in ("SharedPeft", "PeftOnly"):
        return dict(peft.parameters())
    raise ValueError(f"unknown mode {mode!r}")


def mtf_train(down: EncoderDecoder, tasks: list[Task], cfg: TrainConfig,
              hyper: HyperModel | None = None, peft=None, start_step: int = 0,
              optimizer: Adam | None = None,
              stop_step: int | None = None) -> TrainResult:
    cfg.validate()
    trainable = mode_trainable_params(cfg.mode, down, hyper, peft)
    if cfg.mode in ("HyperFrozen", "SharedPeft", "PeftOnly"):
        down.freeze()
    if optimizer is None:
        optimizer = Adam(trainable)

    def loss_fn(rng, step):
        losses = []
        for _ in range(cfg.batch_size):
            task, target, shots = sample_mtf_batch(tasks, cfg.k_max, rng)
            losses.append(pair_loss(cfg.mode, cfg, down, task, target, shots,
                                    hyper=hyper, peft=peft))
        return _mean_loss(losses)

    def ckpt():
        snap = {}
        if hyper is not None:
            snap.update(hyper.snapshot())
        if cfg.mode in ("HyperJoint", "FullMTF", "FewshotMTF"):
            snap.update({f"down.{n}": a for n, a in down.snapshot().items()})
        if peft is not None:
            snap.update({n: p.data.copy() for n, p in peft.parameters().items()})
        return snap

    return _run_steps(cfg, optimizer, loss_fn, start_step, cfg.mode,
                      checkpoint_fn=ckpt, stop_step=stop_step)


def eval_pair_loss(down: EncoderDecoder, tasks: list[Task], cfg: TrainConfig,
                   hyper: HyperModel, seed: int, n_pairs: int = 32) -> float:
    """Mean hypertuning loss over a fixed sampled set of (target, shots)
    pairs; used by the hyperpretraining ablation."""
    rng = np.random.default_rng([seed, 0xEA])
    total = 0.0
    for _ in range(n_pairs):
        task, target, shots = sample_mtf_batch(tasks, cfg.k_max, rng)
        loss = pair_loss("HyperFrozen", cfg, down, task, target, shots, hyper=hyper)
        total += float(loss.data)
    return total / n_pairs


# --- single-task PEFT fine-tuning with initialization transfer ---------------


@dataclass
class FinetuneCell:
    lr: float
    seed: int
    curve: list[tuple[int, float]]  # (step, metric)


@dataclass
class FinetuneReport:
    task: str
    scheme: str
    cells: list[FinetuneCell]
    best_lr: float
    best_final_mean: float
    step0_mean: float

    def curve_mean(self, lr: float) -> list[tuple[int, float]]:
        curves = [c.curve for c in self.cells if c.lr == lr]
        steps = [s for s, _ in curves[0]]
        return [(s, float(np.mean([c[i][1] for c in curves]))) for i, s in enumerate(steps)]


def peft_finetune(down: EncoderDecoder, task: Task, scheme: str,
                  peft_config: PeftConfig, cfg: TrainConfig,
                  lrs=LR_GRID, seeds=INIT_SEEDS, eval_marks=None,
                  hyper=None, shared_source=None, eval_fn=None) -> FinetuneReport:
    """Sweep the learning-rate grid with several seeds, recording the eval
    metric at fixed step marks; reports the best-lr mean over seeds."""
    from .evals import eval_task  # deferred: evals imports model/peft only

    cfg.validate()
    down.freeze()
    if eval_marks is None:
        eval_marks = sorted({0, cfg.steps // 4, cfg.steps // 2, cfg.steps})
    if eval_fn is None:
        def eval_fn(p):
            row = eval_task(down, task, adapter_source="finetuned", peft=p, seed=cfg.seed)
            return row["value"]

    cells = []
    n = len(task.train)
    for lr in lrs:
        for seed in seeds:
            rng = np.random.default_rng([cfg.seed, seed, 0xF1])
            if scheme == "hyper":
                shots_idx = rng.choice(n, size=min(cfg.k_max, n), replace=False)
                shots = FewShotSet([task.train[int(i)] for i in shots_idx])
                peft = init_peft(peft_config, "hyper", rng, down.config,
                                 hyper=hyper, fewshot_tokens=shots.tokens(cfg.max_len_hyper))
            else:
                peft = init_peft(peft_config, scheme, rng, down.config, source=shared_source)
            run_cfg = replace(cfg, lr=lr)
            optimizer = Adam(peft.parameters())
            curve = [(0, eval_fn(peft))]
            done = 0
            for mark in eval_marks:
                if mark == 0:
                    continue
                for step in range(done, mark):
                    rng_ = np.random.default_rng([run_cfg.seed, seed, step])
                    losses = []
                    for _ in range(run_cfg.batch_size):
                        target = task.train[int(rng_.integers(n))]
                        losses.append(pair_loss("PeftOnly", run_cfg, down, task,
                                                target, None, peft=peft))
                    loss = _mean_loss(losses)
                    if not np.isfinite(loss.data):
                        raise NonFiniteLossError(step)
                    optimizer.zero_grad()
                    T.backward(loss)
                    clip_grad_norm(optimizer.params, run_cfg.clip_norm)
                    optimizer.step(lr_at(step, run_cfg))
                done = mark
                curve.append((mark, eval_fn(peft)))
            cells.append(FinetuneCell(lr=lr, seed=seed, curve=curve))

    finals = {lr: float(np.mean([c.curve[-1][1] for c in cells if c.lr == lr])) for lr in lrs}
    best_lr = max(finals, key=lambda lr: finals[lr])
    step0 = float(np.mean([c.curve[0][1] for c in cells]))
    return FinetuneReport(task=task.name, scheme=scheme, cells=cells,
                          best_lr=best_lr, best_final_mean=finals[best_lr],
                          step0_mean=step0)
