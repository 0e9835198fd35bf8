"""Task evaluation: rank classification over options, greedy generation
scored with ROUGE-L or Macro-F1, and CSV report emission."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .data import BOS, EOS, FewShotSet, Task, tokenize, detokenize
from .model import EncoderDecoder
from .tensor import cross_entropy

ADAPTER_SOURCES = ("none", "shared", "hyper", "finetuned")

REPORT_HEADER = "task,metric,value,n,adapter,seed"


def _option_nll(model: EncoderDecoder, enc, option: str, resolved) -> float:
    tgt = (tokenize(option) + [EOS])[:model.config.max_tgt_len]
    dec_in = [BOS] + tgt[:-1]
    logits = model._decode_resolved(dec_in, enc, resolved)
    return float(cross_entropy(logits, tgt, pad_id=-1).data)  # mean per-token NLL


def rank_classify(model: EncoderDecoder, input_text: str, options: list[str],
                  peft=None) -> int:
    """Score each option by mean per-token NLL under teacher forcing; return
    the argmin index (ties break to the lowest index)."""
    resolved = peft.resolve() if peft is not None else None
    src = tokenize(input_text)[:model.config.max_src_len]
    enc = model._encode_resolved(model._check_tokens(src, model.config.max_src_len), resolved)
    scores = [_option_nll(model, enc, o, resolved) for o in options]
    return int(np.argmin(scores))


def generate_greedy(model: EncoderDecoder, input_text: str, peft=None,
                    max_len: int | None = None) -> str:
    """BOS-seeded argmax decoding, stopping at EOS or max_len."""
    if max_len is None:
        max_len = model.config.max_tgt_len
    resolved = peft.resolve() if peft is not None else None
    src = tokenize(input_text)[:model.config.max_src_len]
    enc = model._encode_resolved(model._check_tokens(src, model.config.max_src_len), resolved)
    out: list[int] = []
    tokens = [BOS]
    for _ in range(max_len):
        logits = model._decode_resolved(tokens, enc, resolved)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        if len(tokens) >= model.config.max_tgt_len:
            break
        tokens.append(nxt)
    return detokenize(out)


def rouge_l(pred: str, ref: str) -> float:
    """ROUGE-L F1 over whitespace tokens (beta = 1)."""
    p = pred.split()
    r = ref.split()
    if not p and not r:
        return 1.0
    if not p or not r:
        return 0.0
    # LCS dynamic program
    dp = [[0] * (len(r) + 1) for _ in range(len(p) + 1)]
    for i in range(1, len(p) + 1):
        for j in range(1, len(r) + 1):
            if p[i - 1] == r[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    lcs = dp[-1][-1]
    if lcs == 0:
        return 0.0
    prec = lcs / len(p)
    rec = lcs / len(r)
    return 2 * prec * rec / (prec + rec)


def macro_f1(preds: list[str], refs: list[str]) -> float:
    """Unweighted mean per-class F1; classes with zero precision+recall
    contribute 0."""
    if len(preds) != len(refs):
        raise ValueError("preds and refs must have equal length")
    classes = sorted(set(preds) | set(refs))
    f1s = []
    for c in classes:
        tp = sum(1 for p, r in zip(preds, refs) if p == c and r == c)
        fp = sum(1 for p, r in zip(preds, refs) if p == c and r != c)
        fn = sum(1 for p, r in zip(preds, refs) if p != c and r == c)
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s)) if f1s else 0.0


def adapter_for_task(task: Task, hyper, k: int, seed: int, max_len_hyper: int):
    """Sample K shots from task.train (seeded) and generate the adapter once;
    it is reused for every test example."""
    rng = np.random.default_rng([seed, 0xADA])
    idx = rng.choice(len(task.train), size=min(k, len(task.train)), replace=False)
    shots = FewShotSet([task.train[int(i)] for i in idx],
                       definition=task.train[0].definition)
    return hyper.generate(shots.tokens(max_len_hyper))


def eval_task(model: EncoderDecoder, task: Task, adapter_source: str = "none",
              k: int = 16, seed: int = 0, hyper=None, peft=None,
              max_len_hyper: int = 192, n_examples: int | None = None) -> dict:
    if adapter_source not in ADAPTER_SOURCES:
        raise ValueError(f"unknown adapter source {adapter_source!r}")
    if adapter_source == "hyper":
        peft = adapter_for_task(task, hyper, k, seed, max_len_hyper)
    examples = task.test[:n_examples] if n_examples else task.test
    if task.metric == "accuracy":
        correct = 0
        for ex in examples:
            choice = rank_classify(model, ex.input, ex.options, peft)
            correct += int(ex.options[choice] == ex.target)
        value = correct / len(examples)
    elif task.metric == "rouge_l":
        value = float(np.mean([
            rouge_l(generate_greedy(model, ex.input, peft), ex.target)
            for ex in examples
        ]))
    else:  # macro_f1
        preds = [generate_greedy(model, ex.input, peft) for ex in examples]
        value = macro_f1(preds, [ex.target for ex in examples])
    return {"task": task.name, "metric": task.metric, "value": value,
            "n": len(examples), "adapter": adapter_source, "seed": seed}


def predictions(model: EncoderDecoder, task: Task, peft=None,
                n_examples: int | None = None) -> list:
    """Raw per-example predictions (option index or generated text)."""
    examples = task.test[:n_examples] if n_examples else task.test
    if task.metric == "accuracy":
        return [rank_classify(model, ex.input, ex.options, peft) for ex in examples]
    return [generate_greedy(model, ex.input, peft) for ex in examples]


def write_report(rows: list[dict], path, config: dict | None = None) -> None:
    """CSV with a trailing unweighted AVG row, plus a JSON sidecar with the
    run configuration."""
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append(f"{r['task']},{r['metric']},{r['value']:.6f},{r['n']},"
                     f"{r['adapter']},{r['seed']}")
    if rows:
        avg = float(np.mean([r["value"] for r in rows]))
        n = sum(r["n"] for r in rows)
        lines.append(f"AVG,mean,{avg:.6f},{n},,")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    sidecar = {
        "config": config or {},
        "seeds": sorted({r["seed"] for r in rows}),
    }
    run_id = hashlib.sha256(json.dumps(sidecar, sort_keys=True).encode()).hexdigest()[:12]
    sidecar["run_id"] = run_id
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
