"""Byte-level vocabulary, few-shot formatting, CACLM example construction,
task sampling, JSONL task ingestion, and deterministic synthetic corpora and
task suites."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Byte tokens occupy ids 0..255; specials follow.
PAD = 256
BOS = 257
EOS = 258
X = 259  # <x>
Y = 260  # <y>
S0 = 261  # sentinel for segment A
S1 = 262  # sentinel for segment D
VOCAB_SIZE = 263

METRICS = ("accuracy", "rouge_l", "macro_f1")


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(tokens) -> str:
    return bytes(int(t) for t in tokens if 0 <= int(t) < 256).decode("utf-8", errors="replace")


@dataclass
class TaskExample:
    input: str
    target: str
    options: list[str] | None = None
    definition: str | None = None

    def validate(self):
        if not self.target:
            raise DataError("example target must be non-empty")
        if self.options is not None and self.target not in self.options:
            raise DataError(f"target {self.target!r} not among options {self.options}")


@dataclass
class Task:
    name: str
    train: list[TaskExample]
    test: list[TaskExample]
    metric: str

    def validate(self):
        if self.metric not in METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        for ex in self.train + self.test:
            ex.validate()
            if self.metric == "accuracy" and ex.options is None:
                raise DataError(f"accuracy task {self.name} has an example without options")
            if self.metric != "accuracy" and ex.options is not None:
                raise DataError(f"task {self.name}: options present but metric is {self.metric}")


@dataclass
class FewShotSet:
    examples: list[TaskExample]
    definition: str | None = None

    def tokens(self, max_len: int | None = None) -> list[int]:
        return format_fewshot(self, max_len=max_len)


@dataclass
class CaclmExample:
    hyper_input: list[int]
    downstream_input: list[int]
    target: list[int]
    segments: tuple


def format_fewshot(shots: FewShotSet, max_len: int | None = None) -> list[int]:
    """<x> input <y> target per example, optional leading <x> definition.

    Over-length sets drop trailing whole examples first, then right-truncate
    whatever remains."""
    chunks: list[list[int]] = []
    if shots.definition:
        chunks.append([X] + tokenize(shots.definition))
    for ex in shots.examples:
        chunks.append([X] + tokenize(ex.input) + [Y] + tokenize(ex.target))
    if not chunks:
        raise DataError("few-shot set needs at least one example or a definition")
    if max_len is not None:
        while len(chunks) > 1 and sum(len(c) for c in chunks) > max_len:
            chunks.pop()
    out = [t for c in chunks for t in c]
    if max_len is not None and len(out) > max_len:
        out = out[:max_len]
    return out


def caclm_split(window, lens) -> CaclmExample:
    """Split a token window into consecutive segments A,B,C,D.  The
    downstream model maps B -> C; the hypermodel sees S0+A+S1+D."""
    a, b, c, d = lens
    window = [int(t) for t in window]
    if len(window) != a + b + c + d:
        raise DataError(f"window length {len(window)} != sum of segment lengths {a + b + c + d}")
    seg_a = window[:a]
    seg_b = window[a:a + b]
    seg_c = window[a + b:a + b + c]
    seg_d = window[a + b + c:]
    return CaclmExample(
        hyper_input=[S0] + seg_a + [S1] + seg_d,
        downstream_input=seg_b,
        target=seg_c,
        segments=(seg_a, seg_b, seg_c, seg_d),
    )


def caclm_lengths(total: int, b: int, c: int) -> tuple[int, int, int, int]:
    """a and d split the remainder evenly after fixing b and c."""
    rem = total - b - c
    if rem < 0 or rem % 2 != 0:
        raise DataError(f"cannot split total={total} with b={b}, c={c}")
    return rem // 2, b, c, rem // 2


PAPER_CACLM_LENS = caclm_lengths(512, 32, 128)  # (176, 32, 128, 176)
DESK_CACLM_LENS = caclm_lengths(128, 8, 32)  # (44, 8, 32, 44)


def sample_mtf_batch(tasks: list[Task], k_max: int, rng) -> tuple[Task, TaskExample, FewShotSet]:
    """Uniform task choice, then a target and K <= k_max non-overlapping
    few-shot train examples."""
    order = rng.permutation(len(tasks))
    for ti in order:
        task = tasks[int(ti)]
        n = len(task.train)
        if n == 0:
            continue
        definition = task.train[0].definition
        if n == 1 and definition is None:
            continue
        tgt_i = int(rng.integers(n))
        target = task.train[tgt_i]
        rest = [i for i in range(n) if i != tgt_i]
        k = min(k_max, len(rest))
        shot_idx = rng.choice(len(rest), size=k, replace=False) if k else []
        shots = [task.train[rest[int(i)]] for i in shot_idx]
        return task, target, FewShotSet(examples=shots, definition=definition)
    raise DataError("no usable task in pool")


def load_tasks_jsonl(path) -> list[Task]:
    groups: dict[str, dict[str, list[TaskExample]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: invalid JSON: {e}") from e
            for key in ("task", "split", "input", "target"):
                if key not in rec:
                    raise DataError(f"line {lineno}: missing {key!r}")
            if rec["split"] not in ("train", "test"):
                raise DataError(f"line {lineno}: split must be train|test")
            ex = TaskExample(
                input=rec["input"],
                target=rec["target"],
                options=rec.get("options"),
                definition=rec.get("definition"),
            )
            name = rec["task"]
            if name not in groups:
                groups[name] = {"train": [], "test": []}
                order.append(name)
            groups[name][rec["split"]].append(ex)
    tasks = []
    for name in order:
        g = groups[name]
        has_options = any(ex.options is not None for ex in g["train"] + g["test"])
        metric = "accuracy" if has_options else "rouge_l"
        task = Task(name=name, train=g["train"], test=g["test"], metric=metric)
        task.validate()
        tasks.append(task)
    return tasks


def save_tasks_jsonl(tasks: list[Task], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for task in tasks:
            for split, exs in (("train", task.train), ("test", task.test)):
                for ex in exs:
                    rec = {"task": task.name, "split": split, "input": ex.input, "target": ex.target}
                    if ex.options is not None:
                        rec["options"] = ex.options
                    if ex.definition is not None:
                        rec["definition"] = ex.definition
                    f.write(json.dumps(rec) + "\n")


# --- synthetic corpus ---------------------------------------------------

_FILLER = [
    "red", "blue", "frog", "moon", "star", "wolf", "leaf", "coin",
    "rock", "bird", "tree", "wind", "snow", "fish", "gold", "rain",
]

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _rand_word(rng, lo=4, hi=4) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(_LETTERS[int(i)] for i in rng.integers(0, 26, size=n))


def synth_corpus(seed: int, n_tokens: int) -> np.ndarray:
    """Deterministic byte-token stream of documents whose per-document key
    string repeats every unit, so distant segments of a window carry signal
    about each other.  Units are longer than the default 32-token prediction
    segment: a segment that contains the key once does not also contain the
    preceding occurrence that would give the key away locally."""
    rng = np.random.default_rng(seed)
    out = bytearray()
    while len(out) < n_tokens:
        key = "".join(_LETTERS[int(i)] for i in rng.choice(26, size=4, replace=False))
        n_units = int(rng.integers(12, 18))
        doc = []
        for _ in range(n_units):
            fillers = " ".join(_FILLER[int(i)]
                               for i in rng.integers(len(_FILLER), size=4))
            doc.append(f"{fillers} key {key} ; ")
        out.extend("".join(doc).encode("utf-8"))
    return np.frombuffer(bytes(out[:n_tokens]), dtype=np.uint8).astype(np.int64)


# --- synthetic task suite -------------------------------------------------

# Keyed-label tasks: the target is a constant two-part label (color+animal)
# that never appears in the input, so it can only reach the downstream model
# through the few-shot examples.  Held-out tasks use part combinations that
# no held-in task has, rewarding adapters that encode the parts
# compositionally rather than memorizing whole labels.  Parts deliberately
# avoid the corpus filler words so no label is intrinsically cheaper for a
# corpus-warmed language model.
_COLORS = ["mag", "cyn", "tan", "ash"]
_ANIMALS = ["fox", "owl", "elk", "bee"]
_HELD_IN_COMBOS = [(0, 0), (1, 1), (2, 2), (3, 3), (0, 2), (1, 3), (2, 0), (3, 1)]
_HELD_OUT_COMBOS = [(0, 1), (1, 0), (2, 3), (3, 2)]


def _label(combo) -> str:
    return _COLORS[combo[0]] + _ANIMALS[combo[1]]


def _unique_strings(rng, n, lo=4, hi=6) -> list[str]:
    seen = set()
    out = []
    while len(out) < n:
        s = _rand_word(rng, lo, hi)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _gen_task(name, rng, fn, n_train=40, n_test=20, options_fn=None, metric="rouge_l"):
    inputs = _unique_strings(rng, n_train + n_test)
    exs = []
    for s in inputs:
        target = fn(s)
        options = options_fn(s, target, rng) if options_fn else None
        exs.append(TaskExample(input=s, target=target, options=options))
    task = Task(name=name, train=exs[:n_train], test=exs[n_train:], metric=metric)
    task.validate()
    return task


def _held_in_options(combo, rng) -> list[str]:
    """Decoys share the color part, the animal part, and neither, so ranking
    the true label requires both parts of the task identity."""
    a, b = combo
    same_a = [c for c in _HELD_IN_COMBOS if c[0] == a and c != combo]
    same_b = [c for c in _HELD_IN_COMBOS if c[1] == b and c != combo]
    others = [c for c in _HELD_IN_COMBOS if c != combo and c[0] != a and c[1] != b]
    picks = [same_a[int(rng.integers(len(same_a)))],
             same_b[int(rng.integers(len(same_b)))],
             others[int(rng.integers(len(others)))]]
    opts = [_label(combo)] + [_label(c) for c in picks]
    rng.shuffle(opts)
    return opts


def synth_tasks(seed: int) -> tuple[list[Task], list[Task]]:
    """Deterministic suite of 16 micro-tasks over short byte strings,
    split 12 held-in / 4 held-out."""
    rng = np.random.default_rng(seed)
    caesar = str.maketrans(_LETTERS, _LETTERS[1:] + _LETTERS[0])

    held_in = [
        _gen_task("copy", rng, lambda s: s),
        _gen_task("reverse", rng, lambda s: s[::-1]),
        _gen_task("caesar_shift", rng, lambda s: s.translate(caesar)),
        _gen_task(
            "vowel_start", rng,
            lambda s: "vowel" if s[0] in "aeiou" else "consonant",
            metric="macro_f1",
        ),
    ]
    for combo in _HELD_IN_COMBOS:
        held_in.append(_gen_task(
            f"label_{_label(combo)}", rng, lambda s, c=combo: _label(c),
            metric="accuracy",
            options_fn=lambda s, t, r, c=combo: _held_in_options(c, r)))

    ho_labels = [_label(c) for c in _HELD_OUT_COMBOS]

    def ho_options(s, t, r):
        opts = list(ho_labels)
        r.shuffle(opts)
        return opts

    held_out = [
        _gen_task(f"label_{_label(c)}", rng, lambda s, c=c: _label(c),
                  metric="accuracy", options_fn=ho_options, n_test=40)
        for c in _HELD_OUT_COMBOS
    ]
    return held_in, held_out
