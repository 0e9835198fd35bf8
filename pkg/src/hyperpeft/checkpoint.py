"""Model/optimizer checkpoints in the HYPT container: bit-exact round trips
including optimizer moments and the step counter, so resumed training
reproduces an uninterrupted run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .serialize import FormatError, read_container, write_container

CKPT_MAGIC = b"HYPT"


@dataclass
class Checkpoint:
    config: dict
    step: int
    groups: dict[str, dict[str, np.ndarray]]


def save_checkpoint(path, config: dict, step: int,
                    models: dict[str, dict[str, np.ndarray]],
                    optimizer_state: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for group, snap in models.items():
        for name, arr in snap.items():
            tensors[f"{group}/{name}"] = arr
    meta = {"config": config, "step": int(step), "opt_t": 0}
    if optimizer_state is not None:
        meta["opt_t"] = int(optimizer_state["t"])
        for kind in ("m", "v"):
            for name, arr in optimizer_state[kind].items():
                tensors[f"opt.{kind}/{name}"] = arr
    write_container(path, CKPT_MAGIC, meta, tensors, dtype="f64")


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path, CKPT_MAGIC)
    groups: dict[str, dict[str, np.ndarray]] = {}
    for full, arr in tensors.items():
        group, _, name = full.partition("/")
        groups.setdefault(group, {})[name] = arr
    ckpt = Checkpoint(config=header.get("config", {}), step=int(header.get("step", 0)),
                      groups=groups)
    ckpt.groups.setdefault("opt.m", {})
    ckpt.groups.setdefault("opt.v", {})
    ckpt.opt_t = int(header.get("opt_t", 0))
    return ckpt


def optimizer_state_from(ckpt: Checkpoint) -> dict | None:
    if not ckpt.groups["opt.m"]:
        return None
    return {"t": ckpt.opt_t, "m": ckpt.groups["opt.m"], "v": ckpt.groups["opt.v"]}
