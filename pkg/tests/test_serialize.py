"""Unit tests for the binary tensor container format and model/optimizer
checkpoints built on it."""

import struct

import numpy as np
import pytest

from hyperpeft.checkpoint import (CKPT_MAGIC, load_checkpoint,
                                  optimizer_state_from, save_checkpoint)
from hyperpeft.model import EncoderDecoder, ModelConfig
from hyperpeft.serialize import (VERSION, FormatError, read_container,
                                 write_container)
from hyperpeft.train import Adam, TrainConfig, hyperpretrain
import hyperpeft.tensor as T
from hyperpeft.tensor import Parameter

MAGIC = b"TEST"


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(7,)),
        "scalar": np.array(2.5),
    }


# --- container format ---------------------------------------------------


def test_container_roundtrip_f64(tmp_path):
    path = tmp_path / "t.bin"
    tensors = sample_tensors()
    write_container(path, MAGIC, {"note": "hi"}, tensors, dtype="f64")
    header, back = read_container(path, MAGIC)
    assert header["note"] == "hi"
    assert header["dtype"] == "f64"
    assert set(back) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])
        assert back[name].shape == tensors[name].shape


def test_container_f32_storage_precision(tmp_path):
    path = tmp_path / "t.bin"
    tensors = sample_tensors(1)
    write_container(path, MAGIC, {}, tensors, dtype="f32")
    _, back = read_container(path, MAGIC)
    for name in tensors:
        np.testing.assert_array_equal(back[name],
                                      tensors[name].astype(np.float32))


def test_container_write_is_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(p1, MAGIC, {"k": 1}, sample_tensors(), dtype="f64")
    write_container(p2, MAGIC, {"k": 1}, sample_tensors(), dtype="f64")
    assert p1.read_bytes() == p2.read_bytes()


def test_container_wrong_magic(tmp_path):
    path = tmp_path / "t.bin"
    write_container(path, MAGIC, {}, sample_tensors())
    with pytest.raises(FormatError):
        read_container(path, b"ELSE")


def test_container_version_mismatch(tmp_path):
    path = tmp_path / "t.bin"
    write_container(path, MAGIC, {}, sample_tensors())
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_container(path, MAGIC)


def test_container_truncated_payload(tmp_path):
    path = tmp_path / "t.bin"
    write_container(path, MAGIC, {}, sample_tensors())
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_container(path, MAGIC)


def test_container_corrupt_header(tmp_path):
    path = tmp_path / "t.bin"
    write_container(path, MAGIC, {}, sample_tensors())
    raw = bytearray(path.read_bytes())
    raw[12] = ord("}")  # break the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_container(path, MAGIC)


def test_container_short_file(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(b"TE")
    with pytest.raises(FormatError):
        read_container(path, MAGIC)


# --- checkpoints --------------------------------------------------------


def tiny_model(seed=0):
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                      vocab_size=263, max_src_len=96, max_tgt_len=32,
                      decoder_causal=True)
    return EncoderDecoder(cfg, np.random.default_rng(seed))


def test_checkpoint_roundtrip_parameters_bitwise(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.hypt"
    save_checkpoint(path, {"lr": 1e-3}, 7, {"down": model.snapshot()})
    ckpt = load_checkpoint(path)
    assert ckpt.step == 7
    assert ckpt.config == {"lr": 1e-3}
    fresh = tiny_model(seed=9)
    assert fresh.param_hash() != model.param_hash()
    fresh.load_snapshot(ckpt.groups["down"])
    assert fresh.param_hash() == model.param_hash()


def test_checkpoint_roundtrip_optimizer_state(tmp_path):
    p = Parameter("w", np.array([1.0, 2.0]))
    opt = Adam({"w": p})
    for _ in range(3):
        opt.zero_grad()
        T.backward(T.sum_(T.mul(p.tensor, p.tensor)))
        opt.step(0.01)
    path = tmp_path / "o.hypt"
    save_checkpoint(path, {}, 3, {"g": {"w": p.data}}, opt.state_dict())
    ckpt = load_checkpoint(path)
    state = optimizer_state_from(ckpt)
    assert state["t"] == 3
    np.testing.assert_array_equal(state["m"]["w"], opt.m["w"])
    np.testing.assert_array_equal(state["v"]["w"], opt.v["w"])

    opt2 = Adam({"w": p})
    opt2.load_state_dict(state)
    assert opt2.t == opt.t


def test_checkpoint_without_optimizer_state(tmp_path):
    path = tmp_path / "m.hypt"
    save_checkpoint(path, {}, 0, {"down": tiny_model().snapshot()})
    assert optimizer_state_from(load_checkpoint(path)) is None


def test_checkpoint_multiple_groups(tmp_path):
    a, b = tiny_model(0), tiny_model(1)
    path = tmp_path / "two.hypt"
    save_checkpoint(path, {}, 0, {"down": a.snapshot(), "hyper": b.snapshot()})
    ckpt = load_checkpoint(path)
    assert set(ckpt.groups) >= {"down", "hyper"}
    for name, arr in a.snapshot().items():
        np.testing.assert_array_equal(ckpt.groups["down"][name], arr)


def test_checkpoint_wrong_magic_and_version(tmp_path):
    path = tmp_path / "m.hypt"
    save_checkpoint(path, {}, 0, {"down": tiny_model().snapshot()})
    raw = bytearray(path.read_bytes())
    assert bytes(raw[:4]) == CKPT_MAGIC
    raw[:4] = b"NOPE"
    bad = tmp_path / "bad.hypt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    raw[:4] = CKPT_MAGIC
    raw[4:8] = struct.pack("<I", 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_frozen_downstream_identical_across_hyperpretrain_checkpoints(tmp_path):
    from hyperpeft.data import synth_corpus
    from hyperpeft.hyper import HyperModel, HyperModelConfig
    from hyperpeft.peft import PeftConfig

    down = tiny_model()
    backbone = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16,
                           vocab_size=263, max_src_len=256, max_tgt_len=32,
                           decoder_causal=False)
    hyper = HyperModel(HyperModelConfig(
        backbone, PeftConfig(kind="prefix_flat", prefix_len=2), down.config),
        np.random.default_rng(1))
    corpus = synth_corpus(0, 2000)
    result = hyperpretrain(hyper, down, corpus,
                           TrainConfig(steps=4, batch_size=2))
    paths = {}
    for step, snap in result.checkpoints.items():
        path = tmp_path / f"s{step}.hypt"
        save_checkpoint(path, {}, step,
                        {"hyper": snap, "down": down.snapshot()})
        paths[step] = path
    downs = [load_checkpoint(p).groups["down"] for p in paths.values()]
    for other in downs[1:]:
        for name, arr in downs[0].items():
            np.testing.assert_array_equal(other[name], arr)
