"""Binary tensor containers shared by PEFT files ("HPFT") and model
checkpoints ("HYPT"): magic, u32 version, u32 header length, JSON header with
a name -> (shape, offset) index, then little-endian float payloads."""

from __future__ import annotations

import json
import struct

import numpy as np

VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray],
                    dtype: str = "f32") -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    dt = _DTYPES[dtype]
    index = {}
    offset = 0
    payloads = []
    for name in sorted(tensors):
        # np.asarray with order="C" keeps 0-d shapes intact, unlike
        # np.ascontiguousarray which promotes them to 1-d
        arr = np.asarray(tensors[name], dtype=dt, order="C")
        index[name] = [list(arr.shape), offset]
        offset += arr.nbytes
        payloads.append(arr.tobytes())
    header = dict(meta)
    header["dtype"] = dtype
    header["index"] = index
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for p in payloads:
            f.write(p)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header: {e}") from e
    dt = _DTYPES[header["dtype"]]
    base = 12 + hlen
    tensors = {}
    for name, (shape, offset) in header["index"].items():
        count = int(np.prod(shape)) if shape else 1
        start = base + offset
        end = start + count * dt.itemsize
        if end > len(raw):
            raise FormatError(f"truncated payload for {name!r}")
        tensors[name] = np.frombuffer(raw[start:end], dtype=dt).reshape(shape).copy()
    return header, tensors
