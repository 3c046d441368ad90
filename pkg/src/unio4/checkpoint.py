"""Shared container layout for the UO4P / UO4V / UO4T checkpoint files.

::

    magic[4] u32 version u32 n_nets
    per net: u32 n_sizes, u32 sizes[n_sizes], u32 hidden_code, u32 output_code
    u32 n_vectors, u32 lengths[n_vectors]
    u32 n_scalars
    f32 payload: every net's [W0, b0, W1, b1, ...] then every vector
    f64 scalars[n_scalars]

Parameters are stored in single precision, so a save/load/save cycle is
byte-identical while the first load rounds float64 weights to float32.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .nn import Mlp

VERSION = 1
_HIDDEN = {"tanh": 0, "relu": 1}
_OUTPUT = {"identity": 0, "tanh": 1}


def pack(magic: bytes, nets: Sequence[Mlp], vectors: Sequence[np.ndarray] = (),
         scalars: Sequence[float] = ()) -> bytes:
    parts = [struct.pack("<4sII", magic, VERSION, len(nets))]
    for net in nets:
        parts.append(struct.pack(f"<I{len(net.layer_sizes)}I", len(net.layer_sizes), *net.layer_sizes))
        parts.append(struct.pack("<II", _HIDDEN[net.hidden_activation], _OUTPUT[net.output_activation]))
    vectors = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    parts.append(struct.pack(f"<I{len(vectors)}I", len(vectors), *[len(v) for v in vectors]))
    parts.append(struct.pack("<I", len(scalars)))
    for net in nets:
        for p in net.params():
            parts.append(p.astype("<f4").tobytes())
    for v in vectors:
        parts.append(v.astype("<f4").tobytes())
    parts.append(np.asarray(scalars, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack(raw: bytes, magic: bytes):
    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise FormatError(f"truncated checkpoint at offset {off}")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    def read_array(count, dtype):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        if off + size > len(raw):
            raise FormatError(f"truncated checkpoint payload at offset {off}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).astype(np.float64)
        off += size
        return arr

    got, version, n_nets = read("<4sII")
    if got != magic:
        raise FormatError(f"bad magic {got!r} at offset 0, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    hidden_names = {v: k for k, v in _HIDDEN.items()}
    output_names = {v: k for k, v in _OUTPUT.items()}
    specs = []
    for _ in range(n_nets):
        (n_sizes,) = read("<I")
        sizes = list(read(f"<{n_sizes}I"))
        h, o = read("<II")
        if h not in hidden_names or o not in output_names:
            raise FormatError(f"unknown activation code at offset {off - 8}")
        specs.append((sizes, hidden_names[h], output_names[o]))
    (n_vec,) = read("<I")
    lengths = list(read(f"<{n_vec}I"))
    (n_scalars,) = read("<I")
    nets = []
    for sizes, h, o in specs:
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            weights.append(read_array(sizes[i + 1] * sizes[i], "<f4").reshape(sizes[i + 1], sizes[i]))
            biases.append(read_array(sizes[i + 1], "<f4"))
        nets.append(Mlp(sizes, weights, biases, h, o))
    vectors = [read_array(n, "<f4") for n in lengths]
    scalars = list(read_array(n_scalars, "<f8"))
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes at offset {off}")
    return nets, vectors, scalars


def write(path: str | Path, blob: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)


def read(path: str | Path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p.read_bytes()
