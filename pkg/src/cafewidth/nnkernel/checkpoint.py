"""Binary checkpoint format.

Layout (little-endian): magic ``CAFW1``, u64 step, u32 tensor count, then
per tensor: u16 name length, UTF-8 name, u8 rank, u32 per dim, float64
payload in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..archgraph import NetworkGraph
from ..errors import FormatError
from .engine import SupernetState, weight_shape

MAGIC = b"CAFW1"


def save_checkpoint(state: SupernetState, path: str | Path) -> None:
    tensors = list(state.tensors())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QI", state.step, len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("checkpoint is truncated")
    return b


def load_checkpoint(graph: NetworkGraph, path: str | Path) -> SupernetState:
    with open(path, "rb") as fh:
        if _read(fh, 5) != MAGIC:
            raise FormatError("bad checkpoint magic")
        step, count = struct.unpack("<QI", _read(fh, 12))
        found = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, ln).decode()
            (rank,) = struct.unpack("<B", _read(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            found[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    weights, biases, mw, mb = {}, {}, {}, {}
    for layer in graph.layers:
        shape = weight_shape(layer, graph.max_width(layer.input_group))
        expect = {
            f"L{layer.id}.weight": (weights, shape),
            f"L{layer.id}.bias": (biases, (layer.max_width,)),
            f"L{layer.id}.weight.momentum": (mw, shape),
            f"L{layer.id}.bias.momentum": (mb, (layer.max_width,)),
        }
        for name, (dest, shp) in expect.items():
            if name not in found:
                raise FormatError(f"checkpoint lacks tensor {name}")
            if found[name].shape != tuple(shp):
                raise FormatError(f"{name}: shape {found[name].shape} does not match graph {shp}")
            dest[layer.id] = found[name]
    return SupernetState(graph, weights, biases, mw, mb, step)
