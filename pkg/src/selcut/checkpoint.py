"""Versioned, little-endian checkpoint container.

Layout::

    b"SELCUTCK"                    8-byte magic
    uint32 LE                      format version (1)
    uint64 LE                      header length in bytes
    header                         UTF-8 JSON, keys sorted
    tensor data                    raw little-endian arrays, concatenated

The header holds ``meta`` (free-form JSON: configs, step counter, cycle
position) and ``tensors``: a list of ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the start of the data section. Tensor order is the
insertion order of the dict passed to :func:`write_checkpoint`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SELCUTCK"
VERSION = 1


def write_checkpoint(path: Path | str, tensors: dict[str, torch.Tensor | np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        a = np.asarray(a, order="C")
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def read_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen])
    data = memoryview(blob)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        buf = data[e["offset"] : e["offset"] + e["nbytes"]]
        a = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = a.astype(a.dtype.newbyteorder("="))
    return tensors, header["meta"]
