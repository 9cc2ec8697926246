"""Binary checkpoint container.

Layout (all integers little-endian):
    magic "GCDN" | format version u32 | tensor count u32
    per tensor: name length u32, UTF-8 name, rank u32, extents u64 each,
                raw float32 values
    trailer: config byte length u32, UTF-8 key=value block

Writes are atomic (temp file + rename); save -> load -> save round-trips
byte-identically.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .network import Checkpoint, ModelConfig

MAGIC = b"GCDN"
FORMAT_VERSION = 1


def save_checkpoint(path, ckpt):
    blob = _encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(ckpt):
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    kv = ckpt.config.to_kv() + f"iteration={ckpt.iteration}\n"
    kvb = kv.encode("utf-8")
    parts.append(struct.pack("<I", len(kvb)))
    parts.append(kvb)
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError("truncated checkpoint file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64s(self, n):
        return struct.unpack(f"<{n}Q", self.take(8 * n))


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} does not match "
            f"engine version {FORMAT_VERSION}"
        )
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = r.u64s(rank)
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()
    kv = r.take(r.u32()).decode("utf-8")
    if r.pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after config block")
    config = ModelConfig.from_kv(kv)
    iteration = 0
    for line in kv.splitlines():
        if line.startswith("iteration="):
            iteration = int(line.split("=", 1)[1])
    return Checkpoint(config=config, tensors=tensors, iteration=iteration)
