"""Versioned binary model checkpoints with a human-readable sidecar.

Layout (all integers little-endian):

    magic     8 bytes  b"RBNNCKP\\x01"
    version   u32
    mode      u8       0 = baseline, 1 = bayesian
    spec_len  u32      followed by the canonical spec text (utf-8)
    seed      u64
    iteration u64
    val_acc   f64      NaN when never validated
    n_tensors u32
    per tensor: name_len u16 + utf-8 name, ndim u8, dims u32 each,
                raw float64 little-endian row-major data

The sidecar ``<path>.manifest`` mirrors the metadata in text form, keyed by
the sha256 of the spec text.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path

import numpy as np

from .models import Model, build, parse_spec, serialize_spec

MAGIC = b"RBNNCKP\x01"
VERSION = 1
_MODES = ("baseline", "bayesian")


def save_checkpoint(path, model: Model, seed: int, iteration: int,
                    val_accuracy: float = math.nan) -> None:
    path = Path(path)
    spec_text = serialize_spec(model.spec).encode("utf-8")
    parts = [MAGIC,
             struct.pack("<IB", VERSION, _MODES.index(model.mode)),
             struct.pack("<I", len(spec_text)), spec_text,
             struct.pack("<QQd", seed, iteration, val_accuracy)]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        parts.append(np.ascontiguousarray(tensor.data).astype("<f8").tobytes())
    path.write_bytes(b"".join(parts))

    manifest = (f"spec_sha256 = {hashlib.sha256(spec_text).hexdigest()}\n"
                f"mode = {model.mode}\n"
                f"seed = {seed}\n"
                f"iteration = {iteration}\n"
                f"val_accuracy = {val_accuracy!r}\n")
    Path(str(path) + ".manifest").write_text(manifest, encoding="utf-8")


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError("checkpoint truncated")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Model, dict]:
    rd = _Reader(Path(path).read_bytes())
    if rd.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, mode_idx = rd.unpack("<IB")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if mode_idx >= len(_MODES):
        raise ValueError(f"{path}: unknown mode byte {mode_idx}")
    (spec_len,) = rd.unpack("<I")
    spec_text = rd.take(spec_len).decode("utf-8")
    seed, iteration, val_accuracy = rd.unpack("<QQd")
    spec = parse_spec(spec_text)
    model = build(spec, _MODES[mode_idx], seed=0)
    expected = {name: t for name, t in model.parameters()}
    (n_tensors,) = rd.unpack("<I")
    if n_tensors != len(expected):
        raise ValueError(f"{path}: tensor count {n_tensors} does not match "
                         f"spec ({len(expected)})")
    for _ in range(n_tensors):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        dims = rd.unpack(f"<{ndim}I")
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        tensor = expected[name]
        if tuple(dims) != tensor.data.shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {dims}, "
                             f"spec wants {tensor.data.shape}")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(rd.take(count * 8), dtype="<f8").reshape(dims)
        tensor.data = data.astype(np.float64).copy()
    meta = {"mode": _MODES[mode_idx], "seed": seed, "iteration": iteration,
            "val_accuracy": val_accuracy, "spec_text": spec_text}
    return model, meta
