"""Weight container and model checkpoints.

Container layout (all integers unsigned 64-bit little-endian)::

    b"SSEG1" | count | { name_len | name utf-8 | rank | dims... | float64 LE payload } * count
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SSEG1"


def write_weights(path, entries):
    """Write an ordered mapping name -> ndarray."""
    parts = [MAGIC, struct.pack("<Q", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path):
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:5]!r}, expected {MAGIC!r}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def sidecar_path(path):
    p = Path(path)
    return p.with_name(p.name[:-2] + ".json") if p.name.endswith(".w") else p.with_name(p.name + ".json")


def save_checkpoint(path, model, extra=None):
    """Weights container plus a JSON sidecar holding the ModelConfig."""
    write_weights(path, model.state_dict())
    meta = {"model_config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    from .model import ModelConfig, build_model

    meta = json.loads(sidecar_path(path).read_text())
    model = build_model(ModelConfig.from_dict(meta["model_config"]), seed=0)
    model.load_state_dict(read_weights(path))
    return model, meta
