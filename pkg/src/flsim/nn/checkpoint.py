"""Binary model checkpoints.

Layout (little endian)::

    b"FLSIM1"
    6 x u32   vocab_size d_model n_layers n_heads d_ff max_seq_len
    u32       tensor count
    per tensor: u32 name length, utf-8 name, u32 ndim, ndim x u32 dims,
                f32 entries row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from flsim.errors import FormatError
from flsim.nn.model import BaseModel, ModelConfig

MAGIC = b"FLSIM1"
_CONFIG_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len")


def dumps_model(model: BaseModel) -> bytes:
    parts = [MAGIC, struct.pack("<6I", *(getattr(model.config, f) for f in _CONFIG_FIELDS))]
    parts.append(struct.pack("<I", len(model.parameters)))
    for name, arr in model.parameters.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads_model(data: bytes) -> BaseModel:
    if data[:6] != MAGIC:
        raise FormatError("not an FLSIM1 checkpoint (bad magic)")
    pos = 6
    try:
        cfg_vals = struct.unpack_from("<6I", data, pos)
        pos += 24
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(data):
                raise FormatError(f"truncated tensor {name!r}")
            params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, cfg_vals)))
    return BaseModel(config, {k: v.astype(np.float32) for k, v in params.items()})


def save_model(model: BaseModel, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> BaseModel:
    return loads_model(Path(path).read_bytes())
