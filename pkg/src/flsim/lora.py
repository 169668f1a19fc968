"""Low-rank adapters for the frozen base model.

An adapted layer computes ``h = W0 x + B A x`` with ``A`` of shape (r, k)
and ``B`` of shape (d, r). There is no alpha/r scaling coefficient.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from flsim.errors import ConfigurationError, FormatError, InputError
from flsim.nn.model import BaseModel

MAGIC = b"FLADP1"


@dataclass
class LoraAdapter:
    layer_name: str
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ConfigurationError(
                f"{self.layer_name}: A{self.A.shape} and B{self.B.shape} do not compose"
            )
        r, k = self.A.shape
        d = self.B.shape[0]
        if r > min(d, k):
            raise ConfigurationError(f"{self.layer_name}: rank {r} exceeds min(d={d}, k={k})")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape (d, k) of the adapted weight."""
        return self.B.shape[0], self.A.shape[1]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.layer_name, self.A.copy(), self.B.copy())


@dataclass
class LoraAdapterSet:
    """Per-layer adapters in canonical layer order.

    ``provenance`` is ``(round_index, owner)`` where owner is a client id or
    ``"global"``.
    """

    adapters: dict[str, LoraAdapter]
    provenance: tuple[int, int | str] = (0, "global")
    rank: int = field(init=False)

    def __post_init__(self):
        if not self.adapters:
            raise ConfigurationError("adapter set is empty")
        ranks = {a.rank for a in self.adapters.values()}
        if len(ranks) != 1:
            raise ConfigurationError(f"non-uniform adapter ranks {sorted(ranks)}")
        self.rank = ranks.pop()

    def __getitem__(self, name: str) -> LoraAdapter:
        return self.adapters[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.adapters)

    def __len__(self) -> int:
        return len(self.adapters)

    def keys(self):
        return self.adapters.keys()

    def items(self):
        return self.adapters.items()

    @property
    def num_params(self) -> int:
        return sum(a.num_params for a in self.adapters.values())

    def clone(self, provenance=None) -> "LoraAdapterSet":
        return LoraAdapterSet(
            {k: a.copy() for k, a in self.adapters.items()},
            provenance=self.provenance if provenance is None else provenance,
        )

    def flat_params(self) -> dict[str, np.ndarray]:
        """``{"<layer>.A": A, "<layer>.B": B, ...}`` -- the keys gradients use."""
        out = {}
        for name, a in self.adapters.items():
            out[name + ".A"] = a.A
            out[name + ".B"] = a.B
        return out

    def with_flat_params(self, flat: dict[str, np.ndarray], provenance=None) -> "LoraAdapterSet":
        return LoraAdapterSet(
            {n: LoraAdapter(n, flat[n + ".A"], flat[n + ".B"]) for n in self.adapters},
            provenance=self.provenance if provenance is None else provenance,
        )

    def vector(self) -> np.ndarray:
        """All entries concatenated in canonical order (float64)."""
        return np.concatenate(
            [np.concatenate([a.A.ravel(), a.B.ravel()]) for a in self.adapters.values()]
        ).astype(np.float64)

    def equals(self, other: "LoraAdapterSet") -> bool:
        """Bitwise equality of layer names, shapes, dtypes and entries."""
        if list(self.adapters) != list(other.adapters):
            return False
        for name, a in self.adapters.items():
            b = other.adapters[name]
            for x, y in ((a.A, b.A), (a.B, b.B)):
                if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                    return False
        return True


def init_adapters(model: BaseModel, rank: int, seed: int, sigma: float | None = None) -> LoraAdapterSet:
    """Gaussian A with std ``sigma`` (default 1/rank), all-zero B."""
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    sigma = 1.0 / rank if sigma is None else sigma
    rng = np.random.default_rng(seed)
    out = {}
    for name in model.adapted_layers():
        d, k = model.parameters[name].shape
        if rank > min(d, k):
            raise ConfigurationError(f"rank {rank} too large for layer {name!r} of shape {(d, k)}")
        A = rng.normal(0.0, sigma, size=(rank, k)).astype(model.dtype)
        B = np.zeros((d, rank), dtype=model.dtype)
        out[name] = LoraAdapter(name, A, B)
    return LoraAdapterSet(out, provenance=(0, "global"))


def adapted_forward_contribution(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """``B (A x)`` using two rank-r products."""
    x = np.asarray(x)
    k = adapter.A.shape[1]
    if x.shape[-1] != k:
        raise InputError(f"{adapter.layer_name}: input length {x.shape[-1]} != {k}")
    return adapter.B @ (adapter.A @ x)


def merge(model: BaseModel, adapters: LoraAdapterSet) -> BaseModel:
    """New model with ``W0 + B A`` folded into every adapted layer."""
    updates = {}
    for name, a in adapters.items():
        if name not in model.parameters:
            raise ConfigurationError(f"adapter for unknown layer {name!r}")
        w = model.parameters[name]
        if w.shape != a.shape:
            raise ConfigurationError(f"layer {name!r}: adapter shape {a.shape} != weight {w.shape}")
        updates[name] = (w + a.B @ a.A).astype(w.dtype)
    return model.with_parameters(updates)


def trainable_param_count(model: BaseModel, rank: int) -> tuple[int, int, float]:
    """(adapter params, base params, adapter/base) for uniform rank ``rank``."""
    adapter_params = 0
    for name in model.adapted_layers():
        d, k = model.parameters[name].shape
        adapter_params += rank * (d + k)
    base_params = model.num_parameters()
    return adapter_params, base_params, adapter_params / base_params


# ---------------------------------------------------------------------------
# wire format
#
#   b"FLADP1", u32 rank, u32 layer count,
#   per layer: u32 name length, utf-8 name, u32 d, u32 k,
#              A (r*k f32 row-major), B (d*r f32 row-major)


def header_bytes(layer_names) -> int:
    """Bytes of a serialized adapter set that are not tensor entries."""
    return 6 + 4 + 4 + sum(4 + len(n.encode()) + 8 for n in layer_names)


def payload_bytes(adapters: LoraAdapterSet) -> int:
    return header_bytes(adapters.keys()) + 4 * adapters.num_params


def serialize_adapters(adapters: LoraAdapterSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", adapters.rank, len(adapters))]
    for name, a in adapters.items():
        raw = name.encode()
        d, k = a.shape
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", d, k))
        parts.append(np.ascontiguousarray(a.A, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(a.B, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_adapters(data: bytes, provenance=(0, "global")) -> LoraAdapterSet:
    if len(data) < 14 or data[:6] != MAGIC:
        raise FormatError("not an FLADP1 adapter file (bad magic or short header)")
    rank, count = struct.unpack_from("<II", data, 6)
    pos = 14
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode()
            if len(name.encode()) != n:
                raise FormatError("truncated layer name")
            pos += n
            d, k = struct.unpack_from("<II", data, pos)
            pos += 8
            need = 4 * rank * (k + d)
            if pos + need > len(data):
                raise FormatError(f"truncated tensors for layer {name!r}")
            A = np.frombuffer(data, "<f4", rank * k, pos).reshape(rank, k).astype(np.float32)
            pos += 4 * rank * k
            B = np.frombuffer(data, "<f4", d * rank, pos).reshape(d, rank).astype(np.float32)
            pos += 4 * d * rank
            out[name] = LoraAdapter(name, A, B)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt adapter file: {exc}") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last layer")
    return LoraAdapterSet(out, provenance=provenance)


def save_adapters(adapters: LoraAdapterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_adapters(adapters))


def load_adapters(path, provenance=(0, "global")) -> LoraAdapterSet:
    with open(path, "rb") as fh:
        return deserialize_adapters(fh.read(), provenance=provenance)
