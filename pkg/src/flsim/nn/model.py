"""Byte-level decoder-only transformer with optional low-rank adapters.

Pre-norm blocks, learned absolute positions, bias-free linear layers stored
as ``(out_features, in_features)`` matrices so a layer computes ``W @ x``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from flsim.errors import ConfigurationError, InputError
from flsim.nn import autodiff as ad
from flsim.nn.autodiff import GradientTape, Tensor

N_BYTES = 256
BOS = 256
EOS = 257
PAD = 258

ADAPTED_SUFFIXES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 320

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ConfigurationError(f"{field} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be at least 2")
        if self.vocab_size < 259:
            raise ConfigurationError("vocab_size must cover 256 bytes plus BOS/EOS/PAD")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every base parameter name and shape, in declaration order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + "attn." + name] = (d, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "mlp.up"] = (f, d)
        shapes[p + "mlp.down"] = (d, f)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["lm_head"] = (v, d)
    return shapes


def adapted_layer_names(config: ModelConfig) -> list[str]:
    """Linear layers that receive adapters, in canonical order."""
    return [
        f"blocks.{i}.{suffix}" for i in range(config.n_layers) for suffix in ADAPTED_SUFFIXES
    ]


class BaseModel:
    """Named parameters of the transformer.

    Arrays are made read-only on construction; when ``frozen`` is set no
    code path hands them to a tape as trainable.
    """

    def __init__(self, config: ModelConfig, parameters: Mapping[str, np.ndarray], frozen: bool = True):
        expected = parameter_shapes(config)
        if list(parameters) != list(expected):
            missing = set(expected) - set(parameters)
            extra = set(parameters) - set(expected)
            raise ConfigurationError(
                f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})"
            )
        dtypes = {np.asarray(a).dtype for a in parameters.values()}
        if len(dtypes) != 1:
            raise ConfigurationError(f"mixed parameter dtypes: {dtypes}")
        params = {}
        for name, arr in parameters.items():
            arr = np.array(arr, copy=True)
            if arr.shape != expected[name]:
                raise ConfigurationError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            arr.setflags(write=False)
            params[name] = arr
        self.config = config
        self.parameters: dict[str, np.ndarray] = params
        self.frozen = frozen

    @property
    def dtype(self) -> np.dtype:
        return self.parameters["tok_emb"].dtype

    def adapted_layers(self) -> list[str]:
        return adapted_layer_names(self.config)

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters.items():
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def with_parameters(self, updates: Mapping[str, np.ndarray]) -> "BaseModel":
        params = dict(self.parameters)
        params.update(updates)
        return BaseModel(self.config, params, frozen=self.frozen)

    def astype(self, dtype) -> "BaseModel":
        return BaseModel(
            self.config, {k: v.astype(dtype) for k, v in self.parameters.items()}, frozen=self.frozen
        )

    def __repr__(self) -> str:
        return f"BaseModel({self.config}, params={self.num_parameters()}, dtype={self.dtype})"


def init_base_model(config: ModelConfig, seed: int, dtype=np.float32) -> BaseModel:
    """Seeded random weights: N(0, 1/fan_in) for linears, unit-scale embeddings."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 1.0, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        params[name] = arr.astype(dtype)
    return BaseModel(config, params, frozen=True)


def _check_adapters(model: BaseModel, adapters) -> None:
    layers = model.adapted_layers()
    names = list(adapters.keys())
    if names != layers:
        missing = [n for n in layers if n not in names]
        extra = [n for n in names if n not in layers]
        bad = (missing or extra)[0] if (missing or extra) else names[0]
        raise ConfigurationError(f"adapter layer set does not match model at layer {bad!r}")
    for name in layers:
        ad_ = adapters[name]
        d, k = model.parameters[name].shape
        if ad_.A.shape[1] != k or ad_.B.shape[0] != d or ad_.A.shape[0] != ad_.B.shape[1]:
            raise ConfigurationError(
                f"adapter shape mismatch at layer {name!r}: A{ad_.A.shape} B{ad_.B.shape} vs W{(d, k)}"
            )


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise InputError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")


def forward_lm(
    model: BaseModel,
    adapters=None,
    tokens=None,
    *,
    train_adapters: bool = True,
    tape: GradientTape | None = None,
) -> tuple[Tensor, GradientTape]:
    """Logits for every position; shape (T, V) for a sequence or (B, T, V) for a batch.

    When ``adapters`` is given every adapted linear layer computes
    ``W0 x + B (A x)`` and, with ``train_adapters``, each A/B is watched on
    the tape under ``"<layer>.A"`` / ``"<layer>.B"``.
    """
    cfg = model.config
    batch, single = _as_batch(tokens)
    bsz, t = batch.shape
    if t < 1:
        raise InputError("empty token sequence")
    if t > cfg.max_seq_len:
        raise InputError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise InputError("token id out of vocabulary range")
    if adapters is not None:
        _check_adapters(model, adapters)

    tape = tape if tape is not None else GradientTape()
    P = model.parameters
    const = {name: tape.constant(arr) for name, arr in P.items()}
    lora = {}
    if adapters is not None:
        for name in model.adapted_layers():
            a = adapters[name]
            if train_adapters:
                lora[name] = (tape.watch(name + ".A", a.A), tape.watch(name + ".B", a.B))
            else:
                lora[name] = (tape.constant(a.A), tape.constant(a.B))

    def linear(x: Tensor, name: str) -> Tensor:
        y = ad.matmul_t(x, const[name])
        if name in lora:
            A, B = lora[name]
            y = ad.add(y, ad.matmul_t(ad.matmul_t(x, A), B))
        return y

    x = tape.constant(P["tok_emb"][batch] + P["pos_emb"][:t])
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h = ad.layer_norm(x, const[p + "ln1.gain"], const[p + "ln1.bias"])
        att = ad.causal_attention(
            linear(h, p + "attn.q"), linear(h, p + "attn.k"), linear(h, p + "attn.v"), cfg.n_heads
        )
        x = ad.add(x, linear(att, p + "attn.o"))
        h = ad.layer_norm(x, const[p + "ln2.gain"], const[p + "ln2.bias"])
        x = ad.add(x, linear(ad.gelu(linear(h, p + "mlp.up")), p + "mlp.down"))
    x = ad.layer_norm(x, const["ln_f.gain"], const["ln_f.bias"])
    logits = ad.matmul_t(x, const["lm_head"])
    if single:
        logits = ad.reshape(logits, (t, cfg.vocab_size))
    return logits, tape


def loss_next_token(logits: Tensor, tokens, loss_mask) -> Tensor:
    """Mean next-token cross-entropy over positions flagged in ``loss_mask``.

    ``loss_mask[t]`` marks token ``t`` as a target; it is predicted from
    the logits at ``t - 1``, so ``loss_mask[0]`` can never contribute.
    """
    batch, _ = _as_batch(tokens)
    mask, _ = _as_batch(np.asarray(loss_mask, dtype=bool))
    if mask.shape != batch.shape:
        raise InputError(f"loss_mask shape {mask.shape} != tokens shape {batch.shape}")
    bsz, t = batch.shape
    targets = np.zeros_like(batch)
    targets[:, :-1] = batch[:, 1:]
    shifted = np.zeros_like(mask)
    shifted[:, :-1] = mask[:, 1:]
    if not shifted.any():
        raise InputError("loss mask selects no predictable positions")
    flat = ad.reshape(logits, (bsz * t, logits.shape[-1]))
    return ad.masked_cross_entropy(flat, targets.reshape(-1), shifted.reshape(-1))


def backward(tape: GradientTape) -> dict[str, np.ndarray]:
    """Gradients of the tape's loss for every trainable (adapter) tensor."""
    return tape.backward()


def logits_of(model: BaseModel, adapters, tokens) -> np.ndarray:
    """Inference-only forward returning a plain array."""
    logits, _ = forward_lm(model, adapters, tokens, train_adapters=False)
    return logits.data


def greedy_decode(model: BaseModel, adapters, prompt_tokens, max_new_tokens: int = 64) -> list[int]:
    """Append argmax tokens until EOS or the context is full."""
    seq = list(prompt_tokens)
    for _ in range(max_new_tokens):
        if len(seq) >= model.config.max_seq_len:
            break
        nxt = int(np.argmax(logits_of(model, adapters, seq)[-1]))
        seq.append(nxt)
        if nxt == EOS:
            break
    return seq[len(prompt_tokens):]
