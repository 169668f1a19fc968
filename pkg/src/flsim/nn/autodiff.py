"""Tape-based reverse-mode differentiation over numpy arrays.

Each op computes its output eagerly and, when any input needs a gradient,
appends a closure to the tape that maps the output gradient to input
gradients. ``GradientTape.backward`` replays the closures in reverse.

Ops are fused at the layer level (linear, layer norm, attention, ...) so a
forward pass through the toy transformer records a few dozen entries rather
than one per scalar.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from flsim.errors import InputError, UsageError


class Tensor:
    """A numpy array tracked by a tape."""

    __slots__ = ("data", "requires_grad", "tape", "name")

    def __init__(self, data: np.ndarray, tape: "GradientTape", requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], tuple]


class GradientTape:
    """Ordered record of differentiable ops."""

    def __init__(self) -> None:
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._watched: dict[str, Tensor] = {}
        self._consumed = False
        self.output: Tensor | None = None

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """Register a trainable parameter; its gradient is reported under ``name``."""
        t = Tensor(array, self, requires_grad=True, name=name)
        self._watched[name] = t
        return t

    def constant(self, array: np.ndarray) -> Tensor:
        return Tensor(array, self, requires_grad=False)

    @property
    def watched(self) -> dict[str, Tensor]:
        return dict(self._watched)

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, self, requires_grad=needs)
        if needs:
            self._ops.append((out, parents, backward))
        return out

    def backward(self, output: Tensor | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar output w.r.t. every watched tensor.

        Defaults to the last scalar produced by a loss op. Watched tensors
        the output does not depend on get zero gradients.
        """
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward()")
        output = output if output is not None else self.output
        if output is None:
            raise UsageError("no loss recorded on this tape")
        if output.data.size != 1:
            raise InputError(f"backward() needs a scalar output, got shape {output.data.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, parents, fn in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._ops.clear()
        return {
            name: grads.get(id(t), np.zeros_like(t.data)) for name, t in self._watched.items()
        }


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a.tape.record(a.data + b.data, (a, b), bw)


def matmul_t(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for x of shape (..., k) and w of shape (d, k)."""

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gx, gw

    return x.tape.record(x.data @ w.data.T, (x, w), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return x.tape.record(out, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return x.tape.record(out, (x,), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal scaled dot-product attention on (B, T, d) inputs."""
    bsz, t, d = q.shape
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)

    def split(a):
        return a.reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    future = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = (probs @ vh).transpose(0, 2, 1, 3).reshape(bsz, t, d)

    def bw(g):
        gh = split(g)
        gv = probs.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(bsz, t, d)

        return merge(gq), merge(gk), merge(gv)

    return q.tape.record(out, (q, k, v), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return x.tape.record(x.data.reshape(shape), (x,), bw)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions where ``mask`` is true.

    ``logits`` is (N, V); ``targets`` and ``mask`` are length N.
    """
    n_active = int(mask.sum())
    if n_active == 0:
        raise InputError("loss mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(targets))
    picked = logp[rows, targets]
    loss = -(picked * mask).sum() / n_active
    out_data = np.asarray(loss, dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        p *= (mask.astype(p.dtype) / p.dtype.type(n_active))[:, None]
        return (p * g,)

    out = logits.tape.record(out_data, (logits,), bw)
    logits.tape.output = out
    return out
