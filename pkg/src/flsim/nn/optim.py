"""SGD and Adam over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from flsim.errors import ConfigurationError

OPTIMIZERS = ("sgd", "adam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")


def optimizer_step(
    state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place."""
    if set(params) != set(grads):
        raise ConfigurationError(
            f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}"
        )
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ConfigurationError(f"{name}: param shape {p.shape} != grad shape {grads[name].shape}")

    state.step += 1
    lr = state.learning_rate
    out = {}
    if state.kind == "sgd":
        for name, p in params.items():
            out[name] = (p - lr * grads[name]).astype(p.dtype)
        return out

    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif state.m[name].shape != p.shape:
            raise ConfigurationError(f"{name}: moment buffer shape {state.m[name].shape} != {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - update).astype(p.dtype)
    return out
