"""SGD and Adam over ModelParams, written as pure functions returning new state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .encoder import ModelParams


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(params: ModelParams, grads: dict, state: OptimizerState) -> tuple:
    """Apply one update; ``grads`` maps parameter name -> ndarray or Tensor."""
    missing = [n for n in params.names() if n not in grads]
    if missing:
        raise ValueError(f"missing gradient for parameters {missing}")
    step = state.step + 1
    lr = state.learning_rate
    new, m_out, v_out = {}, dict(state.m), dict(state.v)
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if state.kind == "sgd":
            value = p.data - lr * g
        else:
            m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1 - state.beta1) * g
            v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** step)
            v_hat = v / (1 - state.beta2 ** step)
            value = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
            m_out[name], v_out[name] = m, v
        new[name] = Tensor(value, requires_grad=True)
    out_state = OptimizerState(state.kind, lr, state.beta1, state.beta2, state.eps, step, m_out, v_out)
    return params.replace(new), out_state
