"""First-order optimizers: SGD with momentum and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    kind: str  # "sgd" or "adam"
    lr: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    # per-parameter moment buffers, keyed by position in the parameter list
    buffers: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(lr: float, momentum: float = 0.0) -> OptimizerState:
    return OptimizerState("sgd", lr, momentum=momentum)


def adam(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("adam", lr, beta1=beta1, beta2=beta2, eps=eps)


def step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Apply one update to every parameter, then clear the gradients.

    Raises:
        ValueError: a parameter has no gradient.
        AssertionError: a parameter is frozen.
    """
    for p in params:
        if p.frozen:
            raise AssertionError(f"optimizer asked to update frozen tensor {p.name!r}")
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; was it reachable from the loss?")
    state.t += 1
    for idx, p in enumerate(params):
        g = p.grad
        dt = p.dtype.type
        if state.kind == "sgd":
            if state.momentum:
                (buf,) = state.buffers.setdefault(idx, [np.zeros_like(p.data)])
                buf *= dt(state.momentum)
                buf += g
                update = buf
            else:
                update = g
            p.data -= dt(state.lr) * update
        else:
            m, v = state.buffers.setdefault(idx, [np.zeros_like(p.data), np.zeros_like(p.data)])
            m *= dt(state.beta1)
            m += dt(1 - state.beta1) * g
            v *= dt(state.beta2)
            v += dt(1 - state.beta2) * g * g
            m_hat = m / dt(1 - state.beta1 ** state.t)
            v_hat = v / dt(1 - state.beta2 ** state.t)
            p.data -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        assert all(b.shape == p.shape for b in state.buffers.get(idx, ())), p.name
        p.grad = None


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
