"""Adam with bias correction and coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter moments and step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, name: str = "param") -> None:
    """One bias-corrected Adam update; decay enters as an additive L2 gradient term."""
    if grad.shape != param.data.shape:
        raise NumericError(f"gradient shape {grad.shape} does not match {name} {param.data.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    if weight_decay:
        grad = grad + weight_decay * param.data
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    """Optimizer over named parameters; params without a gradient are skipped.

    Skipping (rather than treating a missing gradient as zero) matters with
    coupled decay: a parameter outside the loss graph must stay bit-identical.
    """

    params: dict[str, Tensor]
    lr: float = 1e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.state.setdefault(name, AdamState.for_param(p))

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p, p.grad, self.state[name], self.lr, self.weight_decay,
                      self.beta1, self.beta2, self.eps, name=name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
