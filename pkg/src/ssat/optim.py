"""SGD and Adam over named parameter tensors."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(lr):
    return OptimizerState(kind="sgd", learning_rate=lr)


def adam(lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    return OptimizerState(kind="adam", learning_rate=lr, beta1=betas[0], beta2=betas[1], eps=eps)


def optimizer_step(state, params):
    """Apply one update to every tensor in ``params`` and zero its grad.

    ``params`` maps names to Tensors. Every parameter must carry a gradient;
    a missing one raises ``ValueError`` naming it, before anything changes.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"optimizer_step: parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"optimizer_step: gradient shape {p.grad.shape} != {p.data.shape} for {name!r}")

    state.step_count += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params.values():
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)
            p.grad = None
        return params

    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
        p.grad = None
    return params
