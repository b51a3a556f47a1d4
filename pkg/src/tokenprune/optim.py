"""AdamW optimizer (decoupled weight decay) over the autograd tensors."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import DimensionError


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place update. ``t`` is the 1-based step count for bias correction.

    Weight decay is decoupled: applied directly to the parameter, scaled by lr,
    independent of the adaptive step.
    """
    for name, arr in (("grad", grad), ("m", m), ("v", v)):
        if arr.shape != param.shape:
            raise DimensionError(f"adamw {name} shape {arr.shape} does not match param {param.shape}")
    b1, b2 = betas
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.t, lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            if state["m"][name].shape != self.params[name].data.shape:
                raise DimensionError(f"optimizer state shape mismatch for {name}")
            self.m[name] = state["m"][name]
            self.v[name] = state["v"][name]
