"""Adam with decoupled weight decay, plus the cosine learning-rate schedule.

The optimizer is keyed by parameter name so its moment buffers serialize into
checkpoints and restore onto a rebuilt model without relying on object
identity.  Weight decay is applied directly to the parameter (not through the
moments), the decoupled convention.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor

__all__ = ["Adam", "cosine_lr"]


class Adam:
    def __init__(self, named_params, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractViolation("learning rate must be positive")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractViolation("betas must lie in [0,1)")
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractViolation("duplicate parameter names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        """One update over all parameters that received a gradient."""
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self._m.items()},
            "v": {n: a.copy() for n, a in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self._m) or set(state["v"]) != set(self._v):
            raise ContractViolation("optimizer state names do not match parameters")
        self.t = int(state["t"])
        for n in self._m:
            if state["m"][n].shape != self._m[n].shape:
                raise ContractViolation(f"moment shape mismatch for {n}")
            self._m[n] = state["m"][n].astype(self._m[n].dtype, copy=True)
            self._v[n] = state["v"][n].astype(self._v[n].dtype, copy=True)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0,
              warmup_steps: int = 0) -> float:
    """Half-cosine decay from base_lr down to min_lr at total_steps, with an
    optional linear ramp up to base_lr over the first warmup_steps steps.

    The ramp reaches base_lr at step warmup_steps - 1 and the cosine phase
    spans the remaining steps, so the two pieces meet without a jump.  The
    early steps of joint-embedding training are dominated by the invariance
    gradient, and a full-size step there can drive the encoder into the
    constant solution before the variance term has any say; ramping the rate
    lets the embedding spread out first."""
    if total_steps < 1:
        raise ContractViolation("total_steps must be >= 1")
    if warmup_steps < 0:
        raise ContractViolation("warmup_steps must be >= 0")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return min_lr
    frac = min(max((step - warmup_steps) / (total_steps - warmup_steps),
                   0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
