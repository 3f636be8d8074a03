"""Invariance / variance / covariance objective and its sum across stacks.

All three terms are differentiable Tensor expressions; the float breakdown
returned alongside the total is detached and meant for logging.  Inputs are
(N, D) embedding matrices where N is the batch and D the embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation
from .tensor import (
    Tensor,
    add,
    div,
    matmul,
    mul,
    relu,
    sqrt,
    square,
    sub,
    tmean,
    transpose,
    tsum,
    tvar,
)

__all__ = [
    "LossWeights", "LossParts", "LossBreakdown",
    "invariance_loss", "variance_loss", "covariance_loss",
    "vicreg_loss", "sjea_total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Term weights: inv scales the paired-distance term, var the
    hinge-on-std term, cov the off-diagonal covariance term."""
    inv: float = 25.0
    var: float = 25.0
    cov: float = 1.0
    gamma: float = 1.0        # target per-dimension standard deviation
    epsilon: float = 1e-4     # guard inside the std square root

    def __post_init__(self):
        if self.inv < 0 or self.var < 0 or self.cov < 0:
            raise ContractViolation("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ContractViolation("epsilon must be positive")


class LossParts(NamedTuple):
    """Unweighted per-stack component values (floats, for logging)."""
    s: float   # paired-distance term
    v: float   # variance hinge term, both views summed
    c: float   # covariance term, both views summed


@dataclass(frozen=True)
class LossBreakdown:
    """Per-stack unweighted components plus the weighted grand total."""
    s: tuple[float, ...]
    v: tuple[float, ...]
    c: tuple[float, ...]
    total: float

    def __post_init__(self):
        if not (len(self.s) == len(self.v) == len(self.c)):
            raise ContractViolation("breakdown component tuples must align")

    @property
    def num_stacks(self) -> int:
        return len(self.s)

    def recombined(self, w: LossWeights, stack_weights: Sequence[float]) -> float:
        """Re-derive the total from the parts (logging sanity check)."""
        return sum(sw * (w.inv * s + w.var * v + w.cov * c)
                   for sw, s, v, c in zip(stack_weights, self.s, self.v, self.c))


def _check_embedding(z: Tensor, min_batch: int) -> None:
    if z.data.ndim != 2:
        raise ContractViolation(f"embeddings must be (N,D), got {z.shape}")
    if z.shape[0] < min_batch:
        raise ContractViolation(
            f"need batch of at least {min_batch}, got {z.shape[0]}")


def invariance_loss(z1: Tensor, z2: Tensor) -> Tensor:
    """Mean over the batch of squared euclidean distance between paired rows."""
    _check_embedding(z1, 1)
    if z1.shape != z2.shape:
        raise ContractViolation(f"paired shapes differ: {z1.shape} vs {z2.shape}")
    d = sub(z1, z2)
    return tmean(tsum(square(d), axis=1))


def variance_loss(z: Tensor, gamma: float = 1.0, epsilon: float = 1e-4) -> Tensor:
    """Hinge pushing each dimension's std over the batch up to gamma."""
    _check_embedding(z, 2)
    v = tvar(z, axis=0, unbiased=True)
    std = sqrt(add(v, Tensor(np.full(z.shape[1], epsilon, dtype=z.dtype.type))))
    hinge = relu(sub(Tensor(np.full(z.shape[1], gamma, dtype=z.dtype.type)), std))
    return tmean(hinge)


def covariance_loss(z: Tensor) -> Tensor:
    """Mean of squared off-diagonal entries of the batch covariance, times D/D.

    With C the unbiased covariance of the rows, returns (1/D) Σ_{p≠q} C_pq².
    """
    _check_embedding(z, 2)
    n, d = z.shape
    zc = sub(z, tmean(z, axis=0, keepdims=True))
    cov = div(matmul(transpose(zc), zc), Tensor(np.asarray(n - 1, dtype=z.dtype.type)))
    off_diag = Tensor((1.0 - np.eye(d, dtype=z.dtype.type)))
    return div(tsum(square(mul(cov, off_diag))),
               Tensor(np.asarray(d, dtype=z.dtype.type)))


def vicreg_loss(z1: Tensor, z2: Tensor, w: LossWeights = LossWeights()
                ) -> tuple[Tensor, LossParts]:
    """Weighted sum of the three terms; parts come back unweighted."""
    s = invariance_loss(z1, z2)
    v = add(variance_loss(z1, w.gamma, w.epsilon),
            variance_loss(z2, w.gamma, w.epsilon))
    c = add(covariance_loss(z1), covariance_loss(z2))

    def scale(t: Tensor, k: float) -> Tensor:
        return mul(t, Tensor(np.asarray(k, dtype=t.dtype.type)))

    total = add(add(scale(s, w.inv), scale(v, w.var)), scale(c, w.cov))
    return total, LossParts(s.item(), v.item(), c.item())


def sjea_total_loss(per_stack: Sequence[tuple[Tensor, Tensor]],
                    w: LossWeights = LossWeights(),
                    stack_weights: Sequence[float] | None = None,
                    ) -> tuple[Tensor, LossBreakdown]:
    """Sum of the per-stack objectives, each scaled by its stack weight."""
    if len(per_stack) == 0:
        raise ContractViolation("need at least one stack")
    if stack_weights is None:
        stack_weights = [1.0] * len(per_stack)
    if len(stack_weights) != len(per_stack):
        raise ContractViolation(
            f"{len(stack_weights)} stack weights for {len(per_stack)} stacks")

    total: Tensor | None = None
    ss, vs, cs = [], [], []
    for (z1, z2), sw in zip(per_stack, stack_weights):
        stack_total, parts = vicreg_loss(z1, z2, w)
        weighted = mul(stack_total, Tensor(np.asarray(sw, dtype=stack_total.dtype.type)))
        total = weighted if total is None else add(total, weighted)
        ss.append(parts.s)
        vs.append(parts.v)
        cs.append(parts.c)
    breakdown = LossBreakdown(tuple(ss), tuple(vs), tuple(cs), total.item())
    return total, breakdown
