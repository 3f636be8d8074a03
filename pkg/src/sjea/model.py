"""Stacked joint-embedding model: chained encoders with per-stack heads.

Stack 0 consumes images; each later stack consumes a configured output form
of the stack below (spatial pre-pool map by default, pooled vector or head
embedding as ablations — vectors are reshaped to (N,C,1,1) feature maps).
An optional stop-gradient detaches the hand-off so upper-stack losses cannot
reach lower-stack parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import ViewPair
from .errors import ConfigError, ContractViolation, TrainingDivergence
from .losses import LossBreakdown, LossWeights, sjea_total_loss
from .nn import Encoder, EncoderConfig, Module, ModuleList, Projector
from .optim import Adam
from .tensor import Tape, Tensor, reshape

__all__ = ["StackSpec", "StackOutputs", "SJEAModel", "build_sjea", "train_step"]

_STACK_INPUTS = ("prepool", "pooled", "projector_embedding")


@dataclass(frozen=True)
class StackSpec:
    """Stack count, per-stack head switches, hand-off form, gradient barrier."""
    num_stacks: int = 2
    projector_enabled: tuple[bool, ...] = (True, True)
    stack_input: str = "prepool"
    stop_gradient: bool = False

    def __post_init__(self):
        if self.num_stacks < 1:
            raise ContractViolation("num_stacks must be >= 1")
        if len(self.projector_enabled) != self.num_stacks:
            raise ContractViolation(
                f"projector_enabled needs {self.num_stacks} entries, "
                f"got {len(self.projector_enabled)}")
        if self.stack_input not in _STACK_INPUTS:
            raise ContractViolation(
                f"stack_input must be one of {_STACK_INPUTS}, got {self.stack_input!r}")
        if self.stack_input == "projector_embedding":
            for k in range(1, self.num_stacks):
                if not self.projector_enabled[k - 1]:
                    raise ContractViolation(
                        "projector_embedding hand-off requires the feeding stack's "
                        f"projector (stack {k - 1} has none)")


@dataclass
class StackOutputs:
    """Per stack, per view: spatial map, pooled vector, and loss embedding."""
    prepool: list[tuple[Tensor, Tensor]]
    pooled: list[tuple[Tensor, Tensor]]
    embeddings: list[tuple[Tensor, Tensor]]

    @property
    def num_stacks(self) -> int:
        return len(self.embeddings)


class _Stack(Module):
    def __init__(self, encoder: Encoder, projector: Projector | None):
        super().__init__()
        self.encoder = encoder
        self.projector = projector


class SJEAModel(Module):
    def __init__(self, spec: StackSpec, stacks: list[_Stack]):
        super().__init__()
        self.spec = spec
        self.stacks = ModuleList(stacks)

    def encoder(self, k: int) -> Encoder:
        return self.stacks[k].encoder

    def projector(self, k: int) -> Projector | None:
        return self.stacks[k].projector

    def _hand_off(self, prepool: Tensor, pooled: Tensor, z: Tensor) -> Tensor:
        kind = self.spec.stack_input
        if kind == "prepool":
            out = prepool
        elif kind == "pooled":
            out = reshape(pooled, (pooled.shape[0], pooled.shape[1], 1, 1))
        else:
            out = reshape(z, (z.shape[0], z.shape[1], 1, 1))
        return out.detach() if self.spec.stop_gradient else out

    def represent(self, x: Tensor, stack: int, training: bool = False) -> Tensor:
        """Pooled representation of one stack, touching only stacks 0..stack.

        Projectors are skipped entirely unless the hand-off consumes their
        embedding, matching the evaluation protocol of probing pooled vectors.
        """
        if not 0 <= stack < self.spec.num_stacks:
            raise ContractViolation(
                f"stack {stack} out of range for {self.spec.num_stacks} stacks")
        cur = x
        for k in range(stack + 1):
            s = self.stacks[k]
            prepool, pooled = s.encoder.forward(cur, training)
            if k == stack:
                return pooled
            if self.spec.stack_input == "projector_embedding":
                z = s.projector.forward(pooled, training)
            else:
                z = pooled
            cur = self._hand_off(prepool, pooled, z)

    def forward(self, views: ViewPair | tuple[Tensor, Tensor],
                training: bool) -> StackOutputs:
        v1, v2 = (views.v1, views.v2) if isinstance(views, ViewPair) else views
        if v1.shape != v2.shape:
            raise ContractViolation("paired views must share a shape")
        outs = StackOutputs([], [], [])
        x1, x2 = v1, v2
        for k in range(self.spec.num_stacks):
            stack = self.stacks[k]
            p1, y1 = stack.encoder.forward(x1, training)
            p2, y2 = stack.encoder.forward(x2, training)
            if stack.projector is not None:
                z1 = stack.projector.forward(y1, training)
                z2 = stack.projector.forward(y2, training)
            else:
                z1, z2 = y1, y2
            outs.prepool.append((p1, p2))
            outs.pooled.append((y1, y2))
            outs.embeddings.append((z1, z2))
            if k + 1 < self.spec.num_stacks:
                x1 = self._hand_off(p1, y1, z1)
                x2 = self._hand_off(p2, y2, z2)
        return outs


def _stack_in_channels(spec: StackSpec, enc_cfgs: Sequence[EncoderConfig],
                       proj_dims: Sequence[tuple[int, int, int] | None],
                       k: int) -> int:
    if spec.stack_input == "projector_embedding":
        return proj_dims[k - 1][2]
    return enc_cfgs[k - 1].widths[3]


def build_sjea(spec: StackSpec, enc_cfgs: Sequence[EncoderConfig],
               proj_dims: Sequence[tuple[int, int, int] | None],
               rng: np.random.Generator) -> SJEAModel:
    """Assemble the stacked model, validating the encoder chain first."""
    if len(enc_cfgs) != spec.num_stacks or len(proj_dims) != spec.num_stacks:
        raise ConfigError(
            f"need {spec.num_stacks} encoder configs and projector dims, "
            f"got {len(enc_cfgs)} and {len(proj_dims)}")
    for k in range(spec.num_stacks):
        if spec.projector_enabled[k] and proj_dims[k] is None:
            raise ConfigError(f"stack {k} projector enabled but no dims given")
        if k == 0:
            continue
        if enc_cfgs[k].stem != "feature":
            raise ConfigError(
                f"stack {k} encoder must use the feature stem, got {enc_cfgs[k].stem!r}")
        expected = _stack_in_channels(spec, enc_cfgs, proj_dims, k)
        if enc_cfgs[k].in_channels != expected:
            raise ConfigError(
                f"stack {k} expects {expected} input channels to match the "
                f"stack {k - 1} {spec.stack_input} output, got {enc_cfgs[k].in_channels}")

    stacks = []
    for k in range(spec.num_stacks):
        encoder = Encoder(enc_cfgs[k], rng)
        projector = None
        if spec.projector_enabled[k]:
            projector = Projector(encoder.out_channels, proj_dims[k], rng)
        stacks.append(_Stack(encoder, projector))
    return SJEAModel(spec, stacks)


def train_step(model: SJEAModel, views: ViewPair, w: LossWeights,
               optimizer: Adam,
               stack_weights: Sequence[float] | None = None) -> LossBreakdown:
    """Forward, backward, and one optimizer update; returns the loss parts."""
    optimizer.zero_grad()
    with Tape() as tape:
        outs = model.forward(views, training=True)
        total, breakdown = sjea_total_loss(outs.embeddings, w, stack_weights)
    if not np.isfinite(breakdown.total):
        raise TrainingDivergence(
            "non-finite training loss",
            diagnostics={
                "total": breakdown.total,
                "s": breakdown.s, "v": breakdown.v, "c": breakdown.c,
                "max_abs_param": max(float(np.abs(p.data).max())
                                     for _, p in model.named_parameters()),
            })
    tape.backward(total)
    optimizer.step()
    return breakdown
