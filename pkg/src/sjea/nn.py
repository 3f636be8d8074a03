"""Layers and encoder architectures on top of the tensor engine.

Everything stateful derives from :class:`Module`, which auto-registers
parameters (trainable tensors), child modules, and batch-norm running state
on attribute assignment.  ``named_parameters``/``named_buffers`` walk the
tree in construction order, producing the dotted names the checkpoint format
stores.  Modules are mode-free; ``forward`` takes an explicit ``training``
flag so evaluation code cannot accidentally leave a layer in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractViolation
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    conv2d,
    matmul,
    max_pool2d,
    relu,
    tmean,
    transpose,
)

__all__ = [
    "Module", "ModuleList", "Linear", "Conv2d", "BatchNorm", "BasicBlock",
    "EncoderConfig", "Encoder", "Projector",
    "parameter_count", "global_avg_pool",
]


class Module:
    """Base class with automatic child/parameter/buffer registration."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_states", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, BatchNormState):
            self._states[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n, p in self._params.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_parameters(prefix + n + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Batch-norm running statistics, named alongside the parameters."""
        for n, s in self._states.items():
            yield prefix + n + ".running_mean", s.running_mean
            yield prefix + n + ".running_var", s.running_var
        for n, m in self._modules.items():
            yield from m.named_buffers(prefix + n + ".")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast all parameters and running buffers in place (for float64 checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self._iter_modules():
            for s in m._states.values():
                s.running_mean = s.running_mean.astype(dtype)
                s.running_var = s.running_var.astype(dtype)
        return self

    def _iter_modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m._iter_modules()


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._list))] = mod
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self) -> int:
        return len(self._list)

    def __getitem__(self, i: int) -> Module:
        return self._list[i]


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    # fan-in normal init with the relu gain sqrt(2)
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32),
                  requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = _kaiming(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise ContractViolation(
                f"linear expects (N,{self.in_features}), got {x.shape}")
        out = matmul(x, transpose(self.weight))
        return add(out, self.bias) if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = _kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=np.float32), requires_grad=True)
        self.state = BatchNormState(num_features)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training,
                          momentum=self.momentum, eps=self.eps)


class BasicBlock(Module):
    """Two 3x3 convs with a residual connection; 1x1 projection shortcut
    whenever stride or channel count changes."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride)
            self.shortcut_bn = BatchNorm(out_channels)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1.forward(self.conv1.forward(x), training))
        out = self.bn2.forward(self.conv2.forward(out), training)
        if self.shortcut_conv is not None:
            x = self.shortcut_bn.forward(self.shortcut_conv.forward(x), training)
        return relu(add(out, x))


@dataclass(frozen=True)
class EncoderConfig:
    """Residual encoder layout.

    stem selects how the input enters the trunk:
      * "image_cifar": 3x3 stride-1 conv, no pooling (inputs under 64 px)
      * "image": 7x7 stride-2 conv plus 3x3 stride-2 max pool (96 px inputs)
      * "feature": 3x3 stride-1 conv from a feature map, all stage strides 1,
        so the spatial extent of the input is preserved end to end
    """
    stem: str = "image_cifar"
    in_channels: int = 3
    widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    blocks: tuple[int, int, int, int] = (2, 2, 2, 2)

    def __post_init__(self):
        if self.stem not in ("image_cifar", "image", "feature"):
            raise ContractViolation(f"unknown stem {self.stem!r}")
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ContractViolation("widths and blocks must each have 4 entries")
        if any(w < 1 for w in self.widths) or any(b < 1 for b in self.blocks):
            raise ContractViolation("widths and blocks must be positive")


class Encoder(Module):
    """Four-stage residual trunk; returns the pre-pool feature map and its
    global average pool."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        w = config.widths
        if config.stem == "image":
            self.stem_conv = Conv2d(config.in_channels, w[0], 7, rng, stride=2, padding=3)
        else:
            self.stem_conv = Conv2d(config.in_channels, w[0], 3, rng, stride=1, padding=1)
        self.stem_bn = BatchNorm(w[0])
        strides = (1, 1, 1, 1) if config.stem == "feature" else (1, 2, 2, 2)
        self.stages = ModuleList()
        in_ch = w[0]
        for stage in range(4):
            blocks = ModuleList()
            for b in range(config.blocks[stage]):
                stride = strides[stage] if b == 0 else 1
                blocks.append(BasicBlock(in_ch, w[stage], stride, rng))
                in_ch = w[stage]
            self.stages.append(blocks)
        self.out_channels = w[3]

    def forward(self, x: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        if x.data.ndim != 4:
            raise ContractViolation(f"encoder expects NCHW input, got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ContractViolation(
                f"encoder expects {self.config.in_channels} input channels, got {x.shape[1]}")
        out = relu(self.stem_bn.forward(self.stem_conv.forward(x), training))
        if self.config.stem == "image":
            out = max_pool2d(out, 3, 2, padding=1)
        for stage in self.stages:
            for block in stage:
                out = block.forward(out, training)
        prepool = out
        pooled = tmean(prepool, axis=(2, 3))
        return prepool, pooled


class Projector(Module):
    """Expander head: three linear maps, the first two followed by BN+ReLU."""

    def __init__(self, in_dim: int, dims: tuple[int, int, int],
                 rng: np.random.Generator):
        super().__init__()
        if len(dims) != 3:
            raise ContractViolation("projector needs exactly 3 output dims")
        self.fc1 = Linear(in_dim, dims[0], rng)
        self.bn1 = BatchNorm(dims[0])
        self.fc2 = Linear(dims[0], dims[1], rng)
        self.bn2 = BatchNorm(dims[1])
        self.fc3 = Linear(dims[1], dims[2], rng)
        self.out_dim = dims[2]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1.forward(self.fc1.forward(x), training))
        out = relu(self.bn2.forward(self.fc2.forward(out), training))
        return self.fc3.forward(out)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ContractViolation(f"global_avg_pool expects NCHW, got {x.shape}")
    return tmean(x, axis=(2, 3))


def parameter_count(module: Module) -> int:
    return sum(p.size for _, p in module.named_parameters())
