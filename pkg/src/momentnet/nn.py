"""Parameter-holding layers built on the autodiff ops.

Layers are plain containers: construction draws weights from the rng handed
in (He-style normal for conv/linear, zeros for biases), ``__call__`` records
ops on the tape, and ``named_parameters``/``named_stats`` expose state in a
stable order for the optimizer and checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, padding: int | None = None, name: str = "conv"):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def named_stats(self):
        return []


class BatchNorm2d:
    def __init__(self, ch: int, name: str = "bn"):
        self.gamma = Tensor(np.ones(ch), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(ch), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.name = name

    def __call__(self, x: Tensor, training: bool, channel: int | None = None) -> Tensor:
        if channel is None:
            return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training)
        # Single-channel slice: stats views write through to the full buffers.
        g = T.narrow(self.gamma, 0, channel, 1)
        b = T.narrow(self.beta, 0, channel, 1)
        return T.batchnorm2d(
            x, g, b,
            self.running_mean[channel : channel + 1],
            self.running_var[channel : channel + 1],
            training,
        )

    def named_parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def named_stats(self):
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]


class Linear:
    def __init__(self, din: int, dout: int, rng, name: str = "linear", zero_init: bool = False, bias_init: np.ndarray | None = None):
        if zero_init:
            w = np.zeros((dout, din))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / din), (dout, din))
        b = np.zeros(dout) if bias_init is None else np.asarray(bias_init, dtype=np.float64).copy()
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(b, requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def named_stats(self):
        return []


class ResidualBlock:
    """conv-BN-ReLU-conv-BN with an identity skip, ReLU after the join."""

    def __init__(self, ch: int, kernel: int, rng, name: str = "res"):
        self.conv1 = Conv2d(ch, ch, kernel, rng, name=f"{name}.conv1")
        self.bn1 = BatchNorm2d(ch, name=f"{name}.bn1")
        self.conv2 = Conv2d(ch, ch, kernel, rng, name=f"{name}.conv2")
        self.bn2 = BatchNorm2d(ch, name=f"{name}.bn2")

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        return T.relu(T.add(h, x))

    def named_parameters(self):
        out = []
        for m in (self.conv1, self.bn1, self.conv2, self.bn2):
            out.extend(m.named_parameters())
        return out

    def named_stats(self):
        return self.bn1.named_stats() + self.bn2.named_stats()


def set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for _, p in m.named_parameters():
            p.requires_grad = flag
