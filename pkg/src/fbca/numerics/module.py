"""Parameter containers: a minimal ``Module`` base, Conv-BN-LeakyReLU and gating MLPs.

Attributes holding ``Tensor`` are learnable parameters; attributes holding
``np.ndarray`` are buffers (batch-norm running statistics). Traversal follows
attribute assignment order, which fixes parameter names and ordering.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .rng import RngStream
from .tensor import Tensor


class Module:
    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or value is None:
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own_params = dict(self.named_parameters())
        own_bufs = dict(self.named_buffers())
        missing = (set(own_params) | set(own_bufs)) - set(state)
        unexpected = set(state) - set(own_params) - set(own_bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own_params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in own_bufs.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: RngStream, shape: tuple[int, ...], fan_in: int, dtype=np.float64) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def ones_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    """Plain convolution with bias (no normalization, no activation)."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, rng: RngStream | None = None,
                 dtype=np.float64):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        rng = rng or RngStream(0)
        self.kernel = he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.bias = zeros_param((c_out,), dtype)
        self._stride = stride
        self._pad = (k - 1) // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.bias, stride=self._stride, padding=self._pad)


class ConvBnAct(Module):
    """Conv -> BatchNorm -> LeakyReLU, padding (k-1)/2."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int = 1,
        stride: int = 1,
        rng: RngStream | None = None,
        conv_bias: bool = True,
        negative_slope: float = 0.1,
        bn_eps: float = 1e-5,
        bn_momentum: float = 0.03,
        dtype=np.float64,
    ):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if not 0.0 < bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")
        rng = rng or RngStream(0)
        self.kernel = he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.conv_bias = zeros_param((c_out,), dtype) if conv_bias else None
        self.bn_gamma = ones_param((c_out,), dtype)
        self.bn_beta = zeros_param((c_out,), dtype)
        self.bn_running_mean = np.zeros(c_out, dtype=dtype)
        self.bn_running_var = np.ones(c_out, dtype=dtype)
        self._k = k
        self._stride = stride
        self._eps = bn_eps
        self._momentum = bn_momentum
        self._slope = negative_slope

    @property
    def k(self) -> int:
        return self._k

    @property
    def stride(self) -> int:
        return self._stride

    @property
    def negative_slope(self) -> float:
        return self._slope

    def conv(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.conv_bias, stride=self._stride, padding=(self._k - 1) // 2)

    def bn(self, x: Tensor, training: bool) -> Tensor:
        return F.batch_norm(x, self.bn_gamma, self.bn_beta, self.bn_running_mean, self.bn_running_var,
                            training, self._momentum, self._eps)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x), training), self._slope)


class MlpGate(Module):
    """sigmoid(W2 act(W1 v + b1) + b2) with a C -> C/r -> C bottleneck."""

    def __init__(self, channels: int, r: int, rng: RngStream | None = None, negative_slope: float = 0.1,
                 dtype=np.float64):
        if r <= 0 or channels % r:
            raise ValueError(f"compression ratio {r} must divide channel count {channels}")
        rng = rng or RngStream(0)
        hidden = channels // r
        self.w1 = he_normal(rng, (hidden, channels), channels, dtype)
        self.b1 = zeros_param((hidden,), dtype)
        self.w2 = he_normal(rng, (channels, hidden), hidden, dtype)
        self.b2 = zeros_param((channels,), dtype)
        self._slope = negative_slope

    def forward(self, v: Tensor) -> Tensor:
        hidden = F.leaky_relu(F.linear(v, self.w1, self.b1), self._slope)
        return F.sigmoid(F.linear(hidden, self.w2, self.b2))
