"""Parameterised layers built on the tensor primitives."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class Module:
    """Base class: parameters are ``Tensor`` attributes with ``requires_grad``.

    Submodules may be stored directly or in lists; names follow attribute
    order, e.g. ``stages.0.1.convs.2.conv.weight``.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
        for name, child in self._children():
            out.extend(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        out = []
        for name, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            if missing or extra:
                raise DimensionError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in expected:
                continue
            current = params[name].data if name in params else buffers[name]
            value = np.asarray(value)
            if value.shape != current.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {current.shape}")
            if name in params:
                params[name].data = value.astype(current.dtype, copy=True)
            else:
                current[...] = value


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def _dtype(dtype):
    return np.dtype(dtype) if dtype is not None else T.get_default_dtype()


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, bias=False, rng=None, dtype=None):
        dtype = _dtype(dtype)
        k = int(kernel_size)
        self.stride = stride
        self.weight = Tensor(
            kaiming_uniform(_rng(rng), (out_channels, in_channels, k, k), in_channels * k * k, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype), requires_grad=True) if bias else None

    def forward(self, x):
        out = T.conv2d(x, self.weight, self.stride)
        if self.bias is not None:
            out = T.add(out, T.reshape(self.bias, (-1, 1, 1)))
        return out


class BatchNorm2d(Module):
    """Per-channel batch normalisation; running variance uses the unbiased estimate."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=None):
        dtype = _dtype(dtype)
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean), (prefix + "running_var", self.running_var)]

    def forward(self, x, relu=False):
        if x.shape[1] != self.gamma.shape[0]:
            raise DimensionError(f"batchnorm for {self.gamma.shape[0]} channels got {x.shape[1]}")
        if not self.training:
            return T.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps, relu)
        out, mean, var = T.batch_norm(x, self.gamma, self.beta, self.eps, relu)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = self.momentum
        self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
        self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        return out


class ConvUnit(Module):
    """Convolution, optionally followed by batch normalisation and ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, batchnorm=True, activation=True,
                 rng=None, dtype=None):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype) if batchnorm else None
        self.activation = activation

    def forward(self, x):
        out = self.conv(x)
        if self.bn is not None:
            return self.bn(out, relu=self.activation)
        return T.relu(out) if self.activation else out


class Dense(Module):
    """Fully-connected layer computing ``Wᵀx + b`` with ``W`` of shape (in, out)."""

    def __init__(self, in_dim, out_dim, bias=True, rng=None, dtype=None):
        dtype = _dtype(dtype)
        self.weight = Tensor(kaiming_uniform(_rng(rng), (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return T.dense(x, self.weight, self.bias)


def dense_forward(layer: Dense, x: Tensor) -> Tensor:
    return layer(x)


class SEBlock(Module):
    """Squeeze-and-excitation: scale channels by ``σ(W2ᵀ δ(W1ᵀ mean(x) + b1) + b2)``."""

    def __init__(self, channels, reduction=4, rng=None, dtype=None):
        hidden = max(1, channels // reduction)
        self.reduction = reduction
        self.fc1 = Dense(channels, hidden, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Dense(hidden, channels, bias=True, rng=rng, dtype=dtype)

    def gate(self, x):
        squeezed = T.mean_over(x, (-2, -1))
        return T.sigmoid(self.fc2(T.relu(self.fc1(squeezed))))

    def forward(self, x):
        if x.shape[-3] != self.fc1.weight.shape[0]:
            raise DimensionError(f"SE block for {self.fc1.weight.shape[0]} channels got {x.shape[-3]}")
        return T.channel_mul(x, self.gate(x))


def se_forward(block: SEBlock, x: Tensor) -> Tensor:
    return block(x)


def batchnorm_forward(state: BatchNorm2d, x: Tensor, mode: str = "train") -> Tensor:
    previous = state.training
    state.training = mode == "train"
    try:
        return state(x)
    finally:
        state.training = previous
