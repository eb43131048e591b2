"""Channel-wise gates for the carry between Res2Net feature groups.

Three variants map pooled group statistics to a per-channel gate in (0, 1):

* ``scg``  - single group: ``σ(W_fcᵀ pool(y))`` with ``W_fc`` of shape (C, C)
* ``mcg``  - multi group: ``σ(W_fcᵀ [pool(y) ⊕ pool(x_next)])``, ``W_fc`` (2C, C)
* ``mlcg`` - multi group, latent space: each pooled group goes through its own
  bias-free projection to C/r dims with ReLU, then
  ``σ(W_fc3ᵀ [L1 ⊕ L2])`` with ``W_fc3`` (2C/r, C)

Concatenations always put the gated group ``y`` first and the reference
group ``x_next`` second.  Gates are computed per sample.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Dense, Module
from .tensor import DimensionError, Tensor

GATE_KINDS = ("scg", "mcg", "mlcg")


def avg_pool_spatial(y: Tensor) -> Tensor:
    """Mean over the spectrum and time axes: (..., C, D, T) -> (..., C).

    Values are summed in sorted order, so the result is bit-for-bit
    independent of how the spatial positions are arranged.
    """
    if y.ndim < 3:
        raise DimensionError(f"expected a (..., C, D, T) feature map, got {y.shape}")
    count = y.shape[-1] * y.shape[-2]
    if count == 0:
        raise DimensionError("empty spatial extent")
    flat = np.ascontiguousarray(np.sort(y.data.reshape(y.shape[:-2] + (count,)), axis=-1))
    out = (flat.sum(axis=-1, dtype=np.float64) / count).astype(y.dtype)
    shape = y.shape

    def backward(g):
        return (np.broadcast_to((g / count)[..., None, None], shape),)

    return T._result(out, (y,), backward)


def gate_param_count(kind: str, channels: int, reduction: int = 4) -> int:
    kind = kind.lower()
    c = channels
    if kind == "scg":
        return c * c
    if kind == "mcg":
        return 2 * c * c
    if kind == "mlcg":
        latent = c // reduction
        return c * latent + c * latent + 2 * latent * c
    if kind in ("none", "res2net"):
        return 0
    raise ValueError(f"unknown gate kind {kind!r}")


class ChannelGate(Module):
    def __init__(self, kind: str, channels: int, reduction: int = 4, rng=None, dtype=None):
        kind = kind.lower()
        if kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {kind!r}; expected one of {GATE_KINDS}")
        self.kind = kind
        self.channels = channels
        self.reduction = reduction
        if kind == "scg":
            self.fc = Dense(channels, channels, bias=False, rng=rng, dtype=dtype)
        elif kind == "mcg":
            self.fc = Dense(2 * channels, channels, bias=False, rng=rng, dtype=dtype)
        else:
            if reduction < 1 or channels % reduction:
                raise ValueError(f"reduction {reduction} must divide the group width {channels}")
            latent = channels // reduction
            self.fc1 = Dense(channels, latent, bias=False, rng=rng, dtype=dtype)
            self.fc2 = Dense(channels, latent, bias=False, rng=rng, dtype=dtype)
            self.fc3 = Dense(2 * latent, channels, bias=False, rng=rng, dtype=dtype)

    @property
    def needs_reference(self) -> bool:
        return self.kind != "scg"

    def forward(self, y: Tensor, x_next: Tensor | None = None) -> Tensor:
        if y.shape[-3] != self.channels:
            raise DimensionError(f"gate built for {self.channels} channels got a {y.shape[-3]}-channel group")
        pooled = avg_pool_spatial(y)
        if self.kind == "scg":
            return T.sigmoid(self.fc(pooled))
        if x_next is None:
            raise ValueError(f"{self.kind} gate needs the next input group")
        if x_next.shape != y.shape:
            raise DimensionError(f"group shapes differ: {y.shape} vs {x_next.shape}")
        ref = avg_pool_spatial(x_next)
        if self.kind == "mcg":
            return T.sigmoid(self.fc(T.concat_channels([pooled, ref], axis=-1)))
        l1 = T.relu(self.fc1(pooled))
        l2 = T.relu(self.fc2(ref))
        return T.sigmoid(self.fc3(T.concat_channels([l1, l2], axis=-1)))


def scg_gate(module: ChannelGate, y: Tensor) -> Tensor:
    if module.kind != "scg":
        raise ValueError(f"expected an scg gate, got {module.kind}")
    return module(y)


def mcg_gate(module: ChannelGate, y: Tensor, x_next: Tensor) -> Tensor:
    if module.kind != "mcg":
        raise ValueError(f"expected an mcg gate, got {module.kind}")
    return module(y, x_next)


def mlcg_gate(module: ChannelGate, y: Tensor, x_next: Tensor) -> Tensor:
    if module.kind != "mlcg":
        raise ValueError(f"expected an mlcg gate, got {module.kind}")
    return module(y, x_next)
