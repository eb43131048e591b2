"""Res2Net / CG-Res2Net blocks and the backbone that stacks them.

Inside a block the entry 1x1 convolution output is split into ``s`` groups
``x_1..x_s`` and combined as::

    y_1 = x_1
    y_2 = K_2(x_2)
    y_i = K_i(x_i + z_{i-1})            2 < i <= s
    z_{i-1} = y_{i-1} * a_{i-1}         (a = 1 for plain Res2Net)

where ``K_i`` is a 3x3 convolution unit and ``a_{i-1}`` a channel gate fed by
``y_{i-1}`` (and ``x_i`` for the multi-group gates).  The groups are
concatenated, mixed by an exit 1x1 convolution, rescaled by an SE block and
added to the shortcut.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .gates import ChannelGate, gate_param_count
from .layers import Dense, Module, ConvUnit, SEBlock
from .tensor import DimensionError, Tensor

ARCH_TO_GATE = {"res2net": "none", "scg": "scg", "mcg": "mcg", "mlcg": "mlcg"}


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    width: int
    scale: int = 4
    gate: str = "none"
    reduction: int = 4
    se: bool = True
    se_reduction: int = 4
    stride: int = 1
    batchnorm: bool = True

    @property
    def group_channels(self) -> int:
        return self.width // self.scale

    def validate(self) -> None:
        if self.scale < 2:
            raise ValueError("scale must be at least 2")
        if self.width % self.scale:
            raise ValueError(f"width {self.width} is not divisible by scale {self.scale}")
        if self.gate not in ("none", "scg", "mcg", "mlcg"):
            raise ValueError(f"unknown gate kind {self.gate!r}")


class Res2NetBlock(Module):
    def __init__(self, cfg: BlockConfig, rng=None, dtype=None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.group_channels
        bn = cfg.batchnorm
        self.entry = ConvUnit(cfg.in_channels, cfg.width, 1, cfg.stride, bn, True, rng, dtype)
        self.convs = [ConvUnit(c, c, 3, 1, bn, True, rng, dtype) for _ in range(cfg.scale - 1)]
        self.gates = []
        if cfg.gate != "none":
            self.gates = [ChannelGate(cfg.gate, c, cfg.reduction, rng, dtype) for _ in range(cfg.scale - 2)]
        self.exit = ConvUnit(cfg.width, cfg.width, 1, 1, bn, False, rng, dtype)
        self.se = SEBlock(cfg.width, cfg.se_reduction, rng, dtype) if cfg.se else None
        self.shortcut = None
        if cfg.stride != 1 or cfg.in_channels != cfg.width:
            self.shortcut = ConvUnit(cfg.in_channels, cfg.width, 1, cfg.stride, bn, False, rng, dtype)

    def forward(self, x: Tensor, gate_override=None, gate_log: list | None = None) -> Tensor:
        """Run the block.

        ``gate_override`` replaces every gate by a constant (e.g. 1.0 or 0.0)
        or by an array broadcastable to (N, C).  Realised gates are appended
        to ``gate_log`` when given.
        """
        s = self.cfg.scale
        if x.shape[-3] != self.cfg.in_channels:
            raise DimensionError(f"block expects {self.cfg.in_channels} channels, got {x.shape[-3]}")
        xs = T.split_channels(self.entry(x), s)
        ys = [xs[0], self.convs[0](xs[1])]
        for i in range(2, s):
            prev = ys[-1]
            if self.gates or gate_override is not None:
                gate = self._gate(i - 2, prev, xs[i], gate_override)
                if gate_log is not None:
                    gate_log.append(gate.data.copy())
                prev = T.channel_mul(prev, gate)
            ys.append(self.convs[i - 1](T.add(xs[i], prev)))
        out = self.exit(T.concat_channels(ys))
        if self.se is not None:
            out = self.se(out)
        shortcut = x if self.shortcut is None else self.shortcut(x)
        return T.relu(T.add(out, shortcut))

    def _gate(self, index, y_prev, x_next, override):
        if override is not None:
            value = np.broadcast_to(np.asarray(override, dtype=y_prev.dtype), y_prev.shape[:-2])
            return Tensor(np.array(value))
        gate = self.gates[index]
        return gate(y_prev, x_next if gate.needs_reference else None)


def res2net_forward(block: Res2NetBlock, x: Tensor) -> Tensor:
    if block.gates:
        raise ValueError("res2net_forward expects an ungated block; use cg_res2net_forward")
    return block(x)


def cg_res2net_forward(block: Res2NetBlock, x: Tensor, gate_override=None) -> Tensor:
    if not block.gates:
        raise ValueError("cg_res2net_forward expects a gated block")
    return block(x, gate_override=gate_override)


def _default_stages():
    return ((2, 16, 2), (2, 32, 2), (2, 64, 2))


@dataclass(frozen=True)
class BackboneConfig:
    """Desk-scale backbone: stem -> stages of blocks -> pool -> 2-way dense.

    Each stage is ``(blocks, width, stride)``; the stride applies to the
    first block of the stage.
    """

    input_shape: tuple = (432, 400)
    in_channels: int = 1
    stem_channels: int = 16
    stem_stride: int = 2
    stages: tuple = field(default_factory=_default_stages)
    scale: int = 4
    gate: str = "none"
    reduction: int = 4
    se: bool = True
    se_reduction: int = 4
    batchnorm: bool = True
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in st) for st in self.stages))
        object.__setattr__(self, "gate", ARCH_TO_GATE.get(self.gate, self.gate))

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("at least one stage is required")
        for blocks, width, stride in self.stages:
            if blocks < 1 or stride < 1:
                raise ValueError(f"invalid stage {(blocks, width, stride)}")
            if width % self.scale:
                raise ValueError(f"stage width {width} is not divisible by scale {self.scale}")
            if self.gate == "mlcg" and (width // self.scale) % self.reduction:
                raise ValueError(f"reduction {self.reduction} must divide group width {width // self.scale}")
        if self.gate not in ("none", "scg", "mcg", "mlcg"):
            raise ValueError(f"unknown gate kind {self.gate!r}")

    def with_arch(self, arch: str) -> "BackboneConfig":
        if arch not in ARCH_TO_GATE:
            raise ValueError(f"unknown architecture {arch!r}")
        return replace(self, gate=ARCH_TO_GATE[arch])

    @property
    def arch(self) -> str:
        return "res2net" if self.gate == "none" else self.gate

    def block_configs(self) -> list:
        out = []
        channels = self.stem_channels
        for blocks, width, stride in self.stages:
            for b in range(blocks):
                out.append(
                    BlockConfig(
                        in_channels=channels,
                        width=width,
                        scale=self.scale,
                        gate=self.gate,
                        reduction=self.reduction,
                        se=self.se,
                        se_reduction=self.se_reduction,
                        stride=stride if b == 0 else 1,
                        batchnorm=self.batchnorm,
                    )
                )
                channels = width
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stages"] = [list(st) for st in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = ConvUnit(cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, cfg.batchnorm, True, rng, dtype)
        self.blocks = [Res2NetBlock(bc, rng, dtype) for bc in cfg.block_configs()]
        self.classifier = Dense(cfg.stages[-1][1], cfg.num_classes, bias=True, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.classifier.weight.dtype

    def forward(self, x, gate_override=None, gate_log: list | None = None) -> Tensor:
        """Logits (N, num_classes) for spectrograms shaped (N, D, T) or (N, C, D, T)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected (N, {self.cfg.in_channels}, D, T) input, got {x.shape}")
        h = self.stem(x)
        for block in self.blocks:
            log = None
            if gate_log is not None:
                log = []
                gate_log.append(log)
            h = block(h, gate_override=gate_override, gate_log=log)
        return self.classifier(T.mean_over(h, (2, 3)))


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=None) -> Backbone:
    return Backbone(cfg, seed=seed, dtype=dtype)


def model_param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def param_breakdown(model: Module) -> dict:
    """Parameter counts grouped by top-level component (stem, blocks.k, classifier)."""
    out: dict = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        out[key] = out.get(key, 0) + p.size
    return out


def expected_gate_params(cfg: BackboneConfig) -> int:
    """Sum over blocks of (s - 2) gates times the per-gate weight count."""
    total = 0
    for bc in cfg.block_configs():
        total += (bc.scale - 2) * gate_param_count(cfg.gate, bc.group_channels, cfg.reduction)
    return total


def gate_inspection(model: Backbone, x) -> list:
    """Gates realised on ``x``: one list per block with an (N, C) array per carry.

    Runs without recording a graph and in eval mode, so running statistics
    are untouched; the previous mode is restored afterwards.
    """
    was_training = model.training
    model.eval()
    log: list = []
    try:
        with T.no_grad():
            model(x, gate_log=log)
    finally:
        model.train(was_training)
    return log
