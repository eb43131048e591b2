"""Finite-difference gradient checks for primitives and whole blocks.

Everything runs in float64.  Losses are random projections ``sum(out * R)``
so every output coordinate contributes to every gradient.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, Res2NetBlock
from .gates import ChannelGate
from .layers import SEBlock
from .tensor import Tensor

F64 = np.float64


def _t(rng, *shape, positive=False):
    v = rng.standard_normal(shape)
    if positive:
        v = np.abs(v) + 0.5
    return Tensor(v.astype(F64), requires_grad=True)


def primitive_cases(rng):
    """(name, f, tensors) triples covering every differentiable primitive."""
    cases = []

    def add(name, fn, *tensors):
        with T.no_grad():
            shape = fn(*tensors).shape
        r = Tensor(rng.standard_normal(shape))
        cases.append((name, lambda *xs: T.sum_all(T.mul(fn(*xs), r)), list(tensors)))

    add("add", T.add, _t(rng, 2, 3), _t(rng, 3))
    add("sub", T.sub, _t(rng, 2, 3), _t(rng, 2, 1))
    add("mul", T.mul, _t(rng, 2, 3), _t(rng, 2, 3))
    add("neg", T.neg, _t(rng, 4))
    add("relu", T.relu, _t(rng, 3, 4))
    add("sigmoid", T.sigmoid, _t(rng, 3, 4))
    add("log_softmax", lambda x: T.log_softmax(x, -1), _t(rng, 3, 2))
    add("mean_over", lambda x: T.mean_over(x, (-2, -1)), _t(rng, 2, 3, 4, 5))
    add("sum_all", lambda x: T.reshape(T.sum_all(x), (1,)), _t(rng, 3, 3))
    add("reshape", lambda x: T.reshape(x, (6, 2)), _t(rng, 3, 4))
    add("channel_mul", T.channel_mul, _t(rng, 2, 3, 4, 4), _t(rng, 2, 3))
    add("concat_channels", lambda a, b: T.concat_channels([a, b]), _t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3))
    add("split_channels", lambda x: T.mul(T.split_channels(x, 2)[1], T.split_channels(x, 2)[0]), _t(rng, 2, 4, 3, 3))
    add("dense", T.dense, _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5))
    add("conv2d_3x3", T.conv2d, _t(rng, 2, 3, 5, 6), _t(rng, 4, 3, 3, 3))
    add("conv2d_3x3_stride2", lambda x, w: T.conv2d(x, w, 2), _t(rng, 2, 2, 7, 6), _t(rng, 3, 2, 3, 3))
    add("conv2d_1x1_stride2", lambda x, w: T.conv2d(x, w, 2), _t(rng, 2, 3, 5, 5), _t(rng, 2, 3, 1, 1))
    add("batch_norm", lambda x, g, b: T.batch_norm(x, g, b)[0], _t(rng, 3, 2, 3, 3), _t(rng, 2, positive=True), _t(rng, 2))
    add("batch_norm_relu", lambda x, g, b: T.batch_norm(x, g, b, relu=True)[0],
        _t(rng, 3, 2, 3, 3), _t(rng, 2, positive=True), _t(rng, 2))
    mean, var = rng.standard_normal(2), np.abs(rng.standard_normal(2)) + 0.5
    add("batch_norm_eval", lambda x, g, b: T.batch_norm_eval(x, g, b, mean, var),
        _t(rng, 3, 2, 3, 3), _t(rng, 2), _t(rng, 2))
    return cases


def _module_case(module, x: Tensor, rng, call):
    params = module.parameters()
    r = rng.standard_normal(call(x).shape)

    def f(*xs):
        return T.sum_all(T.mul(call(xs[0]), Tensor(r)))

    return f, [x] + params


def block_case(arch: str, seed: int, channels: int = 2, size: int = 3, batch: int = 2, scale: int = 4):
    """Gradient case for one block with ``scale`` groups of ``channels`` channels."""
    rng = np.random.default_rng(seed)
    gate = {"res2net": "none"}.get(arch, arch)
    # the latent gate needs r | C; with C = 2 the largest valid ratio is 2
    reduction = 2 if gate == "mlcg" and channels % 4 else 4
    width = channels * scale
    cfg = BlockConfig(in_channels=width, width=width, scale=scale, gate=gate, reduction=reduction,
                      se=True, se_reduction=4)
    block = Res2NetBlock(cfg, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((batch, width, size, size)))
    return _module_case(block, x, rng, block)


def gate_case(kind: str, seed: int, channels: int = 4):
    rng = np.random.default_rng(seed)
    gate = ChannelGate(kind, channels, 2, rng=rng, dtype=F64)
    y = Tensor(rng.standard_normal((2, channels, 3, 3)))
    x = Tensor(rng.standard_normal((2, channels, 3, 3)))
    r = rng.standard_normal((2, channels))

    def f(yy, xx, *params):
        return T.sum_all(T.mul(gate(yy, xx if gate.needs_reference else None), Tensor(r)))

    return f, [y, x] + gate.parameters()


def se_case(seed: int, channels: int = 8):
    rng = np.random.default_rng(seed)
    se = SEBlock(channels, 4, rng=rng, dtype=F64)
    x = Tensor(rng.standard_normal((2, channels, 3, 3)))
    return _module_case(se, x, rng, se)


def run_suite(archs=("res2net", "scg", "mcg", "mlcg"), seeds=range(5), eps: float = 1e-5):
    """Return ``[(name, seed, max relative error), ...]``."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for name, f, xs in primitive_cases(rng):
            results.append((name, seed, T.grad_check(f, xs, eps)))
        for kind in ("scg", "mcg", "mlcg"):
            f, xs = gate_case(kind, seed)
            results.append((f"gate_{kind}", seed, T.grad_check(f, xs, eps)))
        f, xs = se_case(seed)
        results.append(("se_block", seed, T.grad_check(f, xs, eps)))
        for arch in archs:
            f, xs = block_case(arch, seed)
            results.append((f"block_{arch}", seed, T.grad_check(f, xs, eps)))
    return results
