"""Network building blocks: attention-boosting gate/module, residual
bottleneck, dilated separable bridge and the attention-fusion decoder unit.

Blocks are plain functions over parameter containers so that every one of
them can be gradient-checked in isolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    add,
    batch_norm,
    conv2d,
    conv_transpose2d,
    mul,
    relu,
    resize_bilinear,
    sigmoid,
)

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
DBN_DILATIONS = (12, 16, 18)


@dataclass(eq=False)
class LayerParams:
    """Learnables (and batch-norm buffers) of one convolution unit."""

    id: str
    weight: Tensor | None = None
    bias: Tensor | None = None
    bn_scale: Tensor | None = None
    bn_shift: Tensor | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None

    def learnables(self) -> list[tuple[str, Tensor]]:
        out = []
        for name in ("weight", "bias", "bn_scale", "bn_shift"):
            t = getattr(self, name)
            if t is not None:
                out.append((f"{self.id}.{name}", t))
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.bn_running_mean is None:
            return []
        return [
            (f"{self.id}.bn_running_mean", self.bn_running_mean),
            (f"{self.id}.bn_running_var", self.bn_running_var),
        ]

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None


def make_conv(
    layer_id: str,
    cin: int,
    cout: int,
    k: int,
    rng: np.random.Generator,
    groups: int = 1,
    bias: bool = False,
    bn: bool = True,
) -> LayerParams:
    """He-normal convolution weight ``(cout, cin/groups, k, k)`` in fan-out mode, optional bias/BN."""
    fan_out = (cout // groups) * k * k
    w = rng.standard_normal((cout, cin // groups, k, k)) * np.sqrt(2.0 / fan_out)
    return _finish(layer_id, w, cout, bias, bn)


def make_deconv(
    layer_id: str, cin: int, cout: int, k: int, stride: int, rng: np.random.Generator, bn: bool = True
) -> LayerParams:
    # each output pixel sees cin*k*k/stride^2 taps
    fan_in = max(cin * k * k // (stride * stride), 1)
    w = rng.standard_normal((cin, cout, k, k)) * np.sqrt(2.0 / fan_in)
    return _finish(layer_id, w, cout, not bn, bn)


def _finish(layer_id, w, cout, bias, bn):
    p = LayerParams(layer_id, weight=Tensor(w, requires_grad=True))
    if bias:
        p.bias = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)
    if bn:
        p.bn_scale = Tensor(np.ones((1, cout, 1, 1)), requires_grad=True)
        p.bn_shift = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)
        p.bn_running_mean = np.zeros(cout)
        p.bn_running_var = np.ones(cout)
    return p


def bn(x: Tensor, p: LayerParams, training: bool) -> Tensor:
    return batch_norm(
        x, p.bn_scale, p.bn_shift, p.bn_running_mean, p.bn_running_var, training, BN_MOMENTUM, BN_EPS
    )


def conv_unit(
    x: Tensor,
    p: LayerParams,
    training: bool,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
    act: bool = True,
) -> Tensor:
    """conv -> [BN] -> [ReLU]"""
    y = conv2d(x, p.weight, p.bias, stride, padding, dilation, groups)
    if p.has_bn:
        y = bn(y, p, training)
    return relu(y) if act else y


# ------------------------------------------------------------------- AbG/AbM


def abg_forward(x: Tensor) -> Tensor:
    """Attention-boosting gate: ``sigmoid(x) * x``, shape preserved."""
    return mul(sigmoid(x), x)


def abm_forward(trunk: Tensor, gate_src: Tensor, adapter: LayerParams) -> Tensor:
    """Fuse a gated tensor into ``trunk``: 1x1 channel transform, resize, add."""
    cout, cin = adapter.weight.shape[:2]
    if cin != gate_src.shape[1]:
        raise ShapeError(f"AbM adapter expects {cin} gate channels, got {gate_src.shape[1]}")
    if cout != trunk.shape[1]:
        raise ShapeError(f"AbM adapter emits {cout} channels but trunk has {trunk.shape[1]}")
    g = conv2d(abg_forward(gate_src), adapter.weight, adapter.bias)
    g = resize_bilinear(g, trunk.shape[2], trunk.shape[3])
    return add(trunk, g)


# ---------------------------------------------------------------- bottleneck


@dataclass(eq=False)
class BottleneckParams:
    conv1: LayerParams
    conv2: LayerParams
    conv3: LayerParams
    proj: LayerParams | None = None
    stride: int = 1

    def layers(self) -> list[LayerParams]:
        return [self.conv1, self.conv2, self.conv3] + ([self.proj] if self.proj is not None else [])


def make_bottleneck(prefix: str, cin: int, mid: int, cout: int, stride: int, seed_rng) -> BottleneckParams:
    """``seed_rng(layer_id)`` returns the generator for that layer."""
    p = BottleneckParams(
        conv1=make_conv(f"{prefix}.conv1", cin, mid, 1, seed_rng(f"{prefix}.conv1")),
        conv2=make_conv(f"{prefix}.conv2", mid, mid, 3, seed_rng(f"{prefix}.conv2")),
        conv3=make_conv(f"{prefix}.conv3", mid, cout, 1, seed_rng(f"{prefix}.conv3")),
        stride=stride,
    )
    if stride != 1 or cin != cout:
        p.proj = make_conv(f"{prefix}.proj", cin, cout, 1, seed_rng(f"{prefix}.proj"))
    return p


def bottleneck_forward(x: Tensor, p: BottleneckParams, training: bool, return_gate: bool = False):
    """1x1 -> 3x3(stride) -> 1x1 residual unit.

    With ``return_gate`` the post-BN output of the last convolution is
    returned too; it is the gate source for an attention-boosting module.
    """
    if p.stride not in (1, 2):
        raise ShapeError(f"bottleneck stride must be 1 or 2, got {p.stride}")
    y = conv_unit(x, p.conv1, training)
    y = conv_unit(y, p.conv2, training, stride=p.stride, padding=1)
    z = conv_unit(y, p.conv3, training, act=False)
    sc = conv_unit(x, p.proj, training, stride=p.stride, act=False) if p.proj is not None else x
    if sc.shape != z.shape:
        raise ShapeError(f"bottleneck residual {z.shape} and shortcut {sc.shape} differ; projection required")
    out = relu(add(z, sc))
    return (out, z) if return_gate else out


# ----------------------------------------------------------------------- DbN


@dataclass(eq=False)
class DbNParams:
    depthwise: list[LayerParams]
    pointwise: list[LayerParams]
    project: LayerParams
    dilations: tuple[int, ...] = DBN_DILATIONS

    def layers(self) -> list[LayerParams]:
        return [*self.depthwise, *self.pointwise, self.project]


def make_dbn(prefix: str, cin: int, cout: int, seed_rng, dilations=DBN_DILATIONS) -> DbNParams:
    dw, pw = [], []
    for i, _ in enumerate(dilations):
        dw.append(make_conv(f"{prefix}.b{i}.depthwise", cin, cin, 3, seed_rng(f"{prefix}.b{i}.depthwise"), groups=cin, bn=False))
        pw.append(make_conv(f"{prefix}.b{i}.pointwise", cin, cout, 1, seed_rng(f"{prefix}.b{i}.pointwise")))
    proj = make_conv(f"{prefix}.project", cout, cout, 1, seed_rng(f"{prefix}.project"), bias=True, bn=False)
    return DbNParams(dw, pw, proj, tuple(dilations))


def dbn_branch(x: Tensor, dw: LayerParams, pw: LayerParams, dilation: int, training: bool) -> Tensor:
    """Dilated depthwise 3x3 (size-preserving) -> pointwise 1x1 -> BN -> ReLU."""
    y = conv2d(x, dw.weight, None, stride=1, padding=dilation, dilation=dilation, groups=x.shape[1])
    return conv_unit(y, pw, training)


def dbn_forward(x: Tensor, p: DbNParams, training: bool) -> Tensor:
    """Dilation-based separable bridge: three dilated branches, summed, then projected."""
    h, w = x.shape[2:]
    if min(h, w) < 25:
        log.debug("DbN input %dx%d is smaller than the dilation-18 receptive field; taps fall in padding", h, w)
    fused = None
    for dw, pw, d in zip(p.depthwise, p.pointwise, p.dilations):
        b = dbn_branch(x, dw, pw, d, training)
        if fused is not None and b.shape != fused.shape:
            raise ShapeError(f"DbN branch with dilation {d} produced {b.shape}, expected {fused.shape}")
        fused = b if fused is None else add(fused, b)
    return conv_unit(fused, p.project, training, act=False)


# ----------------------------------------------------------------------- AfN


@dataclass(eq=False)
class AfNParams:
    skip_proj: LayerParams
    gate: LayerParams
    conv_a: LayerParams
    conv_b: LayerParams

    def layers(self) -> list[LayerParams]:
        return [self.skip_proj, self.gate, self.conv_a, self.conv_b]


def make_afn(prefix: str, skip_channels: int, channels: int, seed_rng) -> AfNParams:
    return AfNParams(
        skip_proj=make_conv(f"{prefix}.skip_proj", skip_channels, channels, 1, seed_rng(f"{prefix}.skip_proj"), bias=True, bn=False),
        gate=make_conv(f"{prefix}.gate", channels, channels, 1, seed_rng(f"{prefix}.gate"), bias=True, bn=False),
        conv_a=make_conv(f"{prefix}.conv_a", channels, channels, 3, seed_rng(f"{prefix}.conv_a")),
        conv_b=make_conv(f"{prefix}.conv_b", channels, channels, 3, seed_rng(f"{prefix}.conv_b")),
    )


def afn_fusion(dec: Tensor, enc_skip: Tensor, p: AfNParams) -> Tensor:
    """``dec + sigmoid(gate(s)) * s`` where ``s`` is the skip projected and resized to ``dec``."""
    s = conv2d(enc_skip, p.skip_proj.weight, p.skip_proj.bias)
    if s.shape[2:] != dec.shape[2:]:
        s = resize_bilinear(s, dec.shape[2], dec.shape[3])
    if s.shape != dec.shape:
        raise ShapeError(f"AfN: projected skip {s.shape} does not match decoder tensor {dec.shape}")
    g = sigmoid(conv2d(s, p.gate.weight, p.gate.bias))
    return add(dec, mul(g, s))


def afn_forward(dec: Tensor, enc_skip: Tensor, p: AfNParams, training: bool) -> Tensor:
    f = afn_fusion(dec, enc_skip, p)
    y = conv_unit(f, p.conv_a, training, padding=1)
    return conv_unit(y, p.conv_b, training, padding=1)


def deconv_unit(x: Tensor, p: LayerParams, stride: int, padding: int, training: bool) -> Tensor:
    y = conv_transpose2d(x, p.weight, p.bias, stride=stride, padding=padding)
    if p.has_bn:
        y = bn(y, p, training)
    return relu(y)
