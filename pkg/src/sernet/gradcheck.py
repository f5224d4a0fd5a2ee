"""Central finite-difference checks over every differentiable op, every block and a micro model.

Each case reduces its output to a scalar through a fixed random projection
``sum(out * R)`` so that no coordinate of the gradient cancels by symmetry.
Inputs are float64 and no larger than 4x4x6x6 for the op and block cases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import blocks
from .model import ModelConfig, build, forward
from .seeding import rng_for
from .tensor import (
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    finite_diff_check,
    mul,
    relu,
    resize_bilinear,
    sigmoid,
    slice_channels,
    sum_all,
)
from .training import ClassWeights, weighted_cross_entropy

OP_TOL = 1e-4
MODEL_TOL = 1e-3
FD_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tolerance


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(rng, shape) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(shape))
    return lambda y: sum_all(mul(y, r))


def _check_all(out_fn: Callable[[], Tensor], inputs: list[Tensor], rng, max_coords=None) -> float:
    """Worst error over every tensor in ``inputs``, each perturbed in place."""
    proj = _project(rng, out_fn().shape)
    worst = 0.0
    for i, t in enumerate(inputs):
        err = finite_diff_check(lambda _x: proj(out_fn()), t, eps=FD_EPS, max_coords=max_coords, seed=i)
        worst = max(worst, err)
    return worst


def _op_cases(rng) -> Iterator[tuple[str, Callable[[], float]]]:
    x = _t(rng, 2, 3, 5, 6)
    y = _t(rng, 2, 3, 5, 6)
    yield "relu", lambda: _check_all(lambda: relu(x), [x], rng)
    yield "sigmoid", lambda: _check_all(lambda: sigmoid(x), [x], rng)
    yield "add", lambda: _check_all(lambda: add(x, y), [x, y], rng)
    yield "mul", lambda: _check_all(lambda: mul(x, y), [x, y], rng)
    z = _t(rng, 2, 2, 5, 6)
    yield "concat_channels", lambda: _check_all(lambda: concat_channels([x, z]), [x, z], rng)
    yield "slice_channels", lambda: _check_all(lambda: slice_channels(x, 1, 3), [x], rng)

    xc = _t(rng, 2, 4, 6, 6)
    w3 = _t(rng, 3, 4, 3, 3, scale=0.3)
    b3 = _t(rng, 1, 3, 1, 1)
    yield "conv2d", lambda: _check_all(lambda: conv2d(xc, w3, b3, padding=1), [xc, w3, b3], rng)
    yield "conv2d_stride2", lambda: _check_all(lambda: conv2d(xc, w3, None, stride=2, padding=1), [xc, w3], rng)
    yield "conv2d_dilated", lambda: _check_all(lambda: conv2d(xc, w3, None, padding=2, dilation=2), [xc, w3], rng)
    w1 = _t(rng, 3, 4, 1, 1)
    yield "conv2d_1x1", lambda: _check_all(lambda: conv2d(xc, w1, b3), [xc, w1, b3], rng)
    wg = _t(rng, 4, 2, 3, 3, scale=0.3)
    yield "conv2d_grouped", lambda: _check_all(lambda: conv2d(xc, wg, None, padding=1, groups=2), [xc, wg], rng)
    wd = _t(rng, 4, 1, 3, 3, scale=0.3)
    yield "conv2d_depthwise", lambda: _check_all(
        lambda: conv2d(xc, wd, None, padding=3, dilation=3, groups=4), [xc, wd], rng
    )

    xt = _t(rng, 2, 4, 3, 3)
    wt = _t(rng, 4, 3, 3, 3, scale=0.3)
    bt = _t(rng, 1, 3, 1, 1)
    yield "conv_transpose2d", lambda: _check_all(
        lambda: conv_transpose2d(xt, wt, bt, stride=1, padding=1), [xt, wt, bt], rng
    )
    wt4 = _t(rng, 4, 2, 4, 4, scale=0.3)
    xs = _t(rng, 1, 4, 2, 2)
    yield "conv_transpose2d_stride4", lambda: _check_all(lambda: conv_transpose2d(xs, wt4, None, stride=4), [xs, wt4], rng)

    xb = _t(rng, 3, 4, 4, 4)
    g = Tensor(1.0 + 0.2 * rng.standard_normal((1, 4, 1, 1)), requires_grad=True)
    bshift = _t(rng, 1, 4, 1, 1)
    rm, rv = np.zeros(4), np.ones(4)
    yield "batch_norm_train", lambda: _check_all(
        lambda: batch_norm(xb, g, bshift, rm.copy(), rv.copy(), training=True), [xb, g, bshift], rng
    )
    rm_e, rv_e = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    yield "batch_norm_eval", lambda: _check_all(
        lambda: batch_norm(xb, g, bshift, rm_e, rv_e, training=False), [xb, g, bshift], rng
    )

    xr = _t(rng, 2, 3, 3, 4)
    yield "resize_bilinear_up", lambda: _check_all(lambda: resize_bilinear(xr, 6, 5), [xr], rng)
    yield "resize_bilinear_down", lambda: _check_all(lambda: resize_bilinear(x, 3, 2), [x], rng)

    logits = _t(rng, 2, 4, 5, 6)
    labels = rng.integers(0, 4, size=(2, 1, 5, 6))
    labels[0, 0, 0, :3] = 255
    cw = ClassWeights(rng.uniform(0.5, 2.0, 4))
    yield "weighted_cross_entropy", lambda: _check_all(lambda: weighted_cross_entropy(logits, labels, cw), [logits], rng)


def _layer_tensors(*layers) -> list[Tensor]:
    return [t for p in layers for _, t in p.learnables()]


def _block_cases(rng) -> Iterator[tuple[str, Callable[[], float]]]:
    def lrng(tag):
        return rng_for(7, tag)

    x = _t(rng, 2, 3, 5, 6)
    yield "abg", lambda: _check_all(lambda: blocks.abg_forward(x), [x], rng)

    trunk = _t(rng, 2, 4, 3, 3)
    src = _t(rng, 2, 3, 6, 6)
    adapter = blocks.make_conv("abm.adapter", 3, 4, 1, lrng("abm"), bias=True, bn=False)
    yield "abm", lambda: _check_all(
        lambda: blocks.abm_forward(trunk, src, adapter), [trunk, src, *_layer_tensors(adapter)], rng
    )

    xb = _t(rng, 2, 4, 6, 6)
    bp = blocks.make_bottleneck("bneck", 4, 2, 4, 1, lrng)
    yield "bottleneck", lambda: _check_all(
        lambda: blocks.bottleneck_forward(xb, bp, training=True), [xb, *_layer_tensors(*bp.layers())], rng
    )
    bp2 = blocks.make_bottleneck("bneck2", 4, 2, 6, 2, lrng)
    yield "bottleneck_stride2", lambda: _check_all(
        lambda: blocks.bottleneck_forward(xb, bp2, training=True), [xb, *_layer_tensors(*bp2.layers())], rng
    )

    xd = _t(rng, 2, 3, 6, 6)
    dp = blocks.make_dbn("dbn", 3, 4, lrng, dilations=(1, 2, 3))
    yield "dbn", lambda: _check_all(
        lambda: blocks.dbn_forward(xd, dp, training=True), [xd, *_layer_tensors(*dp.layers())], rng
    )

    dec = _t(rng, 2, 3, 6, 6)
    skip = _t(rng, 2, 4, 3, 3)
    ap = blocks.make_afn("afn", 4, 3, lrng)
    yield "afn_fusion", lambda: _check_all(
        lambda: blocks.afn_fusion(dec, skip, ap), [dec, skip, *_layer_tensors(ap.skip_proj, ap.gate)], rng
    )
    yield "afn", lambda: _check_all(
        lambda: blocks.afn_forward(dec, skip, ap, training=True), [dec, skip, *_layer_tensors(*ap.layers())], rng
    )

    xu = _t(rng, 2, 4, 2, 2)
    up = blocks.make_deconv("deconv", 4, 3, 4, 2, lrng("deconv"))
    yield "deconv_unit", lambda: _check_all(
        lambda: blocks.deconv_unit(xu, up, stride=2, padding=1, training=True), [xu, *_layer_tensors(up)], rng
    )


MICRO_MODEL = ModelConfig(num_classes=3, width_mult=1 / 64, input_hw=(32, 32), seed=11)


def _model_case(rng) -> Iterator[tuple[str, Callable[[], float]]]:
    m = build(MICRO_MODEL)
    x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)), requires_grad=True)
    params = [t for _, t in m.parameters()]

    def run():
        proj = _project(rng, (2, 3, 32, 32))
        worst = finite_diff_check(lambda _x: proj(forward(m, x, training=True)), x, FD_EPS, max_coords=16, seed=0)
        for i, t in enumerate(params):
            worst = max(
                worst,
                finite_diff_check(lambda _x: proj(forward(m, x, training=True)), t, FD_EPS, max_coords=2, seed=i + 1),
            )
        return worst

    yield "micro_model", run


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = [(n, f, OP_TOL) for n, f in _op_cases(rng)]
    cases += [(n, f, OP_TOL) for n, f in _block_cases(rng)]
    if include_model:
        cases += [(n, f, MODEL_TOL) for n, f in _model_case(rng)]
    results = []
    for name, fn, tol in cases:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
