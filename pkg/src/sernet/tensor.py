"""Dense NCHW tensors with eager reverse-mode differentiation.

Only the operations the segmentation network needs are provided.  Every
tensor is four-dimensional and float64.  An op whose inputs require
gradients records a node holding its parents and a closure computing the
vector-Jacobian product; :meth:`Tensor.backward` walks those nodes once, in
reverse topological order, and then releases them.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, UsageError

_GRAD_ENABLED = True
_ANOMALY = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (evaluation, finite differences)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise :class:`NumericError` naming the first op that yields NaN/Inf."""
    global _ANOMALY
    prev, _ANOMALY = _ANOMALY, True
    try:
        yield
    finally:
        _ANOMALY = prev


class _Node:
    __slots__ = ("name", "parents", "vjp", "consumed")

    def __init__(self, name: str, parents: tuple, vjp: Callable):
        self.name = name
        self.parents = parents
        self.vjp = vjp
        self.consumed = False


class Tensor:
    """A 4-D float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (N,C,H,W); got {arr.ndim}-D input of shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"every dimension must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward() needs a (1,1,1,1) loss, got {self.shape}")
        if self._node is None:
            if not self.requires_grad:
                raise UsageError("loss does not depend on any tensor that requires grad")
            _accumulate(self, np.ones_like(self.data))
            return
        if self._node.consumed:
            raise UsageError("graph already consumed by a previous backward(); run forward again")

        order = _topo_order(self)
        for t in order:
            if t._node.consumed:
                raise UsageError(f"graph node {t._node.name!r} was consumed by an earlier backward()")
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = pending.pop(id(t), None)
            node = t._node
            if g is not None:
                grads = node.vjp(g)
                for p, pg in zip(node.parents, grads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p._node is None:
                        _accumulate(p, pg)
                    elif id(p) in pending:
                        pending[id(p)] = pending[id(p)] + pg
                    else:
                        pending[id(p)] = pg
            node.consumed = True
            node.vjp = None
            node.parents = ()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def record(name: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as the result of op ``name``; attach ``vjp`` if any parent needs grad.

    ``vjp(g)`` must return one gradient (or None) per parent, in order.
    """
    if _ANOMALY and not np.all(np.isfinite(out)):
        raise NumericError(f"op {name!r} produced non-finite values")
    t = Tensor._wrap(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(name, tuple(parents), vjp)
    return t


def _check_same_shape(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        dims = "NCHW"
        bad = [dims[i] for i in range(4) if x.shape[i] != y.shape[i]]
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape} in dimension(s) {','.join(bad)}")


# ------------------------------------------------------------ pointwise ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum (not where) so a NaN input stays NaN and is caught downstream
    out = np.maximum(x.data, 0.0)
    return record("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape(x, y, "add")
    return record("add", x.data + y.data, (x, y), lambda g: (g, g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return record("mul", xd * yd, (x, y), lambda g: (g * yd, g * xd))


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a (1,1,1,1) scalar tensor."""
    shape = x.shape
    out = np.array(x.data.sum()).reshape(1, 1, 1, 1)
    return record("sum", out, (x,), lambda g: (np.full(shape, g.reshape(-1)[0]),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: N/H/W mismatch {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record("concat", out, tuple(xs), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start},{stop}) outside 0..{c}")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return record("slice", x.data[:, start:stop].copy(), (x,), vjp)


# ------------------------------------------------------------- convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation.  ``weight`` is (C_out, C_in/groups, k, k); ``bias`` is (1,C_out,1,1)."""
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad geometry stride={stride} padding={padding} dilation={dilation} groups={groups}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if cin % groups:
        raise ShapeError(f"conv2d: input channels C={cin} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: weight in-channel dimension {cg} != C/groups = {cin // groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1,{cout},1,1)")
    k = kh
    ho = kernels.out_size(h, k, stride, padding, dilation)
    wo = kernels.out_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: computed output size {ho}x{wo} from input {h}x{w}, k={k}, s={stride}, p={padding}, d={dilation}")

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(n, groups, cg, h * w)
    else:
        cols = kernels.im2col(x.data, k, stride, padding, dilation, ho, wo).reshape(n, groups, cg * k * k, ho * wo)
    wmat = weight.data.reshape(groups, cout // groups, cg * k * k)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data

    def vjp(g):
        g4 = g.reshape(n, groups, cout // groups, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), g4)
            if pointwise:
                gx = dcols.reshape(n, cin, h, w)
            else:
                gx = kernels.col2im(dcols.reshape(n, cin, k * k, ho * wo), h, w, k, stride, padding, dilation, ho, wo)
        if weight.requires_grad:
            gw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, parents, vjp)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Transposed convolution.  ``weight`` is (C_in, C_out, k, k); output side (H-1)*s - 2p + k."""
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv_transpose2d: bad geometry stride={stride} padding={padding}")
    if kh != kw:
        raise ShapeError(f"conv_transpose2d: only square kernels are supported, got {kh}x{kw}")
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: weight in-channel dimension {wcin} != input C={cin}")
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != (1,{cout},1,1)")
    k = kh
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv_transpose2d: computed output size {ho}x{wo} from input {h}x{w}")

    wmat = weight.data.reshape(cin, cout * k * k)
    xm = x.data.reshape(n, cin, h * w)
    cols = np.matmul(wmat.T, xm).reshape(n, cout, k * k, h * w)
    out = kernels.col2im(cols, ho, wo, k, stride, padding, 1, h, w)
    if bias is not None:
        out += bias.data

    def vjp(g):
        dcols = kernels.im2col(g, k, stride, padding, 1, h, w).reshape(n, cout * k * k, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, dcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xm, dcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv_transpose2d", out, parents, vjp)


# ------------------------------------------------------------ normalisation


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics over (N,H,W) are used and the
    running estimates (1-D arrays of length C) are updated in place with an
    exponential moving average of the same (biased) statistics used to
    normalise, so inference matches training on small batches.  In inference
    mode the running estimates are used.
    """
    n, c, h, w = x.shape
    if scale.shape != (1, c, 1, 1) or shift.shape != (1, c, 1, 1):
        raise ShapeError(f"batch_norm: channel mismatch, x has C={c}, scale {scale.shape}, shift {shift.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm: running statistics must have shape ({c},)")
    if eps < 0:
        raise ConfigError(f"batch_norm: eps must be >= 0, got {eps}")

    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        m = None
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

    sd = scale.data
    out = xhat * sd + shift.data

    def vjp(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gshift = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gx = None
        if x.requires_grad:
            gxhat = g * sd
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(1, c, 1, 1)
        return gx, gscale, gshift

    return record("batch_norm", out, (x, scale, shift), vjp)


# ---------------------------------------------------------------- resizing


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) weights for 1-D linear interpolation, half-pixel centres."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    mat.setflags(write=False)
    return mat


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel sampling (``align_corners=False`` semantics)."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize_bilinear: output size must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return record("resize_bilinear", x.data.copy(), (x,), lambda g: (g,))
    ry = _interp_matrix(h, out_h)
    rx = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return record("resize_bilinear", out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# ---------------------------------------------------------- gradient check


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  ``x`` is
    perturbed in place, so ``f`` may also close over ``x`` (useful for
    parameters).  With ``max_coords`` a seeded random subset of coordinates is
    checked instead of all of them.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"finite_diff_check: eps must lie in [1e-7, 1e-4], got {eps}")
    had_grad = x.requires_grad
    x.requires_grad = True
    saved_grad, x.grad = x.grad, None
    try:
        y = f(x)
        if y.shape != (1, 1, 1, 1):
            raise ShapeError(f"finite_diff_check: f must return a (1,1,1,1) scalar, got {y.shape}")
        y.backward()
        analytic = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).copy()

        size = x.data.size
        if max_coords is not None and max_coords < size:
            idx = np.sort(np.random.default_rng(seed).choice(size, size=max_coords, replace=False))
        else:
            idx = np.arange(size)
        flat = x.data.reshape(-1)
        worst = 0.0
        with no_grad():
            for i in idx:
                v = flat[i]
                flat[i] = v + eps
                fp = f(x).item()
                flat[i] = v - eps
                fm = f(x).item()
                flat[i] = v
                num = (fp - fm) / (2.0 * eps)
                a = analytic[i]
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = had_grad
        x.grad = saved_grad
