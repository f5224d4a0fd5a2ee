"""Patch-expansion kernels behind convolution and transposed convolution.

Two interchangeable backends are provided:

* ``numba`` -- direct loops compiled with ``@njit``; no padded copy is made.
* ``numpy`` -- one strided slice per kernel tap on a zero-padded buffer.

The backend is chosen once at import time from ``SERNET_USE_NUMBA``
(``"0"`` forces numpy; anything else uses numba when importable) and can be
switched afterwards with :func:`set_backend`.  Both backends visit taps in
the same order, so each is bit-reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("SERNET_USE_NUMBA", "1") != "0" else "numpy"


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------- numpy


def _tap_slices(ki, kj, stride, dilation, ho, wo):
    r0, c0 = ki * dilation, kj * dilation
    return (
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
    )


def _im2col_numpy(x, k, stride, padding, dilation, ho, wo):
    n, c, h, w = x.shape
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k * k, ho * wo))
    for ki in range(k):
        for kj in range(k):
            rs, cs = _tap_slices(ki, kj, stride, dilation, ho, wo)
            cols[:, :, ki * k + kj, :] = xp[:, :, rs, cs].reshape(n, c, ho * wo)
    return cols


def _col2im_numpy(cols, h, w, k, stride, padding, dilation, ho, wo):
    n, c = cols.shape[:2]
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for ki in range(k):
        for kj in range(k):
            rs, cs = _tap_slices(ki, kj, stride, dilation, ho, wo)
            xp[:, :, rs, cs] += cols[:, :, ki * k + kj, :].reshape(n, c, ho, wo)
    return np.ascontiguousarray(xp[:, :, padding : padding + h, padding : padding + w])


# --------------------------------------------------------------------- numba

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, padding, dilation, ho, wo):
        n, c, h, w = x.shape
        cols = np.zeros((n, c, k * k, ho * wo))
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        r = ki * k + kj
                        for oh in range(ho):
                            ih = oh * stride - padding + ki * dilation
                            if ih < 0 or ih >= h:
                                continue
                            base = oh * wo
                            for ow in range(wo):
                                iw = ow * stride - padding + kj * dilation
                                if iw >= 0 and iw < w:
                                    cols[b, ch, r, base + ow] = x[b, ch, ih, iw]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, h, w, k, stride, padding, dilation, ho, wo):
        n, c = cols.shape[0], cols.shape[1]
        x = np.zeros((n, c, h, w))
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        r = ki * k + kj
                        for oh in range(ho):
                            ih = oh * stride - padding + ki * dilation
                            if ih < 0 or ih >= h:
                                continue
                            base = oh * wo
                            for ow in range(wo):
                                iw = ow * stride - padding + kj * dilation
                                if iw >= 0 and iw < w:
                                    x[b, ch, ih, iw] += cols[b, ch, r, base + ow]
        return x


def im2col(x: np.ndarray, k: int, stride: int, padding: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Expand ``x`` (N,C,H,W) into patches of shape (N, C, k*k, ho*wo)."""
    if _BACKEND == "numba":
        return _im2col_nb(np.ascontiguousarray(x), k, stride, padding, dilation, ho, wo)
    return _im2col_numpy(x, k, stride, padding, dilation, ho, wo)


def col2im(
    cols: np.ndarray, h: int, w: int, k: int, stride: int, padding: int, dilation: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto an (N,C,h,w) grid."""
    if _BACKEND == "numba":
        return _col2im_nb(np.ascontiguousarray(cols), h, w, k, stride, padding, dilation, ho, wo)
    return _col2im_numpy(cols, h, w, k, stride, padding, dilation, ho, wo)
