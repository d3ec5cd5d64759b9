"""3x3 'same' convolution kernels (edge-replicated border), NHWC layout, weights (3, 3, Cin, Cout).

Two interchangeable backends:

* ``numba``: im2col / col2im gathers compiled with ``@njit`` feeding BLAS
  matmuls, single-threaded with a fixed accumulation order.
* ``numpy``: the same algorithm with strided slice copies in Python.

The active backend is read from ``CBFOCAL_BACKEND`` (``numba`` or ``numpy``)
at import time and can be switched with :func:`set_backend`. When numba is
not importable the numpy path is used regardless.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

KSIZE = 3
PAD = 1


def out_size(n: int, stride: int) -> int:
    return (n + 2 * PAD - KSIZE) // stride + 1


def _pad(x: np.ndarray) -> np.ndarray:
    # edge replication keeps constant fields constant through every layer
    return np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD), (0, 0)), mode="edge")


def _unpad_grad(dxp: np.ndarray) -> np.ndarray:
    """Adjoint of ``_pad``: fold border gradients back onto the edge pixels."""
    dxp[:, PAD, :, :] += dxp[:, 0, :, :]
    dxp[:, -PAD - 1, :, :] += dxp[:, -1, :, :]
    dxp[:, :, PAD, :] += dxp[:, :, 0, :]
    dxp[:, :, -PAD - 1, :] += dxp[:, :, -1, :]
    return dxp[:, PAD:-PAD, PAD:-PAD, :]


# ---------------------------------------------------------------- numpy


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, cin = xp.shape
    cols = np.empty((b, ho, wo, KSIZE, KSIZE, cin), dtype=xp.dtype)
    for di in range(KSIZE):
        for dj in range(KSIZE):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * (ho - 1) + 1:stride,
                                          dj:dj + stride * (wo - 1) + 1:stride, :]
    return cols


def conv_forward_numpy(x, w, b, stride):
    bsz, h, wd, cin = x.shape
    ho, wo = out_size(h, stride), out_size(wd, stride)
    cols = _im2col(_pad(x), stride, ho, wo)
    out = cols.reshape(-1, KSIZE * KSIZE * cin) @ w.reshape(-1, w.shape[3])
    out += b
    return out.reshape(bsz, ho, wo, w.shape[3]), cols


def conv_backward_numpy(dout, saved, w, x_shape, stride):
    cols = saved
    bsz, h, wd, cin = x_shape
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, KSIZE * KSIZE * cin).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0, dtype=np.float64).astype(w.dtype)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(bsz, ho, wo, KSIZE, KSIZE, cin)
    dxp = np.zeros((bsz, h + 2 * PAD, wd + 2 * PAD, cin), dtype=w.dtype)
    for di in range(KSIZE):
        for dj in range(KSIZE):
            dxp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, di, dj, :]
    return _unpad_grad(dxp), dw, db


# ---------------------------------------------------------------- numba

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, stride, ho, wo):
        bsz = xp.shape[0]
        cin = xp.shape[3]
        cols = np.empty((bsz * ho * wo, KSIZE * KSIZE * cin), dtype=xp.dtype)
        r = 0
        for n in range(bsz):
            for i in range(ho):
                for j in range(wo):
                    c = 0
                    for di in range(KSIZE):
                        for dj in range(KSIZE):
                            for ci in range(cin):
                                cols[r, c] = xp[n, i * stride + di, j * stride + dj, ci]
                                c += 1
                    r += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, bsz, hp, wp, cin, stride, ho, wo):
        dxp = np.zeros((bsz, hp, wp, cin), dtype=dcols.dtype)
        r = 0
        for n in range(bsz):
            for i in range(ho):
                for j in range(wo):
                    c = 0
                    for di in range(KSIZE):
                        for dj in range(KSIZE):
                            for ci in range(cin):
                                dxp[n, i * stride + di, j * stride + dj, ci] += dcols[r, c]
                                c += 1
                    r += 1
        return dxp

    @njit(cache=True)
    def _fwd_nb(xp, w2, b, stride, ho, wo):
        cols = _im2col_nb(xp, stride, ho, wo)
        out = np.dot(cols, w2)
        out += b
        return out, cols

    @njit(cache=True)
    def _bwd_nb(d2, cols, w2, bsz, hp, wp, cin, stride, ho, wo):
        dw = np.dot(cols.T, d2)
        db = np.zeros(d2.shape[1], dtype=np.float64)
        for r in range(d2.shape[0]):
            for o in range(d2.shape[1]):
                db[o] += d2[r, o]
        dcols = np.dot(d2, w2.T)
        return _col2im_nb(dcols, bsz, hp, wp, cin, stride, ho, wo), dw, db


def conv_forward_numba(x, w, b, stride):
    bsz, h, wd, _ = x.shape
    ho, wo = out_size(h, stride), out_size(wd, stride)
    out, cols = _fwd_nb(_pad(x), w.reshape(-1, w.shape[3]), b, stride, ho, wo)
    return out.reshape(bsz, ho, wo, w.shape[3]), cols


def conv_backward_numba(dout, saved, w, x_shape, stride):
    cols = saved
    bsz, h, wd, cin = x_shape
    _, ho, wo, cout = dout.shape
    d2 = np.ascontiguousarray(dout).reshape(-1, cout)
    dxp, dw, db = _bwd_nb(d2, cols, w.reshape(-1, cout), bsz, h + 2 * PAD, wd + 2 * PAD, cin,
                          stride, ho, wo)
    return _unpad_grad(dxp), dw.reshape(w.shape), db.astype(w.dtype)


# ---------------------------------------------------------------- dispatch

_BACKENDS = {"numpy": (conv_forward_numpy, conv_backward_numpy)}
if HAVE_NUMBA:
    _BACKENDS["numba"] = (conv_forward_numba, conv_backward_numba)

_active = "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    _active = name


def get_backend() -> str:
    return _active


def conv_forward(x, w, b, stride):
    """Returns (output, saved) where ``saved`` is backend-specific state for backward."""
    return _BACKENDS[_active][0](x, w, b, stride)


def conv_backward(dout, saved, w, x_shape, stride, backend: str | None = None):
    return _BACKENDS[backend or _active][1](dout, saved, w, x_shape, stride)


_requested = os.environ.get("CBFOCAL_BACKEND", "").strip().lower()
if _requested and _requested not in ("numba", "numpy"):
    raise ValueError(f"CBFOCAL_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
set_backend(_requested if _requested in _BACKENDS else ("numba" if HAVE_NUMBA else "numpy"))
