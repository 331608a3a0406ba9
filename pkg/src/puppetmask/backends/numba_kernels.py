"""Numba-compiled conv2d kernels.

Each kernel fuses the im2col gather into compiled loops and hands the
contraction to BLAS via ``np.dot``.  Loops are single-threaded with a
fixed iteration order, so results are bit-reproducible run to run.
First call per dtype pays the JIT cost; compiled code is disk-cached.

The large im2col scratch buffers never escape a call, so they are
pooled per thread and reused: repeated reallocation of multi-megabyte
blocks dominates kernel cost on some hosts.
"""

import threading

import numpy as np
from numba import njit

_JIT = {"cache": True, "fastmath": True}

_scratch = threading.local()


def _buf(key, shape, dtype):
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    arr = pool.get(key)
    if arr is None or arr.shape != shape or arr.dtype != dtype:
        arr = pool[key] = np.empty(shape, dtype)
    return arr


@njit(**_JIT)
def _im2col(x, kh, kw, stride, cols):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    for n in range(b):
        for i in range(oh):
            ih0 = i * stride
            for j in range(ow):
                r = (n * oh + i) * ow + j
                iw0 = j * stride
                k = 0
                for ch in range(c):
                    for p in range(kh):
                        for q in range(kw):
                            cols[r, k] = x[n, ch, ih0 + p, iw0 + q]
                            k += 1


@njit(**_JIT)
def _fwd_finish(flat, b, out):
    bsz, oc, oh, ow = out.shape
    for n in range(bsz):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    out[n, o, i, j] = flat[(n * oh + i) * ow + j, o] + b[o]


@njit(**_JIT)
def _to_rows(gy, g2):
    bsz, oc, oh, ow = gy.shape
    for n in range(bsz):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    g2[(n * oh + i) * ow + j, o] = gy[n, o, i, j]


@njit(**_JIT)
def _col2im_add(gcols, stride, kh, kw, gx):
    bsz, c, h, w = gx.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    for n in range(bsz):
        for i in range(oh):
            ih0 = i * stride
            for j in range(ow):
                r = (n * oh + i) * ow + j
                iw0 = j * stride
                k = 0
                for ch in range(c):
                    for p in range(kh):
                        for q in range(kw):
                            gx[n, ch, ih0 + p, iw0 + q] += gcols[r, k]
                            k += 1


@njit(**_JIT)
def _rows_t(gy, g2t, gb):
    bsz, oc, oh, ow = gy.shape
    for n in range(bsz):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    g = gy[n, o, i, j]
                    g2t[o, (n * oh + i) * ow + j] = g
                    gb[o] += g


def conv2d_forward(x, w, b, stride):
    """x: (B,C,H,W), w: (OC,C,kh,kw), b: (OC,) -> (B,OC,OH,OW)."""
    oc, _, kh, kw = w.shape
    x = np.ascontiguousarray(x)
    bsz, c, h, w_in = x.shape
    oh = (h - kh) // stride + 1
    ow = (w_in - kw) // stride + 1
    cols = _buf("cols", (bsz * oh * ow, c * kh * kw), x.dtype)
    _im2col(x, kh, kw, stride, cols)
    flat = _buf("fwd_flat", (bsz * oh * ow, oc), x.dtype)
    np.matmul(cols, np.ascontiguousarray(w.reshape(oc, -1)).T, out=flat)
    out = np.empty((bsz, oc, oh, ow), x.dtype)
    _fwd_finish(flat, np.ascontiguousarray(b), out)
    return out


def conv2d_input_grad(gy, w, stride, h, w_in):
    """Gradient w.r.t. the conv input. gy: (B,OC,OH,OW) -> (B,C,H,W)."""
    oc, c, kh, kw = w.shape
    gy = np.ascontiguousarray(gy)
    bsz, _, oh, ow = gy.shape
    g2 = _buf("g2", (bsz * oh * ow, oc), gy.dtype)
    _to_rows(gy, g2)
    gcols = _buf("gcols", (bsz * oh * ow, c * kh * kw), gy.dtype)
    np.matmul(g2, np.ascontiguousarray(w.reshape(oc, -1)), out=gcols)
    gx = np.zeros((bsz, c, h, w_in), gy.dtype)
    _col2im_add(gcols, stride, kh, kw, gx)
    return gx


def conv2d_weight_grad(x, gy, stride, kh, kw):
    """Gradients w.r.t. conv weights and bias. Returns (gw, gb)."""
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    bsz, c, h, w_in = x.shape
    oc, oh, ow = gy.shape[1], gy.shape[2], gy.shape[3]
    cols = _buf("cols", (bsz * oh * ow, c * kh * kw), x.dtype)
    _im2col(x, kh, kw, stride, cols)
    g2t = _buf("g2t", (oc, bsz * oh * ow), gy.dtype)
    gb = np.zeros(oc, np.float64)
    _rows_t(gy, g2t, gb)
    gw = np.empty((oc, c * kh * kw), x.dtype)
    np.matmul(g2t, cols, out=gw)
    return gw.reshape(oc, c, kh, kw), gb.astype(gy.dtype)
