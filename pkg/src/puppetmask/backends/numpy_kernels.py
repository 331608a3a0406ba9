"""Pure-numpy conv2d kernels: stride-trick patch views + BLAS matmul.

All kernels accept float32 or float64 and preserve the input dtype.
Valid (no padding) cross-correlation with a single integer stride, the
only convolution variant this package uses.  Internal im2col scratch is
pooled per thread; those multi-megabyte temporaries never escape a
call, and reallocating them each time dominates cost on some hosts.
"""

import threading

import numpy as np

_scratch = threading.local()


def _buf(key, shape, dtype):
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    arr = pool.get(key)
    if arr is None or arr.shape != shape or arr.dtype != dtype:
        arr = pool[key] = np.empty(shape, dtype)
    return arr


def _patch_view(x, kh, kw, stride):
    """Read-only (B, OH, OW, C, kh, kw) view of all sliding patches."""
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view, oh, ow


def _gather_cols(x, kh, kw, stride):
    view, oh, ow = _patch_view(x, kh, kw, stride)
    b, c = x.shape[0], x.shape[1]
    cols = _buf("cols", (b * oh * ow, c * kh * kw), x.dtype)
    np.copyto(cols.reshape(view.shape), view)
    return cols, oh, ow


def conv2d_forward(x, w, b, stride):
    """x: (B,C,H,W), w: (OC,C,kh,kw), b: (OC,) -> (B,OC,OH,OW)."""
    bsz = x.shape[0]
    oc, _, kh, kw = w.shape
    cols, oh, ow = _gather_cols(x, kh, kw, stride)
    flat = _buf("fwd_flat", (bsz * oh * ow, oc), x.dtype)
    np.matmul(cols, w.reshape(oc, -1).T, out=flat)
    flat += b
    return np.ascontiguousarray(
        flat.reshape(bsz, oh, ow, oc).transpose(0, 3, 1, 2)
    )


def conv2d_input_grad(gy, w, stride, h, w_in):
    """Gradient w.r.t. the conv input. gy: (B,OC,OH,OW) -> (B,C,H,W)."""
    bsz, oc, oh, ow = gy.shape
    _, c, kh, kw = w.shape
    g2 = _buf("g2", (bsz * oh * ow, oc), gy.dtype)
    np.copyto(g2.reshape(bsz, oh, ow, oc), gy.transpose(0, 2, 3, 1))
    gcols = _buf("gcols", (bsz * oh * ow, c * kh * kw), gy.dtype)
    np.matmul(g2, w.reshape(oc, -1), out=gcols)
    shaped = gcols.reshape(bsz, oh, ow, c, kh, kw)
    gx = np.zeros((bsz, c, h, w_in), dtype=gy.dtype)
    # Scatter each kernel offset back as one strided slice-add.
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                shaped[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return gx


def conv2d_weight_grad(x, gy, stride, kh, kw):
    """Gradients w.r.t. conv weights and bias. Returns (gw, gb)."""
    bsz, c, _, _ = x.shape
    oc, oh, ow = gy.shape[1], gy.shape[2], gy.shape[3]
    cols, _, _ = _gather_cols(x, kh, kw, stride)
    g2 = _buf("g2", (bsz * oh * ow, oc), gy.dtype)
    np.copyto(g2.reshape(bsz, oh, ow, oc), gy.transpose(0, 2, 3, 1))
    gw = np.empty((oc, c * kh * kw), x.dtype)
    np.matmul(g2.T, cols, out=gw)
    gb = g2.sum(axis=0, dtype=np.float64).astype(gy.dtype)
    return gw.reshape(oc, c, kh, kw), gb
