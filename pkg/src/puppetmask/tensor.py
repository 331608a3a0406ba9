"""Dense tensors with reverse-mode differentiation, plus Adam.

Small define-by-run autograd: every operation returns a new
:class:`Tensor` that remembers its inputs and a backward closure.
``backward()`` on a scalar output walks the recorded graph exactly once
in reverse topological order and accumulates gradients into every
tensor that requires them -- including graph *inputs*, which the attack
code differentiates against.

Conventions:
* storage is float32 by default; float64 is supported end to end for
  high-precision oracles,
* reductions (mean, l2_norm) accumulate in float64 and cast back to the
  storage dtype,
* relu's subgradient at 0 is 0,
* clip_range passes gradient where the pre-clip value lies inside the
  closed interval [lo, hi].
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import backends


class ShapeError(ValueError):
    """Operation rejected because input shapes are incompatible."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (fast inference path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar output.

        Populates ``grad`` on every reachable tensor whose
        ``requires_grad`` is set (intermediates included).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar output, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # Convenience operators; the named functions below are the API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return sub(self, other)


def _toposort(root):
    """Iterative DFS post-order; each node appears exactly once."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data, parents, backward_fn):
    """Wrap an op result; records the graph only while grads are enabled."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    return add(a, scale(_as_tensor(b, like=_as_tensor(a)), -1.0))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    data = a.data * a.data.dtype.type(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * a.data.dtype.type(s))

    return _make(data, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def dense(x, w, b):
    """x @ w + b with bias broadcast over the batch axis."""
    return add(matmul(x, w), b)


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def clip_range(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes where lo <= value <= hi."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(g * inside)

    return _make(data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def log_softmax(a):
    """Row-wise log softmax with max subtraction; rank 1 or 2."""
    a = _as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"log_softmax: expected rank 1 or 2, got shape {a.shape}")
    if a.shape[-1] == 0:
        raise ShapeError("log_softmax: empty action axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True, dtype=np.float64))
    data = (z - lse).astype(a.data.dtype)

    def backward(g):
        if a.requires_grad:
            p = np.exp(data)
            a._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def conv2d(x, w, b, stride=1):
    """Valid cross-correlation. x: (B,C,H,W), w: (OC,C,kh,kw), b: (OC,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expected rank-4 input and weight, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: channel mismatch, input has {x.shape[1]} but weight expects "
            f"{w.shape[1]}"
        )
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    data = backends.conv2d_forward(x.data, w.data, b.data, stride)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(
                backends.conv2d_input_grad(g, w.data, stride, x.shape[2], x.shape[3])
            )
        if w.requires_grad or b.requires_grad:
            gw, gb = backends.conv2d_weight_grad(x.data, g, stride, kh, kw)
            if w.requires_grad:
                w._accumulate(gw)
            if b.requires_grad:
                b._accumulate(gb)

    return _make(data, (x, w, b), backward)


def add_to_channel(stack, patch, channel):
    """Add a (H,W) patch onto one channel of a (B,C,H,W) stack."""
    stack, patch = _as_tensor(stack), _as_tensor(patch)
    if stack.data.ndim != 4 or patch.data.shape != stack.data.shape[2:]:
        raise ShapeError(
            f"add_to_channel: patch {patch.shape} does not match stack {stack.shape}"
        )
    data = stack.data.copy()
    data[:, channel] += patch.data

    def backward(g):
        if stack.requires_grad:
            stack._accumulate(g)
        if patch.requires_grad:
            patch._accumulate(g[:, channel].sum(axis=0))

    return _make(data, (stack, patch), backward)


# ---------------------------------------------------------------------------
# reductions and gathers
# ---------------------------------------------------------------------------


def mean(a):
    a = _as_tensor(a)
    data = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g / a.size, dtype=a.data.dtype))

    return _make(data, (a,), backward)


def l2_norm(a):
    a = _as_tensor(a)
    sq = np.sum(np.square(a.data, dtype=np.float64))
    data = np.asarray(np.sqrt(sq), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            n = float(data)
            if n > 0:
                a._accumulate(g * (a.data / a.data.dtype.type(n)))

    return _make(data, (a,), backward)


def take_column(a, j):
    """Column j of a rank-2 tensor -> rank-1."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_column: expected rank 2, got shape {a.shape}")
    data = a.data[:, j].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, j] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


def take_per_row(a, idx):
    """Per-row gather: out[i] = a[i, idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(
            f"take_per_row: need (B,K) tensor and (B,) index, got {a.shape} and "
            f"{idx.shape}"
        )
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a list of named tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                label = p.name or f"param[{i}]"
                raise ValueError(f"Adam: non-finite gradient for {label}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * np.square(g)
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype
            )


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_diff_grad(f, point, h):
    """Central-difference gradient estimate of a scalar function.

    ``f`` takes an ndarray shaped like ``point`` and returns a float.
    Independent of the autodiff machinery above by construction.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be > 0, got {h}")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(point))
        flat[i] = orig - h
        fm = float(f(point))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(
                f"finite_diff_grad: non-finite function value at coordinate {i}"
            )
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
