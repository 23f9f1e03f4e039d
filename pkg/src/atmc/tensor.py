"""Dense tensors with reverse-mode differentiation.

Just enough machinery to train LeNet-style CNNs and MLPs and to take
gradients of a loss with respect to the network input.  Every op is a thin
wrapper around a numpy kernel; the graph is recorded on the output tensor
and walked in reverse topological order by :meth:`Tensor.backward`.

Kernels are single threaded numpy calls, so the reduction order inside a
matmul is whatever the BLAS in use does with one thread.  Pin
``OPENBLAS_NUM_THREADS=1`` (or equivalent) when bit-identical reruns matter.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Select float64 (tests, gradient checks) or float32 (training)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """An n-dimensional float array that can record how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _op=""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._prev = _prev
        self._backward = None
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._prev

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping --------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        Leaf gradients accumulate; call :meth:`zero_grad` between steps.  The
        graph is released afterwards, so a second call without a fresh
        forward pass raises ``RuntimeError``.
        """
        if self._consumed:
            raise RuntimeError(
                "backward() called twice on the same graph; run a new forward pass first"
            )
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"grad shape {grad.shape} does not match {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad and g is not None:
                    node._accumulate(g)
                continue
            node._consumed = True
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
        self._consumed = True

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tsum(self) * (1.0 / self.data.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data, _prev=tuple(parents), _op=op)
    if out.requires_grad:
        out._backward = backward
    else:
        out._prev = ()
    return out


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed and node is not root:
            raise RuntimeError(
                "graph already differentiated; run a new forward pass first"
            )
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and linear algebra ----------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b):
    """2-D matrix product."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def tsum(a):
    def backward(g):
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), backward, "transpose")


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


# -- convolution and pooling -----------------------------------------------


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,kh,kw) via im2col."""
    x = _as_tensor(x)
    w = _as_tensor(w, x.dtype)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c2}")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output size would be {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wm = w.data.reshape(f, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # (c, kh, kw, n, ho, wo): each kernel tap is one contiguous block
            dcols = np.tensordot(w.data, g, axes=([0], [1]))
            dxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def maxpool2d(x, k=2, stride=None):
    """Max pooling over k x k windows; ties resolve to the first index in row-major order."""
    stride = stride or k
    n, c, h, wd = x.shape
    ho, wo = _conv_out(h, k, stride, 0), _conv_out(wd, k, stride, 0)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"maxpool2d output size would be {ho}x{wo}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(idx, k)
        rows = di + stride * np.arange(ho)[:, None]
        cols = dj + stride * np.arange(wo)[None, :]
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        index = (nn_[:, :, None, None], cc[:, :, None, None], rows, cols)
        gx = np.zeros_like(x.data)
        if k <= stride:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# -- loss -------------------------------------------------------------------


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of softmax(logits) against integer labels.

    ``logits`` is (N, K) or (K,); ``reduction`` is ``"mean"``, ``"sum"`` or
    ``"none"``.
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1]})")

    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    per_sample = lse - shifted[rows, labels]
    if reduction == "mean":
        value, scale = per_sample.mean(), 1.0 / z.shape[0]
    elif reduction == "sum":
        value, scale = per_sample.sum(), 1.0
    elif reduction == "none":
        value, scale = per_sample, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        p *= (g * scale) if scale is not None else g[:, None]
        return (p[0] if single else p,)

    return _result(np.asarray(value, dtype=z.dtype), (logits,), backward, "softmax_cross_entropy")
