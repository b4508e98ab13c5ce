"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` orders the reachable graph
topologically and replays the closures in reverse, accumulating into ``grad``.

Storage is plain contiguous numpy arrays. f32 is used for training, f64 for
gradient checking.
"""
from __future__ import annotations

import math

import numpy as np

_FLOATS = (np.float32, np.float64)


_selection_log = None


class record_selections:
    """Collect the discrete choices (top-k masks, max-pool winners) made inside the block.

    Finite-difference checks use this to skip probes that cross a kink.
    """

    def __enter__(self):
        global _selection_log
        self._prev, _selection_log = _selection_log, []
        return _selection_log

    def __exit__(self, *exc):
        global _selection_log
        _selection_log = self._prev


def _note_selection(arr):
    if _selection_log is not None:
        _selection_log.append(arr.tobytes())


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (unbroadcast(g * b.data, a.shape),
                                unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = a.data / b.data
    return make_node(out, (a, b),
                     lambda g: (unbroadcast(g / b.data, a.shape),
                                unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    """Elementwise ``a ** p`` for a python scalar exponent."""
    out = a.data ** p
    return make_node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    x = a.data
    out = np.logaddexp(np.zeros((), x.dtype), x)
    return make_node(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), bw)


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_node(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return make_node(out, (a,), bw)


def mean_pool(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    return mean(a, axis=axis)


def reshape(a, shape):
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.ascontiguousarray(out), (a,), bw)


def take(a, indices, axis):
    """Gather along ``axis`` (used for track permutations)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gm = np.moveaxis(g, axis, 0)
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return make_node(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv1d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x`` [B, C_in, L] with ``w`` [C_out, C_in, k]."""
    B, C, L = x.shape
    O, Cw, k = w.shape
    if Cw != C:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    Lp = L + 2 * pad
    if k > Lp:
        raise ShapeError(f"kernel width {k} exceeds padded input length {Lp}")
    Lo = (Lp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :Lo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Lo, C * k)
    wmat = w.data.reshape(O, C * k)
    out = (cols @ wmat.T).reshape(B, Lo, O).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lo, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Lo, C, k)
            gxp = np.zeros((B, Lp, C), dtype=x.dtype)
            span = stride * (Lo - 1) + 1
            for j in range(k):
                gxp[:, j:j + span:stride] += gcols[..., j]
            gx = gxp[:, pad:pad + L].transpose(0, 2, 1)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw)


def maxpool1d(x, size=2):
    """Non-overlapping max pool along the last axis; ties go to the first element."""
    *lead, L = x.shape
    if L % size:
        raise ShapeError(f"length {L} not divisible by pool size {size}")
    blocks = x.data.reshape(*lead, L // size, size)
    if size == 2:
        second = blocks[..., 1] > blocks[..., 0]
        if _selection_log is not None:
            _note_selection(second)
        out = np.where(second, blocks[..., 1], blocks[..., 0])

        def bw2(g):
            gb = np.empty_like(blocks)
            gb[..., 0] = np.where(second, 0, g)
            gb[..., 1] = np.where(second, g, 0)
            return (gb.reshape(x.shape),)

        return make_node(out, (x,), bw2)
    arg = blocks.argmax(axis=-1)
    _note_selection(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(x.shape),)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------- normalisation

def _softmax_np(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    out = _softmax_np(x.data, axis)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw)


def topk_mask(logits, k):
    """Boolean mask of the k largest entries along the last axis (lowest index wins ties)."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} entries")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_softmax(logits, k):
    """Softmax restricted to the top-k logits; everything else is exactly zero.

    The selection is treated as a constant, so gradient reaches only the
    selected logits.
    """
    mask = topk_mask(logits.data, k)
    _note_selection(mask)
    z = np.where(mask, logits.data, -np.inf)
    out = _softmax_np(z, -1)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (logits,), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shape {gamma.shape} does not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- backward pass

def topological_order(root):
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    The graph below ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is not None:
            node.grad = node.grad + g
        else:
            # leaves keep a private copy: optimisers and clipping modify .grad in place
            node.grad = g.copy() if node._backward is None else g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
        node._parents = ()
        node._backward = None


def parameter(data, dtype=np.float32, name=None):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)
    return make_node(np.ascontiguousarray(out), (a,), lambda g: (unbroadcast(g, a.shape),))
