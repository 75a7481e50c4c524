"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records, per operation, a closure that
maps the output gradient onto the input gradients.  The graph is built
define-by-run; ``backward`` walks it once in reverse topological order and
accumulates into ``.grad``, so a value used in several places receives the
sum of all its downstream contributions.

Design constraints, in rough order of importance:

* Gradients must survive a finite-difference check at 1e-4 relative error,
  so every activation here is smooth (erf-based GELU, softmax, layer norm).
* Arrays keep whatever dtype they were created with; nothing silently
  casts.  Precision is chosen where parameters are created (f32 for
  training speed, f64 for gradient checking) and propagates from there.
* Calling ``backward`` twice on the same graph would double-accumulate,
  so the second call raises instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import kernels

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (for eval loops)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            raise TypeError("Tensor(data) expects an array-like, not a Tensor")
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, _as_tensor(1.0 / float(scalar), self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad=None):
        backward(self, grad)

    def zero_grad(self):
        self.grad = None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product via np.matmul broadcasting; inputs must be >=2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward_fn(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward_fn(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def getitem(a: Tensor, idx) -> Tensor:
    advanced = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    )

    def backward_fn(g):
        z = np.zeros_like(a.data)
        if advanced:
            np.add.at(z, idx, g)  # integer indices may repeat
        else:
            z[idx] += g  # basic slices never alias
        _accum(a, z)

    return _make(a.data[idx], (a,), backward_fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward_fn(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]
    )

    def backward_fn(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        scaled = gg / count
        _accum(a, np.broadcast_to(scaled, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward_fn)


# ---------------------------------------------------------------------------
# neural-net ops


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-form) GELU; smooth everywhere, so finite differences agree."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))

    return _make(out, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax.

    Additive masks of -1e9 underflow to exactly 0.0 after the shift and
    exp, which is what makes the causal-masking test exact rather than
    approximate.
    """
    x = a.data
    if np.isnan(x).any():
        raise ValueError("softmax received NaN input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward_fn(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=reduce_axes))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=reduce_axes))
        if a.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * term)

    return _make(out, (a, gain, bias), backward_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer id; grads scatter-add back."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )

    def backward_fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        kernels.scatter_add_rows(
            table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1])
        )

    return _make(table.data[ids], (table,), backward_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels)
    x = logits.data
    if x.ndim != 2:
        raise ValueError("cross_entropy expects (batch, classes) logits")
    b = x.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise ValueError(
            f"label out of range [0, {x.shape[1]}): min {labels.min()}, max {labels.max()}"
        )
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    nll = -log_probs[np.arange(b), labels]
    out = np.asarray(nll.mean(), dtype=x.dtype)

    def backward_fn(g):
        p = e / z
        p[np.arange(b), labels] -= 1.0
        _accum(logits, p * (np.asarray(g) / b))

    return _make(out, (logits,), backward_fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution via im2col + one matmul.

    x: (B, C_in, H, W), w: (C_out, C_in, kh, kw), b: (C_out,).
    """
    bsz, c_in, h, wi = x.data.shape
    c_out, c_in2, kh, kw = w.data.shape
    if c_in != c_in2:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight {c_in2}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)  # (B, P, C*kh*kw)
    wmat = w.data.reshape(c_out, -1).T  # (C*kh*kw, C_out)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wi + 2 * pad - kw) // stride + 1
    out = np.matmul(cols, wmat) + b.data  # (B, P, C_out)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, c_out, oh, ow)

    def backward_fn(g):
        gmat = np.ascontiguousarray(g.reshape(bsz, c_out, oh * ow).transpose(0, 2, 1))
        if b.requires_grad:
            _accum(b, gmat.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gmat).sum(axis=0)  # (C*kh*kw, C_out)
            _accum(w, gw.T.reshape(w.data.shape))
        if x.requires_grad:
            dcols = np.matmul(gmat, wmat.T)
            _accum(x, kernels.col2im(dcols, x.data.shape, kh, kw, stride, pad))

    return _make(out, (x, w, b), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents always precede their consumers


def backward(root: Tensor, grad=None) -> None:
    """Propagate gradients from ``root`` to every reachable parameter.

    ``grad`` seeds the root gradient and defaults to 1 for scalars.  The
    same graph cannot be walked twice: gradients accumulate with +=, so a
    second walk would silently double every gradient.
    """
    if not root.requires_grad:
        raise RuntimeError("backward() on a tensor that does not require grad")
    if root._done:
        raise RuntimeError(
            "backward() already ran on this graph; rebuild the forward pass "
            "(and zero gradients) before differentiating again"
        )
    if grad is None:
        if root.data.ndim != 0:
            raise RuntimeError("backward() on a non-scalar requires an explicit grad")
        grad = np.ones_like(root.data)
    _accum(root, np.asarray(grad, dtype=root.data.dtype))
    order = _topo_order(root)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    root._done = True


def zero_grad(params) -> None:
    """Drop gradients on a dict or iterable of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter moment buffers keyed by name."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Apply one bias-corrected Adam update, in place, to every named param.

    ``params`` and ``grads`` are parallel name-keyed dicts; a parameter
    without a gradient is an error (it means the caller passed something
    that never entered the loss graph).
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        kernels.adam_update(
            p.data, g, state.m[name], state.v[name],
            state.lr, state.beta1, state.beta2, state.eps, bc1, bc2,
        )
