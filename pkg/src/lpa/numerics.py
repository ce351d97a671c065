"""Dense tensors with define-by-run reverse-mode autodiff and MAC counting.

Every op records its parents and a backward closure on the output tensor;
``backward`` walks the graph in reverse topological order.  Matmuls report
one unit per scalar multiply-accumulate to every active :class:`FlopCounter`;
elementwise ops, softmax and norms are free in that accounting.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from lpa import kernels

DTYPES = {"float32": np.float32, "float64": np.float64}

_grad_enabled = True
_counters: list["FlopCounter"] = []
_scopes: list[str] = []


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        return self.data

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Counts multiply-accumulates of matmuls executed while active.

    Use as a context manager.  ``by_scope`` splits the total by the innermost
    :func:`flop_scope` label in effect when each matmul ran.
    """

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.multiply_accumulate_count = 0
        self.by_scope: dict[str, int] = {}

    def add(self, n):
        if not self.enabled:
            return
        self.multiply_accumulate_count += n
        key = _scopes[-1] if _scopes else ""
        self.by_scope[key] = self.by_scope.get(key, 0) + n

    def scope_total(self, prefix):
        return sum(v for k, v in self.by_scope.items() if k == prefix or k.startswith(prefix + "."))

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


@contextlib.contextmanager
def flop_scope(label):
    _scopes.append(label)
    try:
        yield
    finally:
        _scopes.pop()


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b):
    """Batched matrix product ``a @ b`` over the last two axes.

    A 1-D ``a`` is treated as a single row and the result squeezed back.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        if a.shape[0] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _counters:
        m, k = a.shape[-2], a.shape[-1]
        n = b.shape[-1]
        batch = math.prod(out.shape[:-2])
        for c in _counters:
            c.add(batch * m * k * n)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_all(a):
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a):
    n = a.data.size
    shape = a.shape
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),)
    )


def embedding(weight, idx):
    """Row gather ``weight[idx]``; gradient scatters back with ``np.add.at``."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"index out of range for table of {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[idx], (weight,), bw)


def masked_softmax(scores):
    """Causal softmax over the last axis of ``[..., L, L]`` scores.

    Rows are max-shifted before exponentiation; entries above the diagonal
    are exactly zero.
    """
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"masked_softmax expects square trailing dims, got {scores.shape}")
    if scores.shape[-1] == 0:
        raise DimensionError("masked_softmax over an empty row")
    probs = kernels.causal_softmax_forward(scores.data)
    return _make(probs, (scores,), lambda g: (kernels.causal_softmax_backward(probs, g),))


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape} vs gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    out, mean, rstd = kernels.layer_norm_forward(x.data, gain.data, bias.data, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_backward(g, x.data, gain.data, mean, rstd)
        return dx, dg, db

    return _make(out, (x, gain, bias), bw)


def rms_norm(x, gain, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm: x {x.shape} vs gain {gain.shape}")
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    out, rscale = kernels.rms_norm_forward(x.data, gain.data, eps)

    def bw(g):
        dx, dg = kernels.rms_norm_backward(g, x.data, gain.data, rscale)
        return dx, dg

    return _make(out, (x, gain), bw)


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x):
    s = _sigmoid(x.data)
    return _make(x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),))


def rotary(x, cos, sin):
    """Rotate the two halves of the last axis by per-position angles.

    ``x`` is ``[..., T, dh]``; ``cos``/``sin`` are ``[T, dh/2]`` arrays.
    """
    half = x.shape[-1] // 2
    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bw(g):
        g1 = g[..., :half]
        g2 = g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw)


def log_softmax_array(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits [N, V]``."""
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    N, V = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target index out of range for vocabulary of {V}")
    logp = log_softmax_array(logits.data)
    rows = np.arange(N)
    loss = -logp[rows, targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1
        return (grad * (g / N),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def _topo_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor.

    ``root`` must be a scalar.  Gradients add onto whatever ``.grad`` already
    holds, so call :meth:`Tensor.zero_grad` between independent passes.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    order = _topo_order(root)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pid = id(parent)
            grads[pid] = pg if pid not in grads else grads[pid] + pg


def grad_check(f, x, step=1e-6, indices=None):
    """Largest relative error between autodiff and central differences.

    ``f`` maps the tensors in ``x`` (a Tensor or a list of them) to a scalar
    Tensor.  The relative error of each coordinate uses the denominator
    ``max(|a|, |b|, 1e-8)``.  ``indices`` optionally limits the check to a
    mapping ``{tensor_position: iterable of flat indices}``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(*xs) if isinstance(x, (list, tuple)) else f(x)
    backward(out)
    worst = 0.0
    with no_grad():
        for k, t in enumerate(xs):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            coords = range(flat.size) if indices is None else indices.get(k, ())
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = float((f(*xs) if isinstance(x, (list, tuple)) else f(x)).data)
                flat[i] = orig - step
                fm = float((f(*xs) if isinstance(x, (list, tuple)) else f(x)).data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
