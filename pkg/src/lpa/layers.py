"""Dense and factored linear maps, attention, feed-forward, and residual blocks.

All linear maps are bias-free.  A :class:`FactoredLinear` replaces a dense
``d_in x d_out`` weight with ``W_A (d_in x r)`` followed by ``W_B (r x d_out)``
and never forms the product during training.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from lpa import numerics as nx
from lpa.numerics import DimensionError, Tensor

ORDERS = ("setting1", "setting2", "postnorm")
FFN_VARIANTS = ("relu2", "swiglu3")
NORM_EPS = 1e-5


class LowRankWarning(UserWarning):
    """Factored module has at least as many parameters as the dense map."""


def savings_threshold(d_in, d_out):
    """Rank below which a factored module is smaller than the dense map."""
    return d_in * d_out / (d_in + d_out)


class DenseLinear:
    def __init__(self, W: Tensor):
        self.W = W

    @classmethod
    def init(cls, d_in, d_out, rng, dtype=np.float64):
        W = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)).astype(dtype)
        return cls(Tensor(W, requires_grad=True))

    @property
    def d_in(self):
        return self.W.shape[0]

    @property
    def d_out(self):
        return self.W.shape[1]

    @property
    def param_count(self):
        return self.W.data.size

    def parameters(self):
        return {"W": self.W}

    def dense_weight(self):
        return self.W.data

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"input last dim {x.shape[-1]} != d_in {self.d_in}")
        return x @ self.W


class FactoredLinear:
    """Two sequential projections ``x -> x W_A -> (x W_A) W_B``."""

    def __init__(self, W_A: Tensor, W_B: Tensor):
        if W_A.shape[1] != W_B.shape[0]:
            raise DimensionError(f"factor shapes disagree: {W_A.shape} and {W_B.shape}")
        self.W_A = W_A
        self.W_B = W_B
        d_in, d_out = W_A.shape[0], W_B.shape[1]
        if self.r >= savings_threshold(d_in, d_out):
            warnings.warn(
                f"r={self.r} >= {savings_threshold(d_in, d_out):.4g} for a {d_in}x{d_out} map;"
                " the factored module saves no parameters",
                LowRankWarning,
                stacklevel=2,
            )

    @classmethod
    def init(cls, d_in, d_out, r, rng, dtype=np.float64):
        # product variance ~ 1/d_in, same as dense fan-in init
        A = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, r)).astype(dtype)
        B = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, d_out)).astype(dtype)
        return cls(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True))

    @classmethod
    def from_dense(cls, W, r=None):
        """Split a dense weight by SVD, balancing singular values across factors.

        With ``r = min(d_in, d_out)`` (the default) the product reproduces
        ``W`` to rounding error.
        """
        W = np.asarray(W)
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
        r = min(W.shape) if r is None else r
        root = np.sqrt(S[:r])
        A = (U[:, :r] * root).astype(W.dtype)
        B = (root[:, None] * Vt[:r]).astype(W.dtype)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LowRankWarning)
            return cls(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True))

    @property
    def r(self):
        return self.W_A.shape[1]

    @property
    def d_in(self):
        return self.W_A.shape[0]

    @property
    def d_out(self):
        return self.W_B.shape[1]

    @property
    def param_count(self):
        return self.W_A.data.size + self.W_B.data.size

    def parameters(self):
        return {"A": self.W_A, "B": self.W_B}

    def dense_weight(self):
        return self.W_A.data @ self.W_B.data

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"input last dim {x.shape[-1]} != d_in {self.d_in}")
        return (x @ self.W_A) @ self.W_B


def make_linear(d_in, d_out, r, rng, dtype):
    """Dense map when ``r`` is None, factored otherwise."""
    if r is None:
        return DenseLinear.init(d_in, d_out, rng, dtype)
    return FactoredLinear.init(d_in, d_out, r, rng, dtype)


def factored_forward(x, m: FactoredLinear):
    return m(x)


class LayerNorm:
    def __init__(self, d, dtype=np.float64):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, NORM_EPS)


class RMSNorm:
    def __init__(self, d, dtype=np.float64):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"gain": self.gain}

    def __call__(self, x):
        return nx.rms_norm(x, self.gain, NORM_EPS)


def make_norm(kind, d, dtype):
    if kind == "layer":
        return LayerNorm(d, dtype)
    if kind == "rms":
        return RMSNorm(d, dtype)
    raise ValueError(f"unknown norm {kind!r}")


def rotary_tables(T, head_dim, dtype=np.float64, base=10000.0):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(T, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


class AttentionLayer:
    """Causal multi-head self-attention with per-sublayer dense or factored maps.

    ``sublayers`` maps each of ``"Q"``, ``"K"``, ``"V"``, ``"O"`` to a linear
    module.  Q, K, V map ``d -> d_a`` and O maps ``d_a -> d``; heads are carved
    from the ``d_a`` outputs, after any factored bottleneck.
    """

    NAMES = ("Q", "K", "V", "O")

    def __init__(self, sublayers, head_count, causal=True, rotary=False):
        self.q, self.k, self.v, self.o = (sublayers[n] for n in self.NAMES)
        self.head_count = head_count
        self.causal = causal
        self.rotary = rotary
        d_a = self.q.d_out
        if d_a % head_count:
            raise DimensionError(f"inner dim {d_a} not divisible by {head_count} heads")
        if rotary and (d_a // head_count) % 2:
            raise DimensionError("rotary positions need an even head dimension")
        if not causal:
            raise NotImplementedError("only causal attention is supported")

    @classmethod
    def init(cls, d, head_count, rng, r=None, factored=(), d_a=None, rotary=False, dtype=np.float64):
        d_a = d if d_a is None else d_a
        shapes = {"Q": (d, d_a), "K": (d, d_a), "V": (d, d_a), "O": (d_a, d)}
        subs = {}
        for name in cls.NAMES:
            d_in, d_out = shapes[name]
            subs[name] = make_linear(d_in, d_out, r if name in factored else None, rng, dtype)
        return cls(subs, head_count, rotary=rotary)

    @property
    def d_model(self):
        return self.q.d_in

    @property
    def inner_dim(self):
        return self.q.d_out

    @property
    def head_dim(self):
        return self.inner_dim // self.head_count

    def sublayers(self):
        return dict(zip(self.NAMES, (self.q, self.k, self.v, self.o)))

    def parameters(self):
        out = {}
        for name, mod in self.sublayers().items():
            for pname, p in mod.parameters().items():
                out[f"{name.lower()}.{pname}"] = p
        return out

    def _split(self, t, B, T):
        h, dh = self.head_count, self.head_dim
        return t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

    def __call__(self, x, rope=None):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        B, T, _ = x.shape
        if T == 0:
            raise DimensionError("attention over an empty sequence")
        with nx.flop_scope("attention.proj"):
            q = self._split(self.q(x), B, T)
            k = self._split(self.k(x), B, T)
            v = self._split(self.v(x), B, T)
        if rope is not None:
            cos, sin = rope
            q = nx.rotary(q, cos[:T], sin[:T])
            k = nx.rotary(k, cos[:T], sin[:T])
        with nx.flop_scope("attention.core"):
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
            weights = nx.masked_softmax(scores)
            ctx = weights @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, self.inner_dim)
        with nx.flop_scope("attention.proj"):
            z = self.o(ctx)
        return z.reshape(T, self.d_model) if squeeze else z


def attention_forward(x, layer: AttentionLayer, rope=None):
    return layer(x, rope)


class FeedForward:
    """``relu2``: relu(x W_U) W_D.  ``swiglu3``: (silu(x W_gate) * x W_U) W_D."""

    def __init__(self, variant, up, down, gate=None):
        if variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn variant {variant!r}")
        if (variant == "swiglu3") != (gate is not None):
            raise ValueError("swiglu3 needs a gate matrix and relu2 must not have one")
        self.variant = variant
        self.up = up
        self.down = down
        self.gate = gate

    @classmethod
    def init(cls, variant, d, d_ffn, rng, r=None, dtype=np.float64):
        gate = make_linear(d, d_ffn, r, rng, dtype) if variant == "swiglu3" else None
        up = make_linear(d, d_ffn, r, rng, dtype)
        down = make_linear(d_ffn, d, r, rng, dtype)
        return cls(variant, up, down, gate)

    def matrices(self):
        mats = {"up": self.up, "down": self.down}
        if self.gate is not None:
            mats = {"gate": self.gate, **mats}
        return mats

    def parameters(self):
        out = {}
        for name, mod in self.matrices().items():
            for pname, p in mod.parameters().items():
                out[f"{name}.{pname}"] = p
        return out

    def __call__(self, x):
        if self.variant == "relu2":
            hidden = nx.relu(self.up(x))
        else:
            hidden = nx.silu(self.gate(x)) * self.up(x)
        return self.down(hidden)


def ffn_forward(x, ffn: FeedForward):
    return ffn(x)


class Block:
    """Attention then feed-forward, each wrapped in a residual per ``order``.

    ``setting1``: ``y = x + Norm(Sub(x))``.  ``setting2``: ``y = x + Sub(Norm(x))``.
    ``postnorm``: ``y = Norm(x + Sub(x))``.
    """

    def __init__(self, attention, ffn, norm1, norm2, order):
        if order not in ORDERS:
            raise ValueError(f"unknown block order {order!r}")
        self.attention = attention
        self.ffn = ffn
        self.norm1 = norm1
        self.norm2 = norm2
        self.order = order

    def parameters(self):
        out = {}
        for prefix, mod in (("attn", self.attention), ("ffn", self.ffn), ("norm1", self.norm1), ("norm2", self.norm2)):
            for name, p in mod.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def _residual(self, x, sub, norm):
        if self.order == "setting1":
            return x + norm(sub(x))
        if self.order == "setting2":
            return x + sub(norm(x))
        return norm(x + sub(x))

    def __call__(self, x, rope=None):
        x = self._residual(x, lambda t: self.attention(t, rope), self.norm1)
        return self._residual(x, self.ffn, self.norm2)


def block_forward(x, block: Block, rope=None):
    return block(x, rope)


def jacobian_dependence(layer_kind, L, d, seed=0, r=None, ffn_variant="relu2"):
    """Boolean ``[L, L]`` map: does output token ``i`` depend on input token ``j``?

    Builds a random layer of the given kind, then back-propagates every scalar
    output element separately and marks ``(i, j)`` when any entry of
    ``dz_i/dx_j`` exceeds ``1e-8`` in magnitude.
    """
    rng = np.random.default_rng(seed)
    if layer_kind == "attention":
        heads = 2 if d % 2 == 0 else 1
        factored = ("Q", "K", "V", "O") if r is not None else ()
        layer = AttentionLayer.init(d, heads, rng, r=r, factored=factored)
    elif layer_kind == "ffn":
        layer = FeedForward.init(ffn_variant, d, 4 * d, rng, r=r)
    else:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    x = Tensor(rng.normal(size=(L, d)), requires_grad=True)
    dep = np.zeros((L, L), dtype=bool)
    z = layer(x)
    for i in range(L):
        for a in range(z.shape[1]):
            x.grad = None
            sel = np.zeros(z.shape)
            sel[i, a] = 1.0
            out = (z * Tensor(sel)).sum()
            nx.backward(out)
            dep[i] |= np.abs(x.grad).max(axis=1) > 1e-8
    return dep
