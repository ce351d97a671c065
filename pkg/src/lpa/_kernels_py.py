"""Pure numpy implementations of the row kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used when
the extension is not built or ``LPA_PURE_PYTHON`` is set.
"""

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _causal_mask(L):
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def causal_softmax_forward(scores):
    n, L, m = scores.shape
    if m != L:
        raise ValueError(f"causal softmax needs square scores, got {L}x{m}")
    mask = _causal_mask(L)
    s = np.where(mask, -np.inf, scores)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)).astype(scores.dtype, copy=False)


def causal_softmax_backward(probs, grad):
    # masked probs are exactly 0, so masked grads come out 0 without a mask
    dot = (probs * grad).sum(axis=-1, keepdims=True)
    return probs * (grad - dot)


def layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=-1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=-1)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    out = xc * rstd[:, None] * gain + bias
    return out, mean, rstd


def layer_norm_backward(grad, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = grad * gain
    s1 = dxhat.mean(axis=-1, keepdims=True)
    s2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (dxhat - s1 - xhat * s2)
    return dx, (grad * xhat).sum(axis=0), grad.sum(axis=0)


def rms_norm_forward(x, gain, eps):
    ms = (x * x).mean(axis=-1)
    rscale = (1.0 / np.sqrt(ms + eps)).astype(x.dtype, copy=False)
    return x * rscale[:, None] * gain, rscale


def rms_norm_backward(grad, x, gain, rscale):
    r = rscale[:, None]
    dxhat = grad * gain
    s = (dxhat * x).mean(axis=-1, keepdims=True)
    dx = r * (dxhat - x * r * r * s)
    return dx, (grad * x * r).sum(axis=0)


def fnv1a64(data):
    h = _FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h
