"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when the
extension is missing or ``LPA_PURE_PYTHON=1`` is set in the environment.
Callers go through the module-level wrappers below, which normalize layout
(contiguous, 2-D/3-D) before dispatching.
"""

import contextlib
import importlib
import os

import numpy as np

from lpa import _kernels_py


def load_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("lpa._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("LPA_PURE_PYTHON", "") not in ("", "0"):
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _kernels_py


BACKEND, _impl = _select()


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route every wrapper through backend ``name``."""
    global BACKEND, _impl
    saved = BACKEND, _impl
    BACKEND, _impl = name, load_backend(name)
    try:
        yield _impl
    finally:
        BACKEND, _impl = saved


def _c(a):
    return np.ascontiguousarray(a)


def causal_softmax_forward(scores, impl=None):
    impl = impl or _impl
    shape = scores.shape
    out = impl.causal_softmax_forward(_c(scores.reshape(-1, shape[-2], shape[-1])))
    return out.reshape(shape)


def causal_softmax_backward(probs, grad, impl=None):
    impl = impl or _impl
    shape = probs.shape
    L = shape[-1]
    out = impl.causal_softmax_backward(_c(probs.reshape(-1, L, L)), _c(grad.reshape(-1, L, L)))
    return out.reshape(shape)


def layer_norm_forward(x, gain, bias, eps, impl=None):
    impl = impl or _impl
    d = x.shape[-1]
    out, mean, rstd = impl.layer_norm_forward(_c(x.reshape(-1, d)), _c(gain), _c(bias), float(eps))
    return out.reshape(x.shape), mean, rstd


def layer_norm_backward(grad, x, gain, mean, rstd, impl=None):
    impl = impl or _impl
    d = x.shape[-1]
    dx, dg, db = impl.layer_norm_backward(
        _c(grad.reshape(-1, d)), _c(x.reshape(-1, d)), _c(gain), mean, rstd
    )
    return dx.reshape(x.shape), dg, db


def rms_norm_forward(x, gain, eps, impl=None):
    impl = impl or _impl
    d = x.shape[-1]
    out, rscale = impl.rms_norm_forward(_c(x.reshape(-1, d)), _c(gain), float(eps))
    return out.reshape(x.shape), rscale


def rms_norm_backward(grad, x, gain, rscale, impl=None):
    impl = impl or _impl
    d = x.shape[-1]
    dx, dg = impl.rms_norm_backward(_c(grad.reshape(-1, d)), _c(x.reshape(-1, d)), _c(gain), rscale)
    return dx.reshape(x.shape), dg


def fnv1a64(data, impl=None):
    impl = impl or _impl
    return impl.fnv1a64(bytes(data))
