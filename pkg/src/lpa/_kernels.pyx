# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: causal softmax, layer/RMS norm, FNV-1a.

Every function mirrors the signature of its counterpart in ``_kernels_py``.
Reductions run sequentially in double precision, so results are
deterministic for a given input regardless of thread count.
"""
import numpy as np

from cython cimport floating
from libc.math cimport exp, expf, sqrt
from libc.stdint cimport uint64_t


def causal_softmax_forward(floating[:, :, ::1] scores):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t L = scores.shape[1]
    cdef Py_ssize_t b, i, j
    cdef double mx, s, e, inv
    if scores.shape[2] != L:
        raise ValueError(f"causal softmax needs square scores, got {L}x{scores.shape[2]}")
    out = np.zeros((n, L, L), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] o = out
    for b in range(n):
        for i in range(L):
            mx = scores[b, i, 0]
            for j in range(1, i + 1):
                if scores[b, i, j] > mx:
                    mx = scores[b, i, j]
            s = 0.0
            for j in range(i + 1):
                if floating is float:
                    e = expf(<float>(scores[b, i, j] - mx))
                else:
                    e = exp(scores[b, i, j] - mx)
                o[b, i, j] = <floating>e
                s += e
            inv = 1.0 / s
            for j in range(i + 1):
                o[b, i, j] = <floating>(o[b, i, j] * inv)
    return out


def causal_softmax_backward(floating[:, :, ::1] probs, floating[:, :, ::1] grad):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t L = probs.shape[1]
    cdef Py_ssize_t b, i, j
    cdef double dot
    out = np.zeros((n, L, L), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] o = out
    for b in range(n):
        for i in range(L):
            dot = 0.0
            for j in range(i + 1):
                dot += probs[b, i, j] * grad[b, i, j]
            for j in range(i + 1):
                o[b, i, j] = <floating>(probs[b, i, j] * (grad[b, i, j] - dot))
    return out


def layer_norm_forward(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, k
    cdef double mu, var, diff, rs
    dt = np.float32 if floating is float else np.float64
    out = np.empty((n, d), dtype=dt)
    mean = np.empty(n, dtype=dt)
    rstd = np.empty(n, dtype=dt)
    cdef floating[:, ::1] o = out
    cdef floating[::1] m = mean
    cdef floating[::1] r = rstd
    for i in range(n):
        mu = 0.0
        for k in range(d):
            mu += x[i, k]
        mu /= d
        var = 0.0
        for k in range(d):
            diff = x[i, k] - mu
            var += diff * diff
        var /= d
        rs = 1.0 / sqrt(var + eps)
        m[i] = <floating>mu
        r[i] = <floating>rs
        for k in range(d):
            o[i, k] = <floating>((x[i, k] - mu) * rs * gain[k] + bias[k])
    return out, mean, rstd


def layer_norm_backward(floating[:, ::1] grad, floating[:, ::1] x, floating[::1] gain,
                        floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, k
    cdef double xhat, dxhat, s1, s2, rs
    dt = np.float32 if floating is float else np.float64
    dx = np.empty((n, d), dtype=dt)
    dgain_acc = np.zeros(d, dtype=np.float64)
    dbias_acc = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dxv = dx
    cdef double[::1] dg = dgain_acc
    cdef double[::1] db = dbias_acc
    for i in range(n):
        rs = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for k in range(d):
            xhat = (x[i, k] - mean[i]) * rs
            dxhat = grad[i, k] * gain[k]
            s1 += dxhat
            s2 += dxhat * xhat
            dg[k] += grad[i, k] * xhat
            db[k] += grad[i, k]
        s1 /= d
        s2 /= d
        for k in range(d):
            xhat = (x[i, k] - mean[i]) * rs
            dxv[i, k] = <floating>(rs * (grad[i, k] * gain[k] - s1 - xhat * s2))
    return dx, dgain_acc.astype(dt), dbias_acc.astype(dt)


def rms_norm_forward(floating[:, ::1] x, floating[::1] gain, double eps):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, k
    cdef double ms, rs
    dt = np.float32 if floating is float else np.float64
    out = np.empty((n, d), dtype=dt)
    rscale = np.empty(n, dtype=dt)
    cdef floating[:, ::1] o = out
    cdef floating[::1] r = rscale
    for i in range(n):
        ms = 0.0
        for k in range(d):
            ms += x[i, k] * x[i, k]
        ms /= d
        rs = 1.0 / sqrt(ms + eps)
        r[i] = <floating>rs
        for k in range(d):
            o[i, k] = <floating>(x[i, k] * rs * gain[k])
    return out, rscale


def rms_norm_backward(floating[:, ::1] grad, floating[:, ::1] x, floating[::1] gain,
                      floating[::1] rscale):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, k
    cdef double rs, s
    dt = np.float32 if floating is float else np.float64
    dx = np.empty((n, d), dtype=dt)
    dgain_acc = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dxv = dx
    cdef double[::1] dg = dgain_acc
    for i in range(n):
        rs = rscale[i]
        s = 0.0
        for k in range(d):
            s += grad[i, k] * gain[k] * x[i, k]
            dg[k] += grad[i, k] * x[i, k] * rs
        s /= d
        for k in range(d):
            dxv[i, k] = <floating>(rs * (grad[i, k] * gain[k] - x[i, k] * rs * rs * s))
    return dx, dgain_acc.astype(dt)


def fnv1a64(const unsigned char[::1] data):
    cdef uint64_t h = 0xcbf29ce484222325ULL
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= data[i]
        h *= 0x100000001b3ULL
    return h
