"""Elementwise kernels for the toy transformer, in numba and plain numpy.

The numba variants are used when numba imports cleanly and the environment
variable ``DAPD_DISABLE_NUMBA`` is unset (or "0").  Both variants take and
return 2-D C-contiguous arrays; callers reshape around them.
"""
import os
from types import SimpleNamespace

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


# --------------------------------------------------------------------------
# numpy reference path


def _np_layernorm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_backward(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def _gelu_tanh(x):
    # numpy's SIMD tanh beats a scalar tanh inside numba loops by ~3x
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(GELU_A)
    return np.tanh(c * (x + a * x * x * x))


def _np_gelu_forward(x):
    """tanh-approximate GELU; returns ``(y, th)`` with ``th`` kept for backward."""
    th = _gelu_tanh(x)
    return 0.5 * x * (1.0 + th), th


def _np_gelu_backward(x, th, dy):
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def _np_softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_backward(p, dp):
    return p * (dp - (p * dp).sum(axis=1, keepdims=True))


numpy_kernels = SimpleNamespace(
    name="numpy",
    layernorm_forward=_np_layernorm_forward,
    layernorm_backward=_np_layernorm_backward,
    gelu_forward=_np_gelu_forward,
    gelu_backward=_np_gelu_backward,
    softmax_forward=_np_softmax_forward,
    softmax_backward=_np_softmax_backward,
)


# --------------------------------------------------------------------------
# numba path


def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def layernorm_forward(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for k in range(d):
                mu += x[i, k]
            mu /= d
            var = 0.0
            for k in range(d):
                c = x[i, k] - mu
                var += c * c
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for k in range(d):
                h = (x[i, k] - mu) * r
                xhat[i, k] = h
                y[i, k] = h * gamma[k] + beta[k]
        return y, xhat, rstd

    @njit(cache=True)
    def layernorm_backward(dy, xhat, rstd, gamma):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(d, dtype=dy.dtype)
        dbeta = np.zeros(d, dtype=dy.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for k in range(d):
                g = dy[i, k] * gamma[k]
                m1 += g
                m2 += g * xhat[i, k]
                dgamma[k] += dy[i, k] * xhat[i, k]
                dbeta[k] += dy[i, k]
            m1 /= d
            m2 /= d
            r = rstd[i]
            for k in range(d):
                dx[i, k] = (dy[i, k] * gamma[k] - m1 - xhat[i, k] * m2) * r
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _gelu_combine(x, th):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            for k in range(d):
                y[i, k] = 0.5 * x[i, k] * (1.0 + th[i, k])
        return y

    def gelu_forward(x):
        th = _gelu_tanh(x)
        return _gelu_combine(x, th), th

    @njit(cache=True)
    def gelu_backward(x, th, dy):
        n, d = x.shape
        dx = np.empty_like(x)
        for i in range(n):
            for k in range(d):
                v = x[i, k]
                t = th[i, k]
                dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                dx[i, k] = dy[i, k] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return dx

    @njit(cache=True)
    def softmax_forward(x):
        n, d = x.shape
        p = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for k in range(1, d):
                if x[i, k] > m:
                    m = x[i, k]
            s = 0.0
            for k in range(d):
                e = np.exp(x[i, k] - m)
                p[i, k] = e
                s += e
            inv = 1.0 / s
            for k in range(d):
                p[i, k] *= inv
        return p

    @njit(cache=True)
    def softmax_backward(p, dp):
        n, d = p.shape
        dx = np.empty_like(p)
        for i in range(n):
            s = 0.0
            for k in range(d):
                s += p[i, k] * dp[i, k]
            for k in range(d):
                dx[i, k] = p[i, k] * (dp[i, k] - s)
        return dx

    return SimpleNamespace(
        name="numba",
        layernorm_forward=layernorm_forward,
        layernorm_backward=layernorm_backward,
        gelu_forward=gelu_forward,
        gelu_backward=gelu_backward,
        softmax_forward=softmax_forward,
        softmax_backward=softmax_backward,
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None


def _select():
    disabled = os.environ.get("DAPD_DISABLE_NUMBA", "0") not in ("", "0")
    if disabled or numba_kernels is None:
        return numpy_kernels
    return numba_kernels


kernels = _select()
BACKEND = kernels.name
