"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``PREFALIGN_NUMBA`` is not ``"0"``.  Both paths implement the same
formulas; ``set_backend`` switches at runtime (tests run both).

Row kernels take C-contiguous 2-D float64 arrays and operate on the last
axis; elementwise kernels (finite check, gelu, adam) take 1-D views.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


class _NumpyKernels:
    name = "numpy"

    @staticmethod
    def all_finite(x):
        return bool(np.isfinite(x).all())

    @staticmethod
    def softmax_fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def softmax_bwd(y, g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    @staticmethod
    def causal_softmax_fwd(x, t):
        n = x.shape[0]
        blocked = np.arange(t)[None, :] > (np.arange(n) % t)[:, None]
        z = np.where(blocked, -np.inf, x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def causal_softmax_bwd(y, g, t):
        # y is exactly zero on blocked entries, so the dense formula applies
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    @staticmethod
    def log_softmax_fwd(x):
        z = x - x.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    @staticmethod
    def log_softmax_bwd(y, g):
        return g - np.exp(y) * g.sum(axis=1, keepdims=True)

    @staticmethod
    def layer_norm_fwd(x, gamma, beta, eps):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        return xhat * gamma + beta, xhat, rstd[:, 0]

    @staticmethod
    def layer_norm_bwd(g, xhat, rstd, gamma):
        n = xhat.shape[1]
        gh = g * gamma
        dx = (rstd[:, None] / n) * (
            n * gh - gh.sum(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    @staticmethod
    def gelu_fwd(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))

    @staticmethod
    def gelu_bwd(x, g):
        u = _GELU_C * (x + 0.044715 * x * x * x)
        t = np.tanh(u)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    @staticmethod
    def adam_update(p, g, m, v, lr, b1, b2, eps, t):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if _HAS_NUMBA:
    _jit = numba.njit(cache=True, fastmath=False, nogil=True)

    @_jit
    def _nb_all_finite(x):
        for i in range(x.size):
            if not math.isfinite(x[i]):
                return False
        return True

    @_jit
    def _nb_softmax_fwd(x):
        n, c = x.shape
        y = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, c):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(c):
                e = math.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(c):
                y[i, j] *= inv
        return y

    @_jit
    def _nb_softmax_bwd(y, g):
        n, c = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += g[i, j] * y[i, j]
            for j in range(c):
                dx[i, j] = y[i, j] * (g[i, j] - s)
        return dx

    @_jit
    def _nb_causal_softmax_fwd(x, t):
        n, c = x.shape
        y = np.zeros_like(x)
        for i in range(n):
            q = i % t
            mx = x[i, 0]
            for j in range(1, q + 1):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(q + 1):
                e = math.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(q + 1):
                y[i, j] *= inv
        return y

    @_jit
    def _nb_causal_softmax_bwd(y, g, t):
        n, c = y.shape
        dx = np.zeros_like(y)
        for i in range(n):
            q = i % t
            s = 0.0
            for j in range(q + 1):
                s += g[i, j] * y[i, j]
            for j in range(q + 1):
                dx[i, j] = y[i, j] * (g[i, j] - s)
        return dx

    @_jit
    def _nb_log_softmax_fwd(x):
        n, c = x.shape
        y = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, c):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(c):
                s += math.exp(x[i, j] - mx)
            lse = math.log(s)
            for j in range(c):
                y[i, j] = x[i, j] - mx - lse
        return y

    @_jit
    def _nb_log_softmax_bwd(y, g):
        n, c = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(c):
                s += g[i, j]
            for j in range(c):
                dx[i, j] = g[i, j] - math.exp(y[i, j]) * s
        return dx

    @_jit
    def _nb_layer_norm_fwd(x, gamma, beta, eps):
        n, c = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            var /= c
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(c):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @_jit
    def _nb_layer_norm_bwd(g, xhat, rstd, gamma):
        n, c = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(c)
        dbeta = np.zeros(c)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(c):
                gh = g[i, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                dgamma[j] += g[i, j] * xhat[i, j]
                dbeta[j] += g[i, j]
            k = rstd[i] / c
            for j in range(c):
                gh = g[i, j] * gamma[j]
                dx[i, j] = k * (c * gh - s1 - xhat[i, j] * s2)
        return dx, dgamma, dbeta

    @_jit
    def _nb_gelu_fwd(x):
        y = np.empty_like(x)
        # 0.5 v (1 + tanh u) == v - v / (exp(2u) + 1); exp is much cheaper than tanh here
        for i in range(x.size):
            v = x[i]
            y[i] = v - v / (math.exp(2.0 * _GELU_C * (v + 0.044715 * v * v * v)) + 1.0)
        return y

    @_jit
    def _nb_gelu_bwd(x, g):
        dx = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            t = 1.0 - 2.0 / (math.exp(2.0 * _GELU_C * (v + 0.044715 * v * v * v)) + 1.0)
            du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
            dx[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return dx

    @_jit
    def _nb_adam_update(p, g, m, v, lr, b1, b2, eps, t):
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for i in range(p.size):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)

    class _NumbaKernels:
        name = "numba"
        all_finite = staticmethod(_nb_all_finite)
        softmax_fwd = staticmethod(_nb_softmax_fwd)
        softmax_bwd = staticmethod(_nb_softmax_bwd)
        causal_softmax_fwd = staticmethod(_nb_causal_softmax_fwd)
        causal_softmax_bwd = staticmethod(_nb_causal_softmax_bwd)
        log_softmax_fwd = staticmethod(_nb_log_softmax_fwd)
        log_softmax_bwd = staticmethod(_nb_log_softmax_bwd)
        layer_norm_fwd = staticmethod(_nb_layer_norm_fwd)
        layer_norm_bwd = staticmethod(_nb_layer_norm_bwd)
        gelu_fwd = staticmethod(_nb_gelu_fwd)
        gelu_bwd = staticmethod(_nb_gelu_bwd)
        adam_update = staticmethod(_nb_adam_update)


_BACKENDS = {"numpy": _NumpyKernels}
if _HAS_NUMBA:
    _BACKENDS["numba"] = _NumbaKernels

K = _BACKENDS["numba"] if _HAS_NUMBA and os.environ.get("PREFALIGN_NUMBA", "1") != "0" else _NumpyKernels


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for all subsequent ops."""
    global K
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}")
    K = _BACKENDS[name]


def get_backend() -> str:
    return K.name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)
