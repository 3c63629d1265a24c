"""Row-wise numeric kernels behind the autodiff ops.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. ``SMAE_NUMBA`` picks the backend:

* ``0`` - numpy everywhere;
* ``1`` - numba everywhere;
* ``auto`` (default) - numba for the fused reductions (layer norm, softmax
  backward, scatter-add) and numpy for the transcendental kernels, where
  numpy's SIMD ``exp``/``tanh`` beat scalar libm calls from numba.

Falls back to numpy when numba cannot be imported. All kernels take
C-contiguous 2-D arrays whose rows are independent.
"""

from __future__ import annotations

import math
import os

import numpy as np

# tanh form of GELU: 0.5 x (1 + tanh(c (x + a x^3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

KERNELS = (
    "layernorm_fwd", "layernorm_bwd", "softmax_fwd", "softmax_bwd",
    "gelu_fwd", "gelu_bwd", "scatter_add_rows",
)
_AUTO_NUMBA = frozenset({"layernorm_fwd", "layernorm_bwd", "softmax_bwd", "scatter_add_rows"})


def _mode() -> str:
    flag = os.environ.get("SMAE_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "no", "off", "numpy"):
        return "numpy"
    if flag in ("1", "true", "yes", "on", "numba"):
        return "numba"
    return "auto"


# --------------------------------------------------------------------------
# numpy reference path


def np_layernorm_fwd(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].astype(x.dtype)


def np_layernorm_bwd(g, xhat, rstd):
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return (g - gm - xhat * gxm) * rstd[:, None]


def np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_gelu_fwd(x):
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    t = np.tanh(c * (x + a * x * x * x))
    return 0.5 * x * (1.0 + t)


def np_gelu_bwd(x, g):
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(_GELU_A)
    x2 = x * x
    t = np.tanh(c * x * (1.0 + a * x2))
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x2))


def np_scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)
    return out


# --------------------------------------------------------------------------
# numba path

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_layernorm_fwd(x, eps):
        n, d = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            m = 0.0
            for j in range(d):
                m += x[i, j]
            m /= d
            v = 0.0
            for j in range(d):
                t = x[i, j] - m
                v += t * t
            v /= d
            r = 1.0 / math.sqrt(v + eps)
            rstd[i] = r
            for j in range(d):
                xhat[i, j] = (x[i, j] - m) * r
        return xhat, rstd

    @njit(cache=True)
    def nb_layernorm_bwd(g, xhat, rstd):
        n, d = g.shape
        out = np.empty_like(g)
        for i in range(n):
            gm = 0.0
            gxm = 0.0
            for j in range(d):
                gm += g[i, j]
                gxm += g[i, j] * xhat[i, j]
            gm /= d
            gxm /= d
            r = rstd[i]
            for j in range(d):
                out[i, j] = (g[i, j] - gm - xhat[i, j] * gxm) * r
        return out

    @njit(cache=True)
    def nb_softmax_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def nb_softmax_bwd(y, g):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def nb_gelu_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + _GELU_A * v * v * v)))
        return out

    @njit(cache=True)
    def nb_gelu_bwd(x, g):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = math.tanh(_GELU_C * (v + _GELU_A * v * v * v))
                dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
                out[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * dt)
        return out

    @njit(cache=True)
    def nb_scatter_add_rows(out, idx, src):
        d = out.shape[1]
        for k in range(idx.shape[0]):
            r = idx[k]
            for j in range(d):
                out[r, j] += src[k, j]
        return out


def _select(mode: str) -> dict[str, str]:
    """Backend name ("numba" or "numpy") per kernel for a given mode."""
    if not HAVE_NUMBA or mode == "numpy":
        return {k: "numpy" for k in KERNELS}
    if mode == "numba":
        return {k: "numba" for k in KERNELS}
    return {k: ("numba" if k in _AUTO_NUMBA else "numpy") for k in KERNELS}


def implementation(name: str, backend: str):
    return globals()[("nb_" if backend == "numba" else "np_") + name]


MODE = _mode()
BACKENDS = _select(MODE)
USING_NUMBA = any(b == "numba" for b in BACKENDS.values())

layernorm_fwd = implementation("layernorm_fwd", BACKENDS["layernorm_fwd"])
layernorm_bwd = implementation("layernorm_bwd", BACKENDS["layernorm_bwd"])
softmax_fwd = implementation("softmax_fwd", BACKENDS["softmax_fwd"])
softmax_bwd = implementation("softmax_bwd", BACKENDS["softmax_bwd"])
gelu_fwd = implementation("gelu_fwd", BACKENDS["gelu_fwd"])
gelu_bwd = implementation("gelu_bwd", BACKENDS["gelu_bwd"])
scatter_add_rows = implementation("scatter_add_rows", BACKENDS["scatter_add_rows"])
