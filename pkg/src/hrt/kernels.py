"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``HRT_NUMBA`` is not set to
``0``. Both paths compute the same quantities; they may differ in the last
ulp because reduction order differs.
"""
import math
import os

import numpy as np
from scipy.special import erf as _erf

_WANT_JIT = os.environ.get("HRT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_JIT:
        raise ImportError("disabled by HRT_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _np_masked_softmax(x, keymask, rows_per_group):
    rows, cols = x.shape
    if keymask is None:
        m = x.max(axis=1, keepdims=True)
        e = np.exp(x - m)
        return e / e.sum(axis=1, keepdims=True)
    valid = np.repeat(keymask, rows_per_group, axis=0)
    z = np.where(valid, x, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_backward(y, g):
    return y * (g - (y * g).sum(axis=1, keepdims=True))


def _np_layernorm_forward(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _np_layernorm_backward(gxhat, xhat, rstd):
    d = xhat.shape[1]
    mean_g = gxhat.sum(axis=1, keepdims=True) / d
    mean_gx = (gxhat * xhat).sum(axis=1, keepdims=True) / d
    return (gxhat - mean_g - xhat * mean_gx) * rstd[:, None]


def _np_gelu(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def _np_gelu_grad(x):
    return 0.5 * (1.0 + _erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _np_haar_analysis(x):
    even = x[:, 0::2, :]
    odd = x[:, 1::2, :]
    return (even + odd) * _INV_SQRT2, (even - odd) * _INV_SQRT2


def _np_haar_synthesis(a, d):
    b, half, dim = a.shape
    out = np.empty((b, 2 * half, dim))
    out[:, 0::2, :] = (a + d) * _INV_SQRT2
    out[:, 1::2, :] = (a - d) * _INV_SQRT2
    return out


def _np_distance_bias(slopes, m, k):
    dist = np.abs(np.arange(m)[:, None] - np.arange(k)[None, :]).astype(np.float64)
    return -slopes[:, None, None] * dist[None, :, :]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_masked_softmax(x, keymask, rows_per_group):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            g = r // rows_per_group
            m = -np.inf
            for c in range(cols):
                if keymask[g, c] and x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                if keymask[g, c]:
                    e = math.exp(x[r, c] - m)
                    out[r, c] = e
                    s += e
                else:
                    out[r, c] = 0.0
            inv = 1.0 / s
            for c in range(cols):
                out[r, c] *= inv
        return out

    @njit(cache=True)
    def _nb_softmax(x):
        rows, cols = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for c in range(1, cols):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(cols):
                e = math.exp(x[r, c] - m)
                out[r, c] = e
                s += e
            inv = 1.0 / s
            for c in range(cols):
                out[r, c] *= inv
        return out

    @njit(cache=True)
    def _nb_softmax_backward(y, g):
        rows, cols = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot += y[r, c] * g[r, c]
            for c in range(cols):
                out[r, c] = y[r, c] * (g[r, c] - dot)
        return out

    @njit(cache=True)
    def _nb_layernorm_forward(x, eps):
        rows, d = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for c in range(d):
                mu += x[r, c]
            mu /= d
            var = 0.0
            for c in range(d):
                t = x[r, c] - mu
                var += t * t
            var /= d
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(d):
                xhat[r, c] = (x[r, c] - mu) * rs
        return xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_backward(gxhat, xhat, rstd):
        rows, d = xhat.shape
        out = np.empty_like(xhat)
        for r in range(rows):
            sg = 0.0
            sgx = 0.0
            for c in range(d):
                sg += gxhat[r, c]
                sgx += gxhat[r, c] * xhat[r, c]
            sg /= d
            sgx /= d
            for c in range(d):
                out[r, c] = (gxhat[r, c] - sg - xhat[r, c] * sgx) * rstd[r]
        return out

    @njit(cache=True)
    def _nb_gelu(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @njit(cache=True)
    def _nb_gelu_grad(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * (1.0 + math.erf(v * _INV_SQRT2)) + v * math.exp(-0.5 * v * v) * _INV_SQRT2PI
        return out

    @njit(cache=True)
    def _nb_haar_analysis(x):
        b, n, d = x.shape
        half = n // 2
        a = np.empty((b, half, d))
        det = np.empty((b, half, d))
        for i in range(b):
            for j in range(half):
                for c in range(d):
                    e = x[i, 2 * j, c]
                    o = x[i, 2 * j + 1, c]
                    a[i, j, c] = (e + o) * _INV_SQRT2
                    det[i, j, c] = (e - o) * _INV_SQRT2
        return a, det

    @njit(cache=True)
    def _nb_haar_synthesis(a, det):
        b, half, d = a.shape
        out = np.empty((b, 2 * half, d))
        for i in range(b):
            for j in range(half):
                for c in range(d):
                    out[i, 2 * j, c] = (a[i, j, c] + det[i, j, c]) * _INV_SQRT2
                    out[i, 2 * j + 1, c] = (a[i, j, c] - det[i, j, c]) * _INV_SQRT2
        return out

    @njit(cache=True)
    def _nb_distance_bias(slopes, m, k):
        h = slopes.shape[0]
        out = np.empty((h, m, k))
        for hh in range(h):
            s = slopes[hh]
            for i in range(m):
                for j in range(k):
                    out[hh, i, j] = -s * abs(i - j)
        return out


# ---------------------------------------------------------------------------
# public dispatch; all inputs float64, C-contiguous where 2-D is required
# ---------------------------------------------------------------------------

def masked_softmax(x, keymask=None, rows_per_group=1):
    """Row softmax of a 2-D array; ``keymask[g]`` applies to rows g*rpg .. (g+1)*rpg-1."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        if keymask is None:
            return _nb_softmax(x)
        return _nb_masked_softmax(x, np.ascontiguousarray(keymask, dtype=np.bool_), rows_per_group)
    return _np_masked_softmax(x, keymask, rows_per_group)


def softmax_backward(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_softmax_backward(y, g)
    return _np_softmax_backward(y, g)


def layernorm_forward(x, eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_layernorm_forward(x, eps)
    return _np_layernorm_forward(x, eps)


def layernorm_backward(gxhat, xhat, rstd):
    gxhat = np.ascontiguousarray(gxhat, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_layernorm_backward(gxhat, np.ascontiguousarray(xhat), rstd)
    return _np_layernorm_backward(gxhat, xhat, rstd)


def gelu(x):
    if HAS_NUMBA:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        return _nb_gelu(flat).reshape(x.shape)
    return _np_gelu(x)


def gelu_grad(x):
    if HAS_NUMBA:
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        return _nb_gelu_grad(flat).reshape(x.shape)
    return _np_gelu_grad(x)


def haar_analysis(x):
    """Split (batch, 2m, d) into orthonormal Haar approximation and detail, each (batch, m, d)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_haar_analysis(x)
    return _np_haar_analysis(x)


def haar_synthesis(a, d):
    a = np.ascontiguousarray(a, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_haar_synthesis(a, d)
    return _np_haar_synthesis(a, d)


def distance_bias(slopes, m, k):
    slopes = np.ascontiguousarray(slopes, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_distance_bias(slopes, m, k)
    return _np_distance_bias(slopes, m, k)


NUMPY_IMPLS = {
    "masked_softmax": _np_masked_softmax,
    "softmax_backward": _np_softmax_backward,
    "layernorm_forward": _np_layernorm_forward,
    "layernorm_backward": _np_layernorm_backward,
    "gelu": _np_gelu,
    "gelu_grad": _np_gelu_grad,
    "haar_analysis": _np_haar_analysis,
    "haar_synthesis": _np_haar_synthesis,
    "distance_bias": _np_distance_bias,
}

JIT_IMPLS = {}
if HAS_NUMBA:
    JIT_IMPLS = {
        "masked_softmax": _nb_masked_softmax,
        "softmax_backward": _nb_softmax_backward,
        "layernorm_forward": _nb_layernorm_forward,
        "layernorm_backward": _nb_layernorm_backward,
        "gelu": _nb_gelu,
        "gelu_grad": _nb_gelu_grad,
        "haar_analysis": _nb_haar_analysis,
        "haar_synthesis": _nb_haar_synthesis,
        "distance_bias": _nb_distance_bias,
    }
