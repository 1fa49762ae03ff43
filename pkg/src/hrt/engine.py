"""Dense float64 arrays with reverse-mode automatic differentiation.

Every op is a module-level function returning a new :class:`DiffArray`; inputs
are never mutated. When a :class:`~hrt.ledger.CostLedger` is attached through
:func:`instrument`, ops report FLOPs (and optionally live buffer sizes) to it.

Inside :func:`meta_mode` ops skip the arithmetic and only propagate shapes,
graph structure, FLOPs and buffer accounting. This lets the cost model be
measured at sequence lengths whose activations would not fit in memory.
"""
import builtins
import threading
import weakref
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateMaskError, DimensionError


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.ledger = None
        self.track_memory = False
        self.meta = False


_state = _State()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def instrument(ledger, track_memory=True):
    """Attach ``ledger`` to every op executed in this thread inside the block."""
    prev = (_state.ledger, _state.track_memory)
    _state.ledger, _state.track_memory = ledger, track_memory
    try:
        yield ledger
    finally:
        _state.ledger, _state.track_memory = prev


@contextmanager
def meta_mode():
    prev = _state.meta
    _state.meta = True
    try:
        yield
    finally:
        _state.meta = prev


def current_ledger():
    return _state.ledger


def _flops(n):
    if _state.ledger is not None and n:
        _state.ledger.add_flops(n)


class DiffArray:
    """A float64 array that can take part in a gradient graph.

    ``data`` is ``None`` only for arrays produced in meta mode.
    """

    __slots__ = ("data", "shape", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self._init(arr, arr.shape, requires_grad, name)
        _track(self, arr.size)

    def _init(self, data, shape, requires_grad, name=None):
        self.data = data
        self.shape = tuple(shape)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, data, shape, requires_grad, count):
        out = cls.__new__(cls)
        out._init(data, shape, requires_grad)
        _track(out, count)
        return out

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def node_id(self):
        return id(self)

    @property
    def is_meta(self):
        return self.data is None

    def numpy(self):
        return self.data

    def item(self):
        return float(np.asarray(self.data).reshape(()))

    def backward(self, grad=None):
        backward(self, grad)

    def detach(self):
        return DiffArray(self.data)

    def __repr__(self):
        tag = "meta" if self.data is None else "data"
        return f"DiffArray(shape={self.shape}, {tag}, requires_grad={self.requires_grad})"

    # sugar used by the model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


Parameter = DiffArray


def _track(arr, count):
    ledger = _state.ledger
    if ledger is not None and _state.track_memory and count:
        ledger.alloc(count)
        weakref.finalize(arr, ledger.free, count)


def _as(x):
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


def _needs_graph(parents):
    return _state.grad_enabled and any(p.requires_grad for p in parents)


def _meta_backward(g):
    raise RuntimeError("backward through a meta-mode graph is not supported")


def _make(data, shape, parents, backward, saved=0, view=False):
    """Create an op result; ``saved`` counts extra floats kept for backward."""
    needs = _needs_graph(parents)
    count = (0 if view else int(np.prod(shape, dtype=np.int64))) + (saved if needs else 0)
    out = DiffArray._wrap(data, shape, needs, count)
    if needs:
        out._parents = parents
        out._backward = backward if data is not None else _meta_backward
    return out


def _meta(parents):
    return _state.meta or any(p.data is None for p in parents)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss, grad=None):
    """Reverse-mode sweep from ``loss``; accumulates ``.grad`` on leaves.

    Interior graph links are released as the sweep passes them.
    """
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad")
    order = []
    seen = set()
    stack = [(loss, False)]
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
    grads = {id(loss): np.ones(loss.shape) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        node._parents = ()
        node._backward = None
        node.requires_grad = False


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as(a), _as(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k, p = a.shape[-2], a.shape[-1], b.shape[-1]
    shape = tuple(batch) + (m, p)
    _flops(2 * int(np.prod(batch, dtype=np.int64)) * m * k * p)
    if _meta((a, b)):
        return _make(None, shape, (a, b), None)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), shape, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary(a, b, fwd, bw_a, bw_b):
    a, b = _as(a), _as(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    if _meta((a, b)):
        return _make(None, shape, (a, b), None)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(bw_a(g, ad, bd), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bw_b(g, ad, bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(fwd(ad, bd), shape, (a, b), bw)


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(a, fwd, grad_fn, saved=0):
    """``grad_fn(g, x, y)`` maps the output gradient to the input gradient."""
    a = _as(a)
    if _meta((a,)):
        return _make(None, a.shape, (a,), None, saved=saved)
    x = a.data
    y = fwd(x)
    return _make(y, a.shape, (a,), lambda g: (grad_fn(g, x, y),), saved=saved)


def scale(a, c):
    c = float(c)
    return _unary(a, lambda x: x * c, lambda g, x, y: g * c)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, y: g * (x > 0))


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    return _unary(a, kernels.gelu, lambda g, x, y: g * kernels.gelu_grad(x))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda g, x, y: g * y * (1.0 - y))


def square(a):
    return _unary(a, lambda x: x * x, lambda g, x, y: 2.0 * g * x)


def pointwise(a, kind, other=None):
    """Dispatch by name: relu, gelu, sigmoid, add, mul, scale."""
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "add":
        return add(a, other)
    if kind == "mul":
        return mul(a, other)
    if kind == "scale":
        return scale(a, other)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def dropout(a, p, rng, training):
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    a = _as(a)
    if _meta((a,)):
        return _make(None, a.shape, (a,), None, saved=a.size)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, a.shape, (a,), lambda g: (g * keep,), saved=keep.size)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax_rows(a, keymask=None):
    """Softmax over the last axis, stabilized by the row max.

    ``keymask`` (bool) excludes keys: either shape ``(k,)`` for all rows, or
    ``(a.shape[0], k)`` applied to every row under that leading index.
    Excluded entries come out exactly zero.
    """
    a = _as(a)
    k = a.shape[-1]
    rows = a.size // k
    if keymask is not None:
        keymask = np.asarray(keymask, dtype=bool)
        if keymask.ndim == 1:
            keymask = keymask[None, :]
        if keymask.shape[-1] != k or rows % keymask.shape[0]:
            raise DimensionError(f"keymask {keymask.shape} does not fit scores {a.shape}")
        if not keymask.any(axis=1).all():
            raise DegenerateMaskError("every key is masked for at least one query group")
        rpg = rows // keymask.shape[0]
    _flops(5 * a.size)
    if _meta((a,)):
        return _make(None, a.shape, (a,), None)
    x2 = a.data.reshape(rows, k)
    y2 = kernels.masked_softmax(x2, keymask, rpg) if keymask is not None else kernels.masked_softmax(x2)
    y = y2.reshape(a.shape)

    def bw(g):
        return (kernels.softmax_backward(y2, g.reshape(rows, k)).reshape(a.shape),)

    return _make(y, a.shape, (a,), bw)


def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = _as(a), _as(gain), _as(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} does not match width {d}")
    rows = a.size // d
    _flops(5 * a.size)
    saved = a.size + rows
    if _meta((a, gain, bias)):
        return _make(None, a.shape, (a, gain, bias), None, saved=saved)
    xhat, rstd = kernels.layernorm_forward(a.data.reshape(rows, d), eps)
    gd = gain.data
    out = (xhat * gd + bias.data).reshape(a.shape)

    def bw(g):
        g2 = g.reshape(rows, d)
        gx = kernels.layernorm_backward(g2 * gd, xhat, rstd).reshape(a.shape) if a.requires_grad else None
        gg = (g2 * xhat).sum(axis=0) if gain.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _make(out, a.shape, (a, gain, bias), bw, saved=saved)


def log_softmax(a):
    a = _as(a)
    _flops(5 * a.size)
    if _meta((a,)):
        return _make(None, a.shape, (a,), None)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, a.shape, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    if _meta((a,)):
        return _make(None, shape, (a,), None, view=True)
    src = a.shape
    return _make(a.data.reshape(shape), shape, (a,), lambda g: (g.reshape(src),), view=True)


def transpose(a, axes):
    a = _as(a)
    axes = tuple(axes)
    shape = tuple(a.shape[i] for i in axes)
    inv = tuple(np.argsort(axes))
    if _meta((a,)):
        return _make(None, shape, (a,), None, view=True)
    return _make(a.data.transpose(axes), shape, (a,), lambda g: (g.transpose(inv),), view=True)


def swapaxes(a, i, j):
    axes = list(range(_as(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(arrays, axis=-1):
    arrays = [_as(x) for x in arrays]
    nd = arrays[0].ndim
    ax = axis % nd
    shape = list(arrays[0].shape)
    shape[ax] = builtins.sum(x.shape[ax] for x in arrays)
    shape = tuple(shape)
    parents = tuple(arrays)
    if _meta(parents):
        return _make(None, shape, parents, None)
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([x.data for x in arrays], axis=ax), shape, parents, bw)


def take_rows(table, ids):
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    table = _as(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = ids.shape + (table.shape[1],)
    if _meta((table,)):
        return _make(None, shape, (table,), None)

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], shape, (table,), bw)


def slice_rows(a, start, stop):
    """``a[..., start:stop, :]`` along the second-to-last axis."""
    a = _as(a)
    shape = a.shape[:-2] + (stop - start, a.shape[-1])
    if _meta((a,)):
        return _make(None, shape, (a,), None, view=True)
    src = a.shape

    def bw(g):
        out = np.zeros(src)
        out[..., start:stop, :] = g
        return (out,)

    return _make(a.data[..., start:stop, :], shape, (a,), bw, view=True)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = _as(a)
    if axis is None:
        shape = () if not keepdims else (1,) * a.ndim
        axes = tuple(range(a.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(x % a.ndim for x in axes)
        shape = tuple(
            (1 if keepdims else None) if i in axes else s for i, s in enumerate(a.shape)
        )
        shape = tuple(s for s in shape if s is not None)
    if _meta((a,)):
        return _make(None, shape, (a,), None)
    src = a.shape

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), shape, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[x] for x in axes]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Haar butterflies and attention bias
# ---------------------------------------------------------------------------

def haar_split(x):
    """Orthonormal Haar analysis along axis 1 of (batch, 2m, d).

    Returns ``(approx, detail)`` with approx_i = (x_2i + x_2i+1)/sqrt2 and
    detail_i = (x_2i - x_2i+1)/sqrt2.
    """
    x = _as(x)
    if x.ndim != 3 or x.shape[1] % 2:
        raise DimensionError(f"haar_split needs (batch, even length, dim), got {x.shape}")
    shape = (x.shape[0], x.shape[1] // 2, x.shape[2])
    if _meta((x,)):
        return _make(None, shape, (x,), None), _make(None, shape, (x,), None)
    a, d = kernels.haar_analysis(x.data)
    zeros = np.zeros(shape)
    approx = _make(a, shape, (x,), lambda g: (kernels.haar_synthesis(g, zeros),))
    detail = _make(d, shape, (x,), lambda g: (kernels.haar_synthesis(zeros, g),))
    return approx, detail


def haar_merge(approx, detail=None):
    """Inverse of :func:`haar_split`; a missing detail means pure upsampling by 1/sqrt2 copies."""
    approx = _as(approx)
    b, m, d = approx.shape
    shape = (b, 2 * m, d)
    parents = (approx,) if detail is None else (approx, _as(detail))
    if detail is not None and parents[1].shape != approx.shape:
        raise DimensionError(f"haar_merge shapes differ: {approx.shape} vs {parents[1].shape}")
    if _meta(parents):
        return _make(None, shape, parents, None)
    dd = np.zeros(approx.shape) if detail is None else parents[1].data
    out = kernels.haar_synthesis(approx.data, dd)

    def bw(g):
        ga, gd = kernels.haar_analysis(g)
        return (ga,) if detail is None else (ga, gd)

    return _make(out, shape, parents, bw)


def distance_bias(slopes, m, k):
    """Per-head locality bias, bias[h, i, j] = -slopes[h] * |i - j|."""
    slopes = _as(slopes)
    h = slopes.shape[0]
    shape = (h, m, k)
    if _meta((slopes,)):
        return _make(None, shape, (slopes,), None)
    out = kernels.distance_bias(slopes.data, m, k)
    dist = np.abs(np.arange(m)[:, None] - np.arange(k)[None, :]).astype(np.float64)

    def bw(g):
        return (-(g * dist).sum(axis=(1, 2)),)

    return _make(out, shape, (slopes,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    logits = _as(logits)
    targets = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy mask selects no positions")
    np.put_along_axis(onehot, np.clip(targets, 0, c - 1)[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    return scale(sum(mul(lp, onehot)), -1.0 / count)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def grad_check(f, x, eps=1e-3, samples=None, rng=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is a DiffArray or a list of them; ``f(x)`` must return a scalar
    DiffArray. ``samples`` limits the number of coordinates probed per array.
    Relative error uses the denominator max(|g|, |g_fd|, 1e-8).

    The difference is the fourth-order central stencil at +-eps, +-2 eps. Its
    O(eps^4) truncation lets eps stay large, which keeps the round-off term
    (about ulp(f) / eps) small when the loss is large.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                idx = rng.choice(flat.size, size=samples, replace=False)
            for i in idx:
                orig = flat[i]
                vals = []
                for k in (-2, -1, 1, 2):
                    flat[i] = orig + k * eps
                    vals.append(f(x).item())
                flat[i] = orig
                # differences first, so equal values give exactly zero
                g_fd = ((vals[0] - vals[3]) + 8.0 * (vals[2] - vals[1])) / (12.0 * eps)
                g_an = ga.reshape(-1)[i]
                denom = max(abs(g_an), abs(g_fd), 1e-8)
                worst = max(worst, abs(g_an - g_fd) / denom)
    return worst


def finite(x):
    return x.data is None or bool(np.isfinite(x.data).all())


__all__ = [
    "DiffArray", "Parameter", "no_grad", "instrument", "meta_mode", "backward",
    "matmul", "add", "sub", "mul", "scale", "relu", "gelu", "sigmoid", "square",
    "pointwise", "dropout", "softmax_rows", "layer_norm", "log_softmax", "reshape",
    "transpose", "swapaxes", "concat", "take_rows", "slice_rows", "sum", "mean",
    "haar_split", "haar_merge", "distance_bias", "cross_entropy", "grad_check",
]
