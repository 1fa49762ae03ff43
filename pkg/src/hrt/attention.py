"""Per-level Resolution Transformer Blocks and the shared attention primitive."""
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .errors import DegenerateMaskError, DimensionError
from .nn import LayerNorm, Linear, Module, cost_scope

ROW_SUM_TOL = 1e-6
MASKED_WEIGHT_TOL = 1e-9


@dataclass
class AttentionRecord:
    level: int
    head: int
    weights: np.ndarray
    kind: str = "self"           # "self", "up" (bottom-up) or "down" (top-down)
    coarse_level: int = 0        # set for cross-resolution maps
    item: int = 0                # batch index


class _Recorder(threading.local):
    def __init__(self):
        self.records = None
        self.audit = None


_rec = _Recorder()


@contextmanager
def record_attention():
    """Collect an AttentionRecord for every attention map computed inside the block."""
    prev = _rec.records
    _rec.records = []
    try:
        yield _rec.records
    finally:
        _rec.records = prev


class AttentionAudit:
    """Counts attention rows checked and rows violating the stochasticity contract."""

    def __init__(self):
        self.rows_checked = 0
        self.violations = []
        self.seen = set()  # (kind, level) of every tagged map checked

    def check(self, weights, mask, tag):
        w = weights.reshape(-1, weights.shape[-1])
        if mask is None:
            valid = np.ones_like(w, dtype=bool)
        else:
            mk = np.asarray(mask, dtype=bool)
            mk = mk[None, :] if mk.ndim == 1 else mk
            valid = np.repeat(mk, w.shape[0] // mk.shape[0], axis=0)
        sums = np.where(valid, w, 0.0).sum(axis=1)
        bad_sum = np.abs(sums - 1.0) > ROW_SUM_TOL
        bad_mask = (np.where(valid, 0.0, w) >= MASKED_WEIGHT_TOL).any(axis=1)
        self.rows_checked += w.shape[0]
        if isinstance(tag, dict):
            self.seen.add((tag["kind"], tag["level"]))
        n_bad = int((bad_sum | bad_mask).sum())
        if n_bad:
            self.violations.append((tag, n_bad))


@contextmanager
def audit_attention(audit=None):
    audit = audit if audit is not None else AttentionAudit()
    prev = _rec.audit
    _rec.audit = audit
    try:
        yield audit
    finally:
        _rec.audit = prev


def set_global_audit(audit):
    """Install ``audit`` for the current thread outside any context manager (used by the test suite)."""
    _rec.audit = audit


def initial_slope(level, s0=1.0):
    """Initial locality slope for a 1-based level: s0 / 2**(level-1)."""
    return s0 / 2 ** (level - 1)


def scale_bias(q_len, k_len, slopes):
    """bias[h, i, j] = -slopes[h] * |i - j|; ``slopes`` is a DiffArray of shape (heads,)."""
    return E.distance_bias(slopes, q_len, k_len)


def scaled_attention(q, k, v, bias=None, mask=None, *, dropout=0.0, rng=None, training=False,
                     categories=("attn_scores", "normalization", "attn_mix"), record=None):
    """softmax(q k^T / sqrt(d_h) + bias) v over keys where ``mask`` is true.

    ``q``: (..., m, d_h); ``k``, ``v``: (..., k, d_h). ``mask`` is (k,) or
    (batch, k) with batch the leading axis. ``record`` is a dict of
    AttentionRecord fields (level, kind, coarse_level) used when recording.
    """
    d_h = q.shape[-1]
    if k.shape[-1] != d_h or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not (mask.any(axis=-1)).all():
            raise DegenerateMaskError("attention key mask has no valid entry")
    with cost_scope(categories[0]):
        scores = E.scale(E.matmul(q, E.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_h))
    if bias is not None:
        scores = E.add(scores, bias)
    with cost_scope(categories[1]):
        weights = E.softmax_rows(scores, mask)
    del scores
    if weights.data is not None:
        if _rec.audit is not None:
            _rec.audit.check(weights.data, mask, record)
        if _rec.records is not None and record is not None:
            w = weights.data
            w4 = w.reshape((-1,) + w.shape[-3:]) if w.ndim >= 3 else w.reshape(1, 1, *w.shape)
            for b in range(w4.shape[0]):
                for h in range(w4.shape[1]):
                    _rec.records.append(AttentionRecord(head=h, weights=w4[b, h].copy(), item=b, **record))
    weights = E.dropout(weights, dropout, rng, training)
    with cost_scope(categories[2]):
        return E.matmul(weights, v)


def split_heads(x, h):
    b, n, d = x.shape
    return E.transpose(E.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def merge_heads(x):
    b, h, n, dh = x.shape
    return E.reshape(E.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng, slope_init=None):
        super().__init__()
        self.heads = heads
        self.wq = self.add_child("wq", Linear(d, d, rng))
        self.wk = self.add_child("wk", Linear(d, d, rng))
        self.wv = self.add_child("wv", Linear(d, d, rng))
        self.wo = self.add_child("wo", Linear(d, d, rng, zero=True))
        self.slopes = None
        if slope_init is not None:
            self.slopes = self.add_param("slopes", np.full(heads, float(slope_init)))

    def __call__(self, x, mask, *, dropout=0.0, rng=None, training=False, level=1):
        n = x.shape[1]
        with cost_scope("projections"):
            q = split_heads(self.wq(x), self.heads)
            k = split_heads(self.wk(x), self.heads)
            v = split_heads(self.wv(x), self.heads)
        bias = scale_bias(n, n, self.slopes) if self.slopes is not None else None
        ctx = scaled_attention(q, k, v, bias, mask, dropout=dropout, rng=rng, training=training,
                               record={"level": level, "kind": "self"})
        with cost_scope("projections"):
            return self.wo(merge_heads(ctx))

    def clamp_slopes(self):
        if self.slopes is not None:
            np.maximum(self.slopes.data, 0.0, out=self.slopes.data)


class ResolutionBlock(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then + FFN(LN(.))."""

    def __init__(self, d, heads, rng, ffn_ratio=4, slope_init=None):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.attn = self.add_child("attn", MultiHeadAttention(d, heads, rng, slope_init))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.ff1 = self.add_child("ff1", Linear(d, ffn_ratio * d, rng))
        self.ff2 = self.add_child("ff2", Linear(ffn_ratio * d, d, rng, zero=True))

    def __call__(self, x, mask, *, dropout=0.0, rng=None, training=False, level=1):
        with cost_scope("normalization"):
            h = self.ln1(x)
        h = self.attn(h, mask, dropout=dropout, rng=rng, training=training, level=level)
        x = E.add(x, E.dropout(h, dropout, rng, training))
        with cost_scope("normalization"):
            h = self.ln2(x)
        with cost_scope("ffn"):
            h = self.ff2(E.gelu(self.ff1(h)))
        return E.add(x, E.dropout(h, dropout, rng, training))


def rtb_forward(x, block, mask, rng=None, training=False, dropout=0.0, level=1):
    return block(x, mask, dropout=dropout, rng=rng, training=training, level=level)


def rtb_param_count(d, heads, ffn_ratio=4, scale_bias=True):
    lin = lambda a, b: a * b + b  # noqa: E731
    return 4 * lin(d, d) + lin(d, ffn_ratio * d) + lin(ffn_ratio * d, d) + 4 * d + (heads if scale_bias else 0)
