"""FLOP and live-memory accounting shared by the engine and the benchmarks.

Counting conventions (one source of truth for both the instrumented run and
the closed-form cost model in :mod:`hrt.bench`):

* matmul of (..., m, k) by (..., k, p): ``2 * batch * m * k * p``
* softmax, layer norm, log-softmax: 5 FLOPs per element
* elementwise ops, reshapes, gathers and Haar butterflies are free

Live floats count the float64 buffers owned by engine arrays plus any
intermediates an op saves for its backward pass. Views count zero.
"""
import time
from collections import defaultdict
from contextlib import contextmanager

CATEGORIES = (
    "attn_scores",
    "attn_mix",
    "projections",
    "ffn",
    "normalization",
    "reduction",
    "cross_res",
    "reconstruction",
    "head",
    "other",
)


class CostLedger:
    def __init__(self):
        self.flops = defaultdict(int)
        self.live_floats = 0
        self.peak_live_floats = 0
        self.wall_time = defaultdict(float)
        self._scope = [("other", 0)]

    # -- FLOPs ---------------------------------------------------------------
    def add_flops(self, n, category=None):
        cat, level = self._scope[-1]
        self.flops[(category or cat, level)] += int(n)

    @contextmanager
    def scope(self, category, level=None):
        if category not in CATEGORIES:
            raise ValueError(f"unknown cost category {category!r}")
        if level is None:
            level = self._scope[-1][1]
        self._scope.append((category, level))
        try:
            yield self
        finally:
            self._scope.pop()

    @contextmanager
    def at_level(self, level):
        self._scope.append((self._scope[-1][0], level))
        try:
            yield self
        finally:
            self._scope.pop()

    def total(self, category=None, level=None):
        return sum(
            v for (c, l), v in self.flops.items()
            if (category is None or c == category) and (level is None or l == level)
        )

    def by_category(self):
        out = {c: 0 for c in CATEGORIES}
        for (c, _), v in self.flops.items():
            out[c] += v
        return out

    # -- memory --------------------------------------------------------------
    def alloc(self, n):
        self.live_floats += n
        if self.live_floats > self.peak_live_floats:
            self.peak_live_floats = self.live_floats

    def free(self, n):
        self.live_floats -= n

    def reset_peak(self):
        self.peak_live_floats = self.live_floats

    # -- time ----------------------------------------------------------------
    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield self
        finally:
            self.wall_time[name] += time.perf_counter() - t0

    def summary(self):
        return {
            "flops_total": self.total(),
            "flops": self.by_category(),
            "peak_live_floats": self.peak_live_floats,
        }
