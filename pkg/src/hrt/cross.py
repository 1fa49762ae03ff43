"""Cross-resolution exchange between adjacent pyramid levels.

Bottom-up: coarse queries attend over fine keys/values (composition).
Top-down: fine queries attend over coarse keys/values (contextualization).
Both updates are computed from the pre-exchange states and then merged into
each level with a sigmoid gate.
"""
import numpy as np

from . import engine as E
from .attention import merge_heads, scaled_attention, split_heads
from .errors import DimensionError
from .nn import Linear, Module, cost_scope

CROSS = ("cross_res", "cross_res", "cross_res")


class Gate(Module):
    """alpha = sigmoid(W [updated; original] + b) per position ("position"),
    per position and channel ("channel"), or one learned scalar ("global")."""

    def __init__(self, d, kind="position"):
        super().__init__()
        self.kind = kind
        if kind == "global":
            self.w = self.add_param("w", np.zeros(1))
        else:
            width = 1 if kind == "position" else d
            self.w = self.add_param("w", np.zeros((2 * d, width)))
            self.b = self.add_param("b", np.zeros(width))

    def alpha(self, original, updated):
        if self.kind == "global":
            return E.sigmoid(self.w)
        z = E.concat([updated, original], axis=-1)
        return E.sigmoid(E.add(E.matmul(z, self.w), self.b))


def gated_fuse(original, updated, gate):
    if original.shape != updated.shape:
        raise DimensionError(f"gated_fuse shapes differ: {original.shape} vs {updated.shape}")
    a = gate.alpha(original, updated)
    return E.add(original, E.mul(a, E.sub(updated, original)))


class _Path(Module):
    def __init__(self, d_query, d_kv, d_a, rng):
        super().__init__()
        self.q = self.add_child("q", Linear(d_query, d_a, rng))
        self.k = self.add_child("k", Linear(d_kv, d_a, rng))
        self.v = self.add_child("v", Linear(d_kv, d_a, rng))
        self.out = self.add_child("out", Linear(d_a, d_query, rng))


class CrossResolution(Module):
    def __init__(self, d_fine, d_coarse, rng, heads=1, gate="position"):
        super().__init__()
        self.d_a = min(d_fine, d_coarse)
        self.heads = heads
        self.up = self.add_child("up", _Path(d_coarse, d_fine, self.d_a, rng))
        self.down = self.add_child("down", _Path(d_fine, d_coarse, self.d_a, rng))
        self.gate_fine = self.add_child("gate_fine", Gate(d_fine, gate))
        self.gate_coarse = self.add_child("gate_coarse", Gate(d_coarse, gate))

    def _attend(self, path, queries, keys, key_mask, record):
        h = self.heads
        q = split_heads(path.q(queries), h)
        k = split_heads(path.k(keys), h)
        v = split_heads(path.v(keys), h)
        ctx = scaled_attention(q, k, v, None, key_mask, categories=CROSS, record=record)
        return path.out(merge_heads(ctx))


def bottom_up(fine, coarse, params, level=1):
    if coarse.length * 2 != fine.length:
        raise DimensionError(f"coarse length {coarse.length} is not half of fine length {fine.length}")
    return params._attend(params.up, coarse.repr, fine.repr, fine.mask,
                          {"level": level, "kind": "up", "coarse_level": level + 1})


def top_down(fine, coarse, params, level=1):
    if coarse.length * 2 != fine.length:
        raise DimensionError(f"coarse length {coarse.length} is not half of fine length {fine.length}")
    return params._attend(params.down, fine.repr, coarse.repr, coarse.mask,
                          {"level": level, "kind": "down", "coarse_level": level + 1})


def exchange(fine, coarse, params, enabled=True, level=1):
    """Return the new (fine, coarse) representations after one exchange."""
    if not enabled:
        return fine.repr, coarse.repr
    with cost_scope("cross_res", level):
        up = bottom_up(fine, coarse, params, level)
        down = top_down(fine, coarse, params, level)
        new_fine = gated_fuse(fine.repr, down, params.gate_fine)
        new_coarse = gated_fuse(coarse.repr, up, params.gate_coarse)
    return new_fine, new_coarse


def gate_param_count(d, kind):
    if kind == "global":
        return 1
    width = 1 if kind == "position" else d
    return 2 * d * width + width


def cross_param_count(d_fine, d_coarse, gate="position"):
    d_a = min(d_fine, d_coarse)
    lin = lambda a, b: a * b + b  # noqa: E731
    up = lin(d_coarse, d_a) + 2 * lin(d_fine, d_a) + lin(d_a, d_coarse)
    down = lin(d_fine, d_a) + 2 * lin(d_coarse, d_a) + lin(d_a, d_fine)
    return up + down + gate_param_count(d_fine, gate) + gate_param_count(d_coarse, gate)
