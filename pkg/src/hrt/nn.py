"""Parameter containers on top of the engine."""
from collections import OrderedDict
from contextlib import nullcontext

import numpy as np

from . import engine as E


class Module:
    def __init__(self):
        self._params = OrderedDict()
        self._children = OrderedDict()

    def add_param(self, name, value):
        p = E.Parameter(value, requires_grad=True, name=name)
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix="", _seen=None):
        """Parameters in declaration order; a shared module is listed once, under its first name."""
        seen = set() if _seen is None else _seen
        for name, p in self._params.items():
            if id(p) not in seen:
                seen.add(id(p))
                yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero=False, std=None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, std if std is not None else 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(d_out))

    def __call__(self, x):
        return E.add(E.matmul(x, self.w), self.b)

    def set_identity(self):
        if self.d_in != self.d_out:
            raise ValueError("identity needs a square map")
        self.w.data[...] = np.eye(self.d_in)
        self.b.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(d))
        self.bias = self.add_param("bias", np.zeros(d))

    def __call__(self, x):
        return E.layer_norm(x, self.gain, self.bias, self.eps)


def cost_scope(category, level=None):
    ledger = E.current_ledger()
    if ledger is None:
        return nullcontext()
    return ledger.scope(category, level)


def linear_params(d_in, d_out):
    return d_in * d_out + d_out
