"""The multi-resolution pyramid: length schedule, reduction, reconstruction."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .errors import CapacityError, DimensionError
from .nn import Linear, Module, cost_scope


def length_schedule(n_raw, levels, max_len=None):
    """Pad ``n_raw`` to a multiple of 2**(levels-1) and halve it per level.

    >>> length_schedule(100, 5)
    (112, [112, 56, 28, 14, 7])
    """
    if levels < 1 or n_raw < 1:
        raise ValueError(f"need levels >= 1 and n_raw >= 1, got {levels}, {n_raw}")
    unit = 2 ** (levels - 1)
    n = -(-n_raw // unit) * unit
    if max_len is not None and n > max_len:
        raise CapacityError(f"padded length {n} exceeds max_len {max_len}")
    return n, [n // 2 ** i for i in range(levels)]


@dataclass
class LevelState:
    repr: E.DiffArray            # (batch, length, dim)
    mask: np.ndarray             # (batch, length) bool, True = real token
    details: E.DiffArray = None  # (batch, length/2, dim) Haar details of this level

    @property
    def length(self):
        return self.repr.shape[1]

    @property
    def dim(self):
        return self.repr.shape[2]


@dataclass
class ResolutionPyramid:
    levels: list = field(default_factory=list)
    config: object = None

    def lengths(self):
        return [lv.length for lv in self.levels]

    def dims(self):
        return [lv.dim for lv in self.levels]

    def dump_csv(self, directory, item=0, prefix="pyramid"):
        """Write one headered CSV per level (position, valid, c0..c{d-1}); returns the file names."""
        names = []
        for i, lv in enumerate(self.levels, start=1):
            name = f"{prefix}_level{i}.csv"
            data = lv.repr.data[item]
            with open(f"{directory}/{name}", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["position", "valid"] + [f"c{c}" for c in range(data.shape[1])])
                for pos in range(data.shape[0]):
                    w.writerow([pos, int(lv.mask[item, pos])] + [repr(float(v)) for v in data[pos]])
            names.append(name)
        return names


def coarsen_mask(mask):
    """A coarse position is valid iff either child is."""
    b, n = mask.shape
    return mask.reshape(b, n // 2, 2).any(axis=2)


class Reducer(Module):
    """Halves sequence length and maps width d_in -> d_out."""

    def __init__(self, kind, d_in, d_out, rng):
        super().__init__()
        self.kind = kind
        fan = 2 * d_in if kind == "linear_strided" else d_in
        self.proj = self.add_child("proj", Linear(fan, d_out, rng))

    def __call__(self, level):
        """Return ``(coarse LevelState, details or None)``."""
        x = level.repr
        b, n, d = x.shape
        if n % 2 or n < 2:
            raise DimensionError(f"cannot reduce odd or unit length {n}")
        details = None
        if self.kind == "wavelet":
            approx, details = E.haar_split(x)
        elif self.kind == "avg_pool":
            approx, _ = E.haar_split(x)
            approx = E.scale(approx, 1.0 / math.sqrt(2.0))
        else:
            approx = E.reshape(x, (b, n // 2, 2 * d))
        coarse = self.proj(approx)
        return LevelState(coarse, coarsen_mask(level.mask)), details


def reduce(level, reducer):
    return reducer(level)


class Reconstructor(Module):
    """Learned cascade from the coarsest level back to full resolution.

    Each step maps width d_{l+1} -> d_l, upsamples with a Haar synthesis
    (children (a + D d)/sqrt2 and (a - D d)/sqrt2), where D is a learned map of
    the stored details; without details both children get a/sqrt2.
    """

    def __init__(self, dims, use_details, rng):
        super().__init__()
        self.up = []
        self.detail = []
        for i in range(len(dims) - 1):
            self.up.append(self.add_child(f"up{i}", Linear(dims[i + 1], dims[i], rng)))
            if use_details:
                self.detail.append(self.add_child(f"detail{i}", Linear(dims[i], dims[i], rng)))

    def __call__(self, pyramid, top=None):
        levels = pyramid.levels
        y = top if top is not None else levels[-1].repr
        for i in range(len(levels) - 2, -1, -1):
            with cost_scope("reconstruction", i + 1):
                a = self.up[i](y)
                det = levels[i].details
                d = self.detail[i](det) if (self.detail and det is not None) else None
                y = E.haar_merge(a, d)
        return y


def reconstruct(pyramid, reconstructor):
    return reconstructor(pyramid)


def reconstruction_loss(reconstructed, original, mask):
    """Squared error over valid positions, rescaled to the full n*d sum and averaged over the batch.

    With every position valid this is the plain sum of squared differences per item.
    """
    if reconstructed.shape != original.shape:
        raise DimensionError(f"reconstruction {reconstructed.shape} vs original {original.shape}")
    b, n, _ = original.shape
    mask = np.asarray(mask, dtype=bool)
    n_valid = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    w = mask * (n / n_valid) / b
    diff = E.sub(original, reconstructed)
    return E.sum(E.mul(E.square(diff), w[:, :, None]))
