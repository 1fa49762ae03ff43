"""End-to-end hierarchical resolution model, flat baseline and checkpoints."""
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .attention import ResolutionBlock, initial_slope, rtb_param_count
from .config import HrtConfig, canonical_json
from .cross import CrossResolution, cross_param_count, exchange
from .errors import CapacityError, ConfigError, InputError
from .nn import LayerNorm, Linear, Module, cost_scope, linear_params
from .pyramid import LevelState, Reconstructor, Reducer, ResolutionPyramid, length_schedule, reconstruction_loss

MAGIC = b"HRT1"


def sinusoidal_positions(max_len, d):
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def component_rng(seed, name):
    """Independent init stream per component, so toggling one part leaves the others' weights unchanged."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class BlockStack(Module):
    def __init__(self, d, n_blocks, heads, rng, ffn_ratio, slope_init):
        super().__init__()
        self.blocks = [
            self.add_child(str(i), ResolutionBlock(d, heads, rng, ffn_ratio, slope_init))
            for i in range(n_blocks)
        ]

    def __call__(self, x, mask, **kw):
        for b in self.blocks:
            x = b(x, mask, **kw)
        return x


@dataclass
class ForwardOutput:
    logits: E.DiffArray
    pyramid: ResolutionPyramid
    recon_loss: E.DiffArray
    fine: E.DiffArray


class HrtModel(Module):
    def __init__(self, config: HrtConfig):
        super().__init__()
        self.config = cfg = config
        dims, L = cfg.dims, cfg.levels
        self.embed = self.add_param("embed", component_rng(cfg.seed, "embed").normal(0.0, 1.0, (cfg.vocab_size, dims[0])))
        self.positions = sinusoidal_positions(cfg.max_len, dims[0])

        self.stacks = []
        by_dim = {}
        for i, d in enumerate(dims):
            if cfg.shared_scale_modules and d in by_dim:
                stack = by_dim[d]
            else:
                slope = initial_slope(i + 1, cfg.bias_slope_init) if cfg.scale_bias else None
                stack = BlockStack(d, cfg.blocks_at(i), cfg.heads, component_rng(cfg.seed, f"level{i}"),
                                   cfg.ffn_ratio, slope)
                by_dim[d] = stack
            self.stacks.append(self.add_child(f"level{i}", stack))

        self.reducers = [
            self.add_child(f"reduce{i}", Reducer(cfg.reduction, dims[i], dims[i + 1], component_rng(cfg.seed, f"reduce{i}")))
            for i in range(L - 1)
        ]

        self.cross = []
        if cfg.cross_resolution:
            by_pair = {}
            for i in range(L - 1):
                pair = (dims[i], dims[i + 1])
                if cfg.shared_scale_modules and pair in by_pair:
                    cr = by_pair[pair]
                else:
                    cr = CrossResolution(dims[i], dims[i + 1], component_rng(cfg.seed, f"cross{i}"),
                                         cfg.cross_heads, cfg.gate)
                    by_pair[pair] = cr
                self.cross.append(self.add_child(f"cross{i}", cr))

        self.recon = self.add_child("recon", Reconstructor(dims, cfg.reduction == "wavelet", component_rng(cfg.seed, "recon")))

        self.final_ln = self.out = None
        hrng = component_rng(cfg.seed, "head")
        if cfg.head == "token":
            self.final_ln = self.add_child("final_ln", LayerNorm(dims[0]))
            self.out = self.add_child("out", Linear(dims[0], cfg.vocab_size, hrng))
        elif cfg.head == "pooled":
            self.final_ln = self.add_child("final_ln", LayerNorm(cfg.d_out))
            self.out = self.add_child("out", Linear(cfg.d_out, cfg.num_classes, hrng))

        self.dropout_rng = component_rng(cfg.seed, "dropout")
        self.exchange_enabled = cfg.cross_resolution

    # ------------------------------------------------------------------
    def prepare(self, tokens):
        """Validate and pad a (batch, n_raw) token matrix; returns (tokens, mask, n_raw)."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise InputError(f"tokens must be a non-empty (batch, length) matrix, got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("token ids must be integers")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise InputError(f"token id out of range [0, {cfg.vocab_size})")
        n_raw = tokens.shape[1]
        if n_raw > cfg.max_len:
            raise CapacityError(f"sequence length {n_raw} exceeds max_len {cfg.max_len}")
        n, _ = length_schedule(n_raw, cfg.levels, cfg.max_len)
        if n > n_raw:
            tokens = np.concatenate([tokens, np.full((tokens.shape[0], n - n_raw), cfg.pad_id)], axis=1)
        mask = tokens != cfg.pad_id
        if not mask.any(axis=1).all():
            raise InputError("a sequence consists only of padding")
        return tokens.astype(np.int64), mask, n_raw

    def forward(self, tokens, training=False, rng=None):
        cfg = self.config
        tokens, mask, n_raw = self.prepare(tokens)
        n = tokens.shape[1]
        rng = rng if rng is not None else self.dropout_rng
        p = cfg.dropout if training else 0.0
        kw = dict(dropout=p, rng=rng, training=training)

        x = E.add(E.take_rows(self.embed, tokens), self.positions[:n])
        levels = [LevelState(x, mask)]
        for i in range(cfg.levels):
            lv = levels[i]
            with cost_scope("other", i + 1):
                lv.repr = self.stacks[i](lv.repr, lv.mask, level=i + 1, **kw)
                if i == cfg.levels - 1:
                    break
                with cost_scope("reduction"):
                    coarse, lv.details = self.reducers[i](lv)
                if self.exchange_enabled and self.cross:
                    lv.repr, coarse.repr = exchange(lv, coarse, self.cross[i], True, level=i + 1)
            levels.append(coarse)
        pyramid = ResolutionPyramid(levels, cfg)

        if cfg.levels > 1:
            fine = self.recon(pyramid)
            recon_loss = reconstruction_loss(fine, levels[0].repr, levels[0].mask)
        else:
            fine = levels[0].repr
            recon_loss = E.DiffArray(0.0)

        logits = None
        with cost_scope("head", 0):
            if cfg.head == "token":
                h = fine if n == n_raw else E.slice_rows(fine, 0, n_raw)
                logits = self.out(self.final_ln(h))
            elif cfg.head == "pooled":
                logits = self.out(self.final_ln(self.readout(pyramid)))
        return ForwardOutput(logits, pyramid, recon_loss, fine)

    __call__ = forward

    def readout(self, pyramid):
        def pool(lv):
            w = lv.mask / lv.mask.sum(axis=1, keepdims=True)
            return E.sum(E.mul(lv.repr, w[:, :, None]), axis=1)

        if self.config.readout == "coarsest":
            return pool(pyramid.levels[-1])
        return E.concat([pool(lv) for lv in pyramid.levels], axis=-1)

    def clamp_slopes(self):
        for stack in self.stacks:
            for b in stack.blocks:
                b.attn.clamp_slopes()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def flat_baseline_forward(tokens, flat_model, training=False):
    """Forward pass of a single-resolution model; returns its logits."""
    if flat_model.config.levels != 1:
        raise ConfigError("flat baseline must have exactly one level")
    return flat_model.forward(tokens, training).logits


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def param_count(cfg: HrtConfig):
    """Exact learned-scalar count (the sinusoidal position table is not learned).

    embed V*d1 + per distinct block stack B*(12d^2 + 13d + heads) [FFN ratio 4]
    + reducers + cross-resolution + reconstruction + head.
    """
    dims, L = cfg.dims, cfg.levels
    total = cfg.vocab_size * dims[0]
    stacks = range(L)
    if cfg.shared_scale_modules:
        stacks = [dims.index(d) for d in sorted(set(dims))]
    total += sum(cfg.blocks_at(i) * rtb_param_count(dims[i], cfg.heads, cfg.ffn_ratio, cfg.scale_bias) for i in stacks)
    for i in range(L - 1):
        fan = 2 * dims[i] if cfg.reduction == "linear_strided" else dims[i]
        total += linear_params(fan, dims[i + 1])
    if cfg.cross_resolution:
        pairs = [(dims[i], dims[i + 1]) for i in range(L - 1)]
        if cfg.shared_scale_modules:
            pairs = sorted(set(pairs))
        total += sum(cross_param_count(a, b, cfg.gate) for a, b in pairs)
    for i in range(L - 1):
        total += linear_params(dims[i + 1], dims[i])
        if cfg.reduction == "wavelet":
            total += linear_params(dims[i], dims[i])
    if cfg.head == "token":
        total += 2 * dims[0] + linear_params(dims[0], cfg.vocab_size)
    elif cfg.head == "pooled":
        total += 2 * cfg.d_out + linear_params(cfg.d_out, cfg.num_classes)
    return total


def flat_config(cfg: HrtConfig, width, depth):
    return cfg.replace(levels=1, dims=[width], blocks_per_level=depth, level_blocks=None, cross_resolution=False,
                       shared_scale_modules=False, scale_bias=False, readout="coarsest")


def match_flat_config(cfg: HrtConfig, width=None, tolerance=0.10):
    """Param-matched single-resolution baseline.

    Width starts at ``width`` (default: the widest HRT level); depth is the
    best match for that width. If no depth lands within ``tolerance`` the
    nearest width (multiple of ``heads``) that does is used instead. Returns
    ``(flat_config, ratio)`` with ratio = flat params / HRT params.
    """
    target = param_count(cfg)
    start = width or cfg.dims[-1]

    def best_at(w):
        base = param_count(flat_config(cfg, w, 0))
        per = rtb_param_count(w, cfg.heads, cfg.ffn_ratio, False)
        depth = max(1, int(round((target - base) / per)))
        fc = flat_config(cfg, w, depth)
        return fc, param_count(fc) / target

    h = cfg.heads
    candidates = sorted(range(h, 4 * start + 1, h), key=lambda w: (abs(w - start), -w))
    best = None
    for w in candidates:
        fc, ratio = best_at(w)
        if abs(ratio - 1.0) <= tolerance:
            return fc, ratio
        if best is None or abs(ratio - 1.0) < abs(best[1] - 1.0):
            best = (fc, ratio)
    raise ConfigError(f"no flat baseline matches {target} params within {tolerance:.0%} (best ratio {best[1]:.3f})")


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic "HRT1" | u64 json_len | canonical config JSON (utf-8) | u64 n_params |
# per parameter: u32 name_len | name (utf-8) | u32 ndim | ndim x u64 extent |
# prod(extent) x f64, all little-endian, parameters in declaration order.

def save_checkpoint(path, model):
    blob = canonical_json(model.config.to_dict()).encode()
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(params)))
        for name, p in params:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(config_dict, [(name, array), ...])``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not an HRT1 checkpoint")
    off = 4
    (jl,) = struct.unpack_from("<Q", raw, off)
    off += 8
    config = json.loads(raw[off:off + jl].decode())
    off += jl
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    params = []
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{nd}Q", raw, off)
        off += 8 * nd
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        params.append((name, arr))
    return config, params


def load_checkpoint(path, expected: HrtConfig = None):
    config, params = read_checkpoint(path)
    cfg = HrtConfig.from_dict(config)
    if expected is not None:
        want = expected.to_dict()
        diff = sorted(k for k in want if want[k] != config.get(k))
        if diff:
            raise ConfigError(f"checkpoint config mismatch in fields: {', '.join(diff)}")
    model = HrtModel(cfg)
    model.load_state_dict(dict(params))
    return model
