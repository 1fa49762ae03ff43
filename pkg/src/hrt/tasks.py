"""Deterministic synthetic tasks and a byte-level masked LM task.

Each analog probes one claim: ``listops_mini`` compositional hierarchy,
``char_lm`` long-context byte modeling, ``hier_parity`` the need to combine
information across scales, ``copy``/``reverse`` plumbing sanity.
"""
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

PAD = 0

# copy / reverse
BOS = 1
SYMBOL_OFFSET = 2

# listops_mini: digits 0-9 -> ids 1..10, then operators and brackets
DIGIT_OFFSET = 1
OPS = ("MAX", "MIN", "MED", "SM")
OP_IDS = {op: 11 + i for i, op in enumerate(OPS)}
OPEN, CLOSE = 15, 16
LISTOPS_VOCAB = 17

# char_lm: bytes -> ids 2..257
MASK = 1
BYTE_OFFSET = 2
CHAR_VOCAB = 258

# hier_parity: bit b -> id b + 1
BIT_OFFSET = 1
PARITY_VOCAB = 3

KINDS = ("copy", "reverse", "listops_mini", "char_lm", "hier_parity")


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 10
    seq_len: int = 16
    batch_size: int = 32
    seeds: dict = field(default_factory=lambda: {"train": 1, "val": 2, "test": 3})
    max_depth: int = 4
    max_args: int = 4
    mask_fraction: float = 0.15
    block_size: int = 4
    num_blocks: int = 4
    corpus: str = ""
    pad_to: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if set(self.seeds) != {"train", "val", "test"}:
            raise ConfigError("task seeds must define exactly train, val and test")
        if len(set(self.seeds.values())) != 3:
            raise ConfigError("train/val/test seeds must be pairwise distinct")
        if self.kind in ("copy", "reverse") and self.vocab_size < 3:
            raise ConfigError("copy needs vocab_size >= 3 (pad, bos and at least one symbol)")
        if self.kind == "listops_mini":
            self.vocab_size = LISTOPS_VOCAB
            if not 1 <= self.max_depth <= 4:
                raise ConfigError("listops_mini depth must be in 1..4")
            if self.seq_len > 128:
                raise ConfigError("listops_mini length must be <= 128")
        if self.pad_to and (self.pad_to < self.seq_len or self.token_level):
            raise ConfigError("pad_to must be >= seq_len and applies only to classification tasks")
        if self.kind == "char_lm":
            self.vocab_size = CHAR_VOCAB
        if self.kind == "hier_parity":
            self.vocab_size = PARITY_VOCAB
            if self.seq_len != self.block_size * self.num_blocks:
                raise ConfigError("hier_parity needs seq_len == block_size * num_blocks")

    @property
    def num_classes(self):
        return {"listops_mini": 10, "hier_parity": 2}.get(self.kind, 0)

    @property
    def token_level(self):
        return self.kind in ("copy", "reverse", "char_lm")


@dataclass
class TaskBatch:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    task_kind: str


# ---------------------------------------------------------------------------
# copy / reverse
# ---------------------------------------------------------------------------

def gen_copy(spec, rng, batch_size=None, reverse=False):
    b = batch_size or spec.batch_size
    syms = rng.integers(SYMBOL_OFFSET, spec.vocab_size, size=(b, spec.seq_len - 1))
    tokens = np.concatenate([np.full((b, 1), BOS), syms], axis=1)
    targets = tokens.copy()
    if reverse:
        targets[:, 1:] = syms[:, ::-1]
    mask = np.ones_like(tokens, dtype=bool)
    mask[:, 0] = False
    return TaskBatch(tokens, targets, mask, "reverse" if reverse else "copy")


# ---------------------------------------------------------------------------
# listops_mini
# ---------------------------------------------------------------------------

def listops_apply(op, args):
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return sorted(args)[(len(args) - 1) // 2]
    if op == "SM":
        return sum(args) % 10
    raise ValueError(op)


def listops_eval(tree):
    """Recursive evaluator over nested tuples ``(op, [children])`` and ints."""
    if isinstance(tree, int):
        return tree
    op, children = tree
    return listops_apply(op, [listops_eval(c) for c in children])


def listops_serialize(tree):
    if isinstance(tree, int):
        return [DIGIT_OFFSET + tree]
    op, children = tree
    out = [OPEN, OP_IDS[op]]
    for c in children:
        out += listops_serialize(c)
    return out + [CLOSE]


def listops_parse(ids):
    """Inverse of :func:`listops_serialize` (ignores padding)."""
    ids = [int(i) for i in ids if i != PAD]
    inv = {v: k for k, v in OP_IDS.items()}
    pos = 0

    def parse():
        nonlocal pos
        t = ids[pos]
        if t == OPEN:
            op = inv[ids[pos + 1]]
            pos += 2
            children = []
            while ids[pos] != CLOSE:
                children.append(parse())
            pos += 1
            return (op, children)
        pos += 1
        return t - DIGIT_OFFSET

    return parse()


def _random_tree(rng, depth, max_args):
    if depth == 0 or (depth < 4 and rng.random() < 0.25):
        return int(rng.integers(0, 10))
    op = OPS[int(rng.integers(0, len(OPS)))]
    k = int(rng.integers(2, max_args + 1))
    return (op, [_random_tree(rng, depth - 1, max_args) for _ in range(k)])


def gen_listops_mini(spec, rng, batch_size=None):
    b = batch_size or spec.batch_size
    tokens = np.full((b, spec.seq_len), PAD, dtype=np.int64)
    targets = np.zeros(b, dtype=np.int64)
    for i in range(b):
        while True:
            depth = int(rng.integers(1, spec.max_depth + 1))
            tree = _random_tree(rng, depth, spec.max_args)
            if isinstance(tree, int):
                continue
            ids = listops_serialize(tree)
            if len(ids) <= spec.seq_len:
                break
        tokens[i, :len(ids)] = ids
        targets[i] = listops_eval(tree)
    return TaskBatch(tokens, targets, np.ones(b, dtype=bool), "listops_mini")


# ---------------------------------------------------------------------------
# hier_parity
# ---------------------------------------------------------------------------

def hier_parity_target(bits, block_size):
    """Parity of the per-block majority bits (a block's majority is 1 iff more than half its bits are 1)."""
    bits = np.asarray(bits)
    blocks = bits.reshape(-1, block_size)
    maj = (2 * blocks.sum(axis=1) > block_size).astype(int)
    return int(maj.sum() % 2)


def gen_hier_parity(spec, rng, batch_size=None):
    b = batch_size or spec.batch_size
    bits = rng.integers(0, 2, size=(b, spec.seq_len))
    blocks = bits.reshape(b, spec.num_blocks, spec.block_size)
    maj = (2 * blocks.sum(axis=2) > spec.block_size).astype(np.int64)
    targets = maj.sum(axis=1) % 2
    return TaskBatch(bits + BIT_OFFSET, targets, np.ones(b, dtype=bool), "hier_parity")


# ---------------------------------------------------------------------------
# char_lm
# ---------------------------------------------------------------------------

_WORDS = (
    "the a one every some no this that river stone house garden letter window morning evening road "
    "city ship field winter summer child teacher king queen friend stranger voice light shadow "
    "book story song door table fire water wind mountain forest bird horse lamp bell"
).split()
_VERBS = "saw found kept carried opened followed remembered answered watched heard built crossed wrote".split()
_ADJ = "old quiet bright small distant green cold warm long strange dark gentle heavy".split()
_ADV = "slowly quietly again suddenly together often later early carefully".split()
_CONJ = ["and", "but", "while", "because", "so", "when"]


def synthetic_corpus(n_bytes=262_144, seed=0):
    """Deterministic English-like text from a small phrase grammar, used when no corpus file is given."""
    rng = np.random.default_rng(seed)
    pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731

    def noun_phrase():
        det = pick(_WORDS[:7])
        return f"{det} {pick(_ADJ)} {pick(_WORDS[7:])}" if rng.random() < 0.5 else f"{det} {pick(_WORDS[7:])}"

    def clause():
        s = f"{noun_phrase()} {pick(_VERBS)} {noun_phrase()}"
        if rng.random() < 0.3:
            s += f" {pick(_ADV)}"
        return s

    parts = []
    size = 0
    while size < n_bytes:
        s = clause()
        while rng.random() < 0.4:
            s += f" {pick(_CONJ)} {clause()}"
        s = s[0].upper() + s[1:] + ". "
        if rng.random() < 0.1:
            s += "\n\n"
        parts.append(s)
        size += len(s)
    return "".join(parts).encode()[:n_bytes]


def load_corpus(path=None):
    path = path or os.environ.get("HRT_CORPUS") or ""
    if not path:
        return synthetic_corpus()
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise InputError(f"cannot read corpus {path}: {e.strerror}") from None


def corpus_splits(corpus, val_fraction=0.1, test_fraction=0.1):
    """Disjoint contiguous byte ranges ``{split: (start, stop)}``."""
    n = len(corpus)
    a = int(n * (1 - val_fraction - test_fraction))
    b = int(n * (1 - test_fraction))
    return {"train": (0, a), "val": (a, b), "test": (b, n)}


def gen_char_lm(corpus, spec, rng, split="train", batch_size=None):
    b = batch_size or spec.batch_size
    n = spec.seq_len
    if len(corpus) < 10 * n:
        raise InputError(f"corpus has {len(corpus)} bytes; need at least {10 * n}")
    lo, hi = corpus_splits(corpus)[split]
    if hi - lo < n:
        raise InputError(f"{split} split ({hi - lo} bytes) is shorter than one window")
    starts = rng.integers(lo, hi - n + 1, size=b)
    raw = np.frombuffer(corpus, dtype=np.uint8)
    windows = np.stack([raw[s:s + n] for s in starts]).astype(np.int64) + BYTE_OFFSET
    masked = rng.random((b, n)) < spec.mask_fraction
    tokens = np.where(masked, MASK, windows)
    return TaskBatch(tokens, windows, masked, "char_lm")


# ---------------------------------------------------------------------------
# dispatch and replay format
# ---------------------------------------------------------------------------

def split_rng(spec, split, index):
    """Generator for batch ``index`` of ``split``; a pure function of (spec seeds, split, index)."""
    return np.random.default_rng([int(spec.seeds[split]), int(index)])


def make_batch(spec, split, index, corpus=None, batch_size=None):
    batch = _generate(spec, split, index, corpus, batch_size)
    extra = spec.pad_to - batch.tokens.shape[1] if spec.pad_to else 0
    if extra > 0:
        # fixed context window: right-pad classification inputs, targets are unaffected
        batch.tokens = np.pad(batch.tokens, ((0, 0), (0, extra)), constant_values=PAD)
    return batch


def _generate(spec, split, index, corpus, batch_size):
    rng = split_rng(spec, split, index)
    if spec.kind == "copy":
        return gen_copy(spec, rng, batch_size)
    if spec.kind == "reverse":
        return gen_copy(spec, rng, batch_size, reverse=True)
    if spec.kind == "listops_mini":
        return gen_listops_mini(spec, rng, batch_size)
    if spec.kind == "hier_parity":
        return gen_hier_parity(spec, rng, batch_size)
    if corpus is None:
        corpus = load_corpus(spec.corpus or None)
    return gen_char_lm(corpus, spec, rng, split, batch_size)


def write_batches(path, batches):
    """Replay file: u32 batch count, then per batch a u32-length-prefixed kind string and
    tokens/targets/loss_mask each as u32 ndim, u64 extents, little-endian int64 values."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(batches)))
        for bt in batches:
            kind = bt.task_kind.encode()
            fh.write(struct.pack("<I", len(kind)))
            fh.write(kind)
            for arr in (bt.tokens, bt.targets, bt.loss_mask.astype(np.int64)):
                arr = np.ascontiguousarray(arr, dtype="<i8")
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())


def read_batches(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    out = []
    for _ in range(count):
        (kl,) = struct.unpack_from("<I", raw, off)
        off += 4
        kind = raw[off:off + kl].decode()
        off += kl
        arrays = []
        for _ in range(3):
            (nd,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{nd}Q", raw, off)
            off += 8 * nd
            size = int(np.prod(shape, dtype=np.int64))
            arrays.append(np.frombuffer(raw, dtype="<i8", count=size, offset=off).reshape(shape).copy())
            off += 8 * size
        out.append(TaskBatch(arrays[0], arrays[1], arrays[2].astype(bool), kind))
    return out
