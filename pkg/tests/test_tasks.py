from collections import Counter

import numpy as np
import pytest

from hrt.errors import ConfigError, InputError
from hrt.tasks import (BOS, CLOSE, MASK, OP_IDS, OPEN, PAD, TaskSpec, corpus_splits, gen_char_lm, gen_copy,
                       gen_hier_parity, hier_parity_target, listops_eval, listops_parse, listops_serialize, make_batch,
                       read_batches, synthetic_corpus, write_batches)

NAMES = {v: k for k, v in OP_IDS.items()}


def stack_eval(ids):
    """Bracket-stack evaluator over raw token ids, independent of the tree parser."""
    stack = []
    for t in (int(i) for i in ids if i != PAD):
        if t == OPEN:
            stack.append([])
        elif t in NAMES:
            stack[-1].append(NAMES[t])
        elif t == CLOSE:
            op, *args = stack.pop()
            if op == "MAX":
                v = max(args)
            elif op == "MIN":
                v = min(args)
            elif op == "MED":
                v = sorted(args)[(len(args) - 1) // 2]
            else:
                v = sum(args) % 10
            if not stack:
                return v
            stack[-1].append(v)
        else:
            stack[-1].append(t - 1)
    raise AssertionError("unbalanced expression")


def brute_parity(bits, block):
    p = 0
    for s in range(0, len(bits), block):
        ones = 0
        for b in bits[s:s + block]:
            ones += int(b)
        if ones * 2 > block:
            p ^= 1
    return p


@pytest.mark.parametrize("kind", ["copy", "reverse", "listops_mini", "hier_parity", "char_lm"])
def test_generators_are_pure(kind):
    spec = TaskSpec(kind=kind, seq_len=16, batch_size=8, block_size=4, num_blocks=4)
    a, b = make_batch(spec, "train", 3), make_batch(spec, "train", 3)
    for x, y in ((a.tokens, b.tokens), (a.targets, b.targets), (a.loss_mask, b.loss_mask)):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a.tokens, make_batch(spec, "val", 3).tokens)
    assert a.tokens.max() < spec.vocab_size and a.tokens.min() >= 0
    assert a.loss_mask.shape == a.targets.shape


def test_copy_contract():
    spec = TaskSpec(kind="copy", vocab_size=10, seq_len=12, batch_size=16)
    bt = make_batch(spec, "train", 0)
    assert (bt.tokens[:, 0] == BOS).all() and not bt.loss_mask[:, 0].any()
    np.testing.assert_array_equal(bt.targets[bt.loss_mask], bt.tokens[bt.loss_mask])


def test_reverse_contract():
    bt = make_batch(TaskSpec(kind="reverse", vocab_size=10, seq_len=6, batch_size=4), "train", 0)
    np.testing.assert_array_equal(bt.targets[:, 1:], bt.tokens[:, 1:][:, ::-1])


def test_copy_symbol_histogram_uniform():
    spec = TaskSpec(kind="copy", vocab_size=10, seq_len=101, batch_size=1000)
    syms = gen_copy(spec, np.random.default_rng(0)).tokens[:, 1:].ravel()
    assert syms.size == 10 ** 5
    freq = np.bincount(syms, minlength=10)[2:] / syms.size
    # each of the 8 symbols within 2% (relative) of the uniform 1/8
    assert np.abs(freq * 8 - 1).max() <= 0.02


def test_listops_examples():
    assert listops_eval(("MAX", [2, 7, 1])) == 7
    assert listops_eval(("MED", [1, 2, 3])) == 2
    assert listops_eval(("SM", [7, 8])) == 5
    tree = ("MIN", [("MAX", [3, 9]), 4, ("SM", [5, 6, 2])])
    ids = listops_serialize(tree)
    assert listops_parse(ids) == tree and stack_eval(ids) == listops_eval(tree) == 3


def test_listops_every_sample_matches_stack_oracle():
    spec = TaskSpec(kind="listops_mini", seq_len=64, batch_size=500)
    seen = 0
    counts = Counter()
    for i in range(20):
        bt = make_batch(spec, "train", i)
        for row, tgt in zip(bt.tokens, bt.targets):
            assert stack_eval(row) == tgt
            assert row[0] == OPEN
        counts.update(bt.targets.tolist())
        seen += len(bt.targets)
    assert seen == 10 ** 4
    assert max(counts.values()) / seen <= 0.6 and len(counts) == 10


def test_listops_limits():
    with pytest.raises(ConfigError):
        TaskSpec(kind="listops_mini", max_depth=5)
    with pytest.raises(ConfigError):
        TaskSpec(kind="listops_mini", seq_len=129)
    bt = make_batch(TaskSpec(kind="listops_mini", seq_len=20, batch_size=50, max_depth=4), "test", 0)
    assert ((bt.tokens != PAD).sum(axis=1) <= 20).all()


def test_hier_parity_examples():
    assert hier_parity_target([1, 1, 0, 0, 0, 1], 3) == 1
    assert hier_parity_target([0] * 16, 4) == 0
    # a tie in an even block is not a majority
    assert hier_parity_target([1, 1, 0, 0], 4) == 0


def test_hier_parity_matches_brute_force():
    spec = TaskSpec(kind="hier_parity", seq_len=16, block_size=4, num_blocks=4, batch_size=10 ** 4)
    bt = gen_hier_parity(spec, np.random.default_rng(11))
    bits = bt.tokens - 1
    for row, tgt in zip(bits, bt.targets):
        assert brute_parity(row, 4) == tgt
    assert 0.4 <= bt.targets.mean() <= 0.6


def test_hier_parity_shape_check():
    with pytest.raises(ConfigError):
        TaskSpec(kind="hier_parity", seq_len=15, block_size=4, num_blocks=4)


def test_char_lm_masking():
    corpus = synthetic_corpus(50_000)
    spec = TaskSpec(kind="char_lm", seq_len=128, batch_size=400)
    bt = gen_char_lm(corpus, spec, np.random.default_rng(0))
    frac = bt.loss_mask.mean()
    assert abs(frac - 0.15) <= 0.01
    assert (bt.tokens[bt.loss_mask] == MASK).all()
    np.testing.assert_array_equal(bt.tokens[~bt.loss_mask], bt.targets[~bt.loss_mask])


def test_char_lm_splits_disjoint():
    corpus = synthetic_corpus(20_000)
    spans = corpus_splits(corpus)
    assert spans["train"][1] <= spans["val"][0] and spans["val"][1] <= spans["test"][0]
    spec = TaskSpec(kind="char_lm", seq_len=32, batch_size=64)
    raw = np.frombuffer(corpus, np.uint8).astype(np.int64) + 2
    for split in ("train", "val"):
        lo, hi = spans[split]
        bt = make_batch(spec, split, 0, corpus)
        for w in bt.targets:
            hits = [s for s in range(lo, hi - 32 + 1) if np.array_equal(raw[s:s + 32], w)]
            assert hits, f"{split} window not found inside its byte range"


def test_char_lm_small_corpus():
    with pytest.raises(InputError):
        gen_char_lm(b"x" * 100, TaskSpec(kind="char_lm", seq_len=16), np.random.default_rng(0))


def test_synthetic_corpus_deterministic():
    a = synthetic_corpus(4096)
    assert a == synthetic_corpus(4096) and len(a) == 4096 and a.isascii()


def test_split_seeds_must_differ():
    with pytest.raises(ConfigError):
        TaskSpec(seeds={"train": 1, "val": 1, "test": 2})


def test_replay_round_trip(tmp_path):
    batches = [make_batch(TaskSpec(kind=k, seq_len=16, batch_size=3), "train", 0, synthetic_corpus(4096))
               for k in ("copy", "listops_mini", "hier_parity", "char_lm")]
    write_batches(tmp_path / "r.bin", batches)
    back = read_batches(tmp_path / "r.bin")
    assert [b.task_kind for b in back] == [b.task_kind for b in batches]
    for a, b in zip(batches, back):
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_array_equal(a.loss_mask, b.loss_mask)
