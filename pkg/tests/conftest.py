import numpy as np
import pytest

from hrt.attention import AttentionAudit, set_global_audit
from hrt.config import HrtConfig

# Every attention map computed anywhere in the suite is checked for row sums and masking.
AUDIT = AttentionAudit()


def pytest_configure(config):
    set_global_audit(AUDIT)


def pytest_collection_modifyitems(session, config, items):
    # acceptance criteria run last so the audit has seen every other run
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


@pytest.fixture(autouse=True)
def _no_attention_violations():
    before = len(AUDIT.violations)
    yield
    assert AUDIT.violations[before:] == []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_config(**kw):
    base = dict(vocab_size=11, max_len=8, levels=3, dims=[4, 8, 8], heads=2, blocks_per_level=1, dropout=0.0)
    base.update(kw)
    return HrtConfig(**base)


def randomize(model, rng, scale=0.5):
    """Give every parameter (including zero-initialized ones) a generic random value."""
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0.0, scale, p.shape)
    model.clamp_slopes()
    for stack in model.stacks:
        for b in stack.blocks:
            if b.attn.slopes is not None:
                b.attn.slopes.data[...] = np.abs(b.attn.slopes.data) + 0.1
    return model


ACCEPTANCE_LINES = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    ACCEPTANCE_LINES.append(f"criterion {number:>2} {name}: {'PASS' if rep.passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
