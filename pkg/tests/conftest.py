import numpy as np
import pytest

from multisource.attention import MultiHeadParams, init_multi_head
from multisource.combination import EncoderBundle, EncoderState, LayerNormParams
from multisource.tensor import Prng, Tensor


def make_mha(seed, d=4, heads=2):
    mha, _ = init_multi_head("t", d, heads, Prng(seed))
    return mha


def make_norm(d=4, seed=None):
    if seed is None:
        return LayerNormParams(Tensor(np.ones(d), True), Tensor(np.zeros(d), True))
    rng = np.random.default_rng(seed)
    return LayerNormParams(Tensor(1 + 0.1 * rng.normal(size=d), True),
                           Tensor(0.1 * rng.normal(size=d), True))


def random_bundle(rng, lengths, d=4, grad=False, masks=None):
    entries = []
    for i, n in enumerate(lengths):
        mask = None if masks is None else masks[i]
        entries.append(EncoderState(f"src{i}", Tensor(rng.normal(size=(n, d)), grad), mask))
    return EncoderBundle(entries)


def copy_mha(p: MultiHeadParams) -> MultiHeadParams:
    dup = lambda ts: [Tensor(t.data.copy(), True) for t in ts]
    return MultiHeadParams(dup(p.wq), dup(p.wk), dup(p.wv), dup(p.wo))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines, printed once at the end of the session
_ACCEPTANCE: list[str] = []


def record_acceptance(number, name, ok, detail):
    _ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
