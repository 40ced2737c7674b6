import numpy as np
import pytest

from slowfast import numerics as nx
from slowfast.model import ModelConfig, SlowFastTransformer, prepare_source
from slowfast.segmentation import learn_bpe, segment

SENTENCES = [
    "good - news travels faster".split(),
    "the lower house voted".split(),
    "newer laws arrive".split(),
    "a b".split(),
]


@pytest.fixture(scope="session")
def bpe():
    return learn_bpe(SENTENCES, 15)


def tiny_config(bpe, **overrides) -> ModelConfig:
    base = dict(hidden_slow=16, hidden_fast=8, heads_slow=2, heads_fast=2, layers=2, decoder_layers=2,
                src_vocab=len(bpe.vocab), tgt_vocab=len(bpe.vocab), char_vocab=len(bpe.char_vocab))
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(bpe, seed=0, bits=64, **overrides):
    cfg = tiny_config(bpe, **overrides)
    with nx.precision(bits):
        return SlowFastTransformer(cfg, seed=seed)


def source_batch(bpe, model, sentences=SENTENCES, pad_to=None):
    return prepare_source([segment(s, bpe) for s in sentences], model.cfg, model.dtype, pad_to)


def random_targets(rng, batch, V, T=5):
    tgt = rng.integers(4, V, size=(batch, T))
    tgt[:, 0] = 1
    return tgt


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
