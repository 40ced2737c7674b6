"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .decoding import bleu, greedy_decode
from .model import ModelConfig, SlowFastTransformer
from .segmentation import learn_bpe
from .synthetic import copy_corpus, reversal_morphology_corpus
from .training import Adam, TrainConfig, evaluate_loss, make_batches, make_examples, token_accuracy, train

DESK_MODEL = dict(hidden_slow=64, hidden_fast=16, heads_slow=4, heads_fast=2, layers=2, decoder_layers=2)


@dataclass
class CopyResult:
    steps: int
    accuracy: float
    bleu: float
    seconds: float
    losses: list[float] = field(repr=False, default_factory=list)


def copy_task(max_steps: int = 2000, seed: int = 1, check_every: int = 100, merges: int = 200,
              max_tokens: int = 600, **model_overrides) -> CopyResult:
    """Train on the 50-pair copy corpus until teacher-forced accuracy and greedy BLEU saturate."""
    pairs = copy_corpus(50, vocab=30, min_len=3, max_len=12, seed=seed)
    bpe = learn_bpe([s for s, _ in pairs], merges)
    cfg = ModelConfig(**{**DESK_MODEL, **model_overrides}, src_vocab=len(bpe.vocab),
                      tgt_vocab=len(bpe.vocab), char_vocab=len(bpe.char_vocab))
    tc = TrainConfig(seed=seed, max_tokens=max_tokens, max_steps=max_steps)
    model = SlowFastTransformer(cfg, seed=seed)
    optim = Adam(model.params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    examples = make_examples(pairs, bpe)
    batches = make_batches(examples, cfg, tc.max_tokens, seed)
    started = time.time()
    losses: list[float] = []
    acc = score = 0.0
    while optim.t < max_steps:
        losses += train(model, optim, batches, tc, min(check_every, max_steps - optim.t))
        acc = token_accuracy(model, batches)
        if acc >= 0.99:
            hyps = [bpe.decode(greedy_decode(e.src, model)) for e in examples]
            score = bleu(hyps, [t for _, t in pairs])
            if score >= 99.0:
                break
    return CopyResult(optim.t, acc, score, time.time() - started, losses)


@dataclass
class FusionRun:
    seed: int
    variant: str
    dev_loss: float
    seconds: float


def fusion_benefit_run(variant: str, seed: int, steps: int = 5000, n_train: int = 2000, n_dev: int = 200,
                       merges: int = 350, max_tokens: int = 400, holdout: float = 0.25,
                       peak_lr: float = 5e-4, **model_overrides) -> FusionRun:
    """Dev loss (no smoothing, no dropout) after ``steps`` updates on the morphology reversal task.

    Dev sentences use only the held-out (stem, tag) forms, so tags must be
    read from spelling.  Data and segmentation are identical across seeds
    and variants; the seed drives initialization, batching and dropout.
    """
    train_pairs = reversal_morphology_corpus(n_train, seed=0, holdout=holdout)
    dev_pairs = reversal_morphology_corpus(n_dev, seed=10_000, holdout=holdout, split="dev")
    bpe = learn_bpe([s for s, _ in train_pairs] + [t for _, t in train_pairs], merges)
    cfg = ModelConfig(**{**DESK_MODEL, **model_overrides, "fusion_variant": variant},
                      src_vocab=len(bpe.vocab), tgt_vocab=len(bpe.vocab), char_vocab=len(bpe.char_vocab))
    tc = TrainConfig(seed=seed, max_tokens=max_tokens, max_steps=steps, peak_lr=peak_lr)
    model = SlowFastTransformer(cfg, seed=seed)
    optim = Adam(model.params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    train_batches = make_batches(make_examples(train_pairs, bpe), cfg, max_tokens, seed)
    dev_batches = make_batches(make_examples(dev_pairs, bpe), cfg, max_tokens, 0)
    started = time.time()
    train(model, optim, train_batches, tc, steps)
    return FusionRun(seed, variant, evaluate_loss(model, dev_batches), time.time() - started)
