"""Optimizer, learning-rate schedule, token-budget batching and the train step."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .model import ModelConfig, SlowFastTransformer, SourceBatch, prepare_source
from .numerics import NumericError, ParameterSet, Rng
from .segmentation import BOS, EOS, PAD, BpeModel, SegmentedSentence, segment

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup_steps: int = 400
    max_tokens: int = 1024
    label_smoothing: float = 0.1
    seed: int = 1
    max_steps: int = 2000
    checkpoint_every: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.997
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# full-scale base profile (512/32 wide, 6 layers); desk runs use the dataclass defaults
BASE_PROFILE = dict(
    model=dict(hidden_slow=512, hidden_fast=32, ffn_slow=2048, ffn_fast=128, heads_slow=8,
               heads_fast=4, layers=6, decoder_layers=6),
    training=dict(peak_lr=0.002, warmup_steps=16000, max_tokens=4096),
)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("lr_at is defined for step >= 1")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


# ---------------------------------------------------------------- Adam


class Adam:
    def __init__(self, params: ParameterSet, beta1: float = 0.9, beta2: float = 0.997, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(params.flat)
        self.v = np.zeros_like(params.flat)
        self.t = 0

    def step(self, lr: float) -> None:
        adam_step(self.params, self, lr)


def adam_step(params: ParameterSet, state: Adam, lr: float) -> None:
    g = params.flat_grad
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    params.flat -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.flat.dtype)


# ---------------------------------------------------------------- batching


@dataclass
class Example:
    src: SegmentedSentence
    tgt: list[int]         # target subword ids without bos/eos

    @property
    def cost(self) -> int:
        return len(self.src.subwords) + len(self.tgt)


@dataclass
class Batch:
    examples: list[Example]
    src: SourceBatch
    tgt_in: np.ndarray     # [B, T] starting with bos
    tgt_out: np.ndarray    # [B, T] ending with eos

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())

    @property
    def size(self) -> int:
        return len(self.examples)


def make_examples(pairs: Sequence[tuple[Sequence[str], Sequence[str]]], bpe: BpeModel,
                  max_positions: int = 256) -> list[Example]:
    out = []
    for i, (src, tgt) in enumerate(pairs):
        s = segment(src, bpe)
        t, _ = bpe.encode_words(tgt)
        if max(len(s.chars), len(s.subwords), len(t) + 1) > max_positions:
            log.warning("skipping pair %d: longer than %d positions", i, max_positions)
            continue
        out.append(Example(s, t))
    return out


def collate(examples: Sequence[Example], cfg: ModelConfig, dtype=None) -> Batch:
    src = prepare_source([e.src for e in examples], cfg, dtype)
    T = max(len(e.tgt) for e in examples) + 1
    tgt_in = np.full((len(examples), T), PAD, dtype=np.int64)
    tgt_out = np.full((len(examples), T), PAD, dtype=np.int64)
    for b, e in enumerate(examples):
        tgt_in[b, : len(e.tgt) + 1] = [BOS] + e.tgt
        tgt_out[b, : len(e.tgt) + 1] = e.tgt + [EOS]
    return Batch(list(examples), src, tgt_in, tgt_out)


def pack(examples: Sequence[Example], max_tokens: int, seed: int) -> list[list[Example]]:
    """Length-bucketed packing.

    A batch's padded cost, ``size * (longest source + longest target)`` in
    subwords, stays within ``max_tokens`` (a lone over-budget pair still
    forms its own batch).
    """
    rng = Rng(seed, 0xBA7C)
    jitter = rng.permutation(len(examples))
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i].src.subwords), len(examples[i].tgt), jitter[i]))
    groups: list[list[Example]] = []
    cur: list[Example] = []
    width_s = width_t = 0
    for i in order:
        e = examples[i]
        ws = max(width_s, len(e.src.subwords))
        wt = max(width_t, len(e.tgt))
        if cur and (len(cur) + 1) * (ws + wt) > max_tokens:
            groups.append(cur)
            cur, ws, wt = [], len(e.src.subwords), len(e.tgt)
        cur.append(e)
        width_s, width_t = ws, wt
    if cur:
        groups.append(cur)
    perm = rng.permutation(len(groups))
    return [groups[i] for i in perm]


def make_batches(examples: Sequence[Example], cfg: ModelConfig, max_tokens: int, seed: int,
                 dtype=None) -> list[Batch]:
    return [collate(g, cfg, dtype) for g in pack(examples, max_tokens, seed)]


def batch_schedule(n_batches: int, seed: int, start: int = 0) -> Iterator[int]:
    """Batch index for every step; each epoch is a fresh seeded permutation."""
    step = start
    while True:
        epoch, pos = divmod(step, n_batches)
        yield int(Rng(seed, 0xE90C + epoch).permutation(n_batches)[pos])
        step += 1


# ---------------------------------------------------------------- steps


def batch_loss(model: SlowFastTransformer, batch: Batch, smoothing: float, training: bool,
               rng: Rng | None = None) -> nx.Tensor:
    logits = model.forward(batch.src, batch.tgt_in, training, rng)
    return nx.cross_entropy_label_smoothed(logits, batch.tgt_out, PAD, smoothing)


def accumulate_gradients(model: SlowFastTransformer, batches: Sequence[Batch], cfg: TrainConfig,
                         training: bool = True, rng: Rng | None = None) -> float:
    """Token-weighted gradient of the mean loss over all ``batches``; returns that loss."""
    total = sum(b.n_tokens for b in batches)
    loss_sum = 0.0
    for b in batches:
        loss = batch_loss(model, b, cfg.label_smoothing, training, rng)
        weight = b.n_tokens / total
        nx.scale(loss, weight).backward()
        loss_sum += loss.item() * weight
    return loss_sum


def train_step(batch: Batch | Sequence[Batch], model: SlowFastTransformer, optim: Adam,
               cfg: TrainConfig, step: int | None = None, training: bool = True) -> float:
    """One optimizer update; ``step`` (1-based) picks the learning rate and dropout stream."""
    batches = [batch] if isinstance(batch, Batch) else list(batch)
    step = optim.t + 1 if step is None else step
    rng = Rng(cfg.seed, 0xD809).split(step)
    model.params.zero_grad()
    loss = accumulate_gradients(model, batches, cfg, training, rng)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}")
    adam_step(model.params, optim, lr_at(step, cfg))
    return loss


def token_accuracy(model: SlowFastTransformer, batches: Sequence[Batch]) -> float:
    """Teacher-forced argmax accuracy over non-pad target positions."""
    hit = total = 0
    with nx.no_grad():
        for b in batches:
            pred = model.forward(b.src, b.tgt_in).data.argmax(-1)
            keep = b.tgt_out != PAD
            hit += int(((pred == b.tgt_out) & keep).sum())
            total += int(keep.sum())
    return hit / total


def evaluate_loss(model: SlowFastTransformer, batches: Sequence[Batch], smoothing: float = 0.0) -> float:
    """Token-weighted mean loss, no dropout."""
    num = den = 0.0
    with nx.no_grad():
        for b in batches:
            loss = batch_loss(model, b, smoothing, False).item()
            num += loss * b.n_tokens
            den += b.n_tokens
    return num / den


class MetricsWriter:
    """Appends ``step,lr,loss,tokens_per_step`` rows."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.fh = open(self.path, "a", newline="")
        self.w = csv.writer(self.fh)
        if new:
            self.w.writerow(["step", "lr", "loss", "tokens_per_step"])

    def write(self, step: int, lr: float, loss: float, tokens: int) -> None:
        self.w.writerow([step, f"{lr:.8g}", f"{loss:.6f}", tokens])
        self.fh.flush()

    def close(self):
        self.fh.close()


def train(model: SlowFastTransformer, optim: Adam, batches: Sequence[Batch], cfg: TrainConfig,
          steps: int, metrics: MetricsWriter | None = None, on_step=None) -> list[float]:
    """Run ``steps`` updates continuing from ``optim.t``; returns the loss curve."""
    losses = []
    schedule = batch_schedule(len(batches), cfg.seed, start=optim.t)
    for _ in range(steps):
        step = optim.t + 1
        b = batches[next(schedule)]
        loss = train_step(b, model, optim, cfg, step)
        losses.append(loss)
        if metrics is not None:
            metrics.write(step, lr_at(step, cfg), loss, b.n_tokens)
        if on_step is not None:
            on_step(step, loss)
    return losses
