"""Beam search, corpus BLEU and the analytic FLOPs model."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import Memory, ModelConfig, SlowFastTransformer, prepare_source
from .numerics import Tensor
from .segmentation import BOS, EOS, PAD, UNK, SegmentedSentence


# ---------------------------------------------------------------- beam search


@dataclass
class Hypothesis:
    tokens: list[int]        # generated tokens without bos/eos
    logprob: float
    score: float
    finished: bool


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _greedy_core(next_logprobs: Callable[[list[list[int]]], np.ndarray], alpha: float, max_len: int,
                 banned: Sequence[int]) -> Hypothesis:
    tokens: list[int] = []
    s = 0.0
    for _ in range(max_len):
        lp = np.asarray(next_logprobs([tokens])[0], dtype=np.float64).copy()
        lp[list(banned)] = -np.inf
        v = int(np.argmax(lp))
        s += float(lp[v])
        if v == EOS:
            return Hypothesis(tokens, s, s / length_penalty(len(tokens) + 1, alpha), True)
        tokens = tokens + [v]
    return Hypothesis(tokens, s, s / length_penalty(len(tokens), alpha), False)


def beam_search_core(next_logprobs: Callable[[list[list[int]]], np.ndarray], beam: int, alpha: float,
                     max_len: int, banned: Sequence[int] = (PAD, BOS)) -> Hypothesis:
    """Beam search over any next-token scorer.

    ``next_logprobs(prefixes)`` returns ``[len(prefixes), V]`` log-probs of
    the token after each prefix.  Among the top ``2*beam`` extensions an
    end-of-sentence in the first ``beam`` ranks finalizes a hypothesis; the
    rest refill the beam.  Search stops once ``beam`` hypotheses finished.
    Finished hypotheses are ranked by ``logprob / ((5+len)/6)**alpha``.
    The greedy path is scored too and wins if the beam pruned it away, so
    the result never scores below greedy decoding.
    """
    if beam < 1 or alpha < 0:
        raise ValueError("beam must be >= 1 and alpha >= 0")
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = np.asarray(next_logprobs([t for t, _ in live]), dtype=np.float64).copy()
        lp[:, list(banned)] = -np.inf
        total = lp + np.array([s for _, s in live])[:, None]
        flat = total.reshape(-1)
        n_cand = min(2 * beam, int(np.isfinite(flat).sum()))
        # stable order: score descending, then hypothesis index, then token id
        top = np.argsort(-flat, kind="stable")[:n_cand]
        V = lp.shape[1]
        nxt = []
        for rank, idx in enumerate(top):
            i, v = divmod(int(idx), V)
            s = float(flat[idx])
            tokens = live[i][0]
            if v == EOS:
                if rank < beam:
                    n = len(tokens) + 1
                    finished.append(Hypothesis(list(tokens), s, s / length_penalty(n, alpha), True))
            elif len(nxt) < beam:
                nxt.append((tokens + [v], s))
        live = nxt
        if len(finished) >= beam or not live:
            break
    greedy = _greedy_core(next_logprobs, alpha, max_len, banned)
    if finished:
        best = max(finished, key=lambda h: h.score)
        return greedy if greedy.finished and greedy.score > best.score else best
    if greedy.finished:
        return greedy
    best_live = max(live, key=lambda h: h[1] / length_penalty(len(h[0]), alpha))
    unfinished = Hypothesis(best_live[0], best_live[1], best_live[1] / length_penalty(len(best_live[0]), alpha),
                            False)
    return greedy if greedy.score > unfinished.score else unfinished


def _decoder_scorer(model: SlowFastTransformer, memory: Memory) -> Callable[[list[list[int]]], np.ndarray]:
    def expand(m: Memory, n: int) -> Memory:
        rep = lambda t: None if t is None else Tensor(np.repeat(t.data, n, axis=0))
        mask = lambda a: None if a is None else np.repeat(a, n, axis=0)
        return Memory(m.mode, rep(m.states), mask(m.mask), rep(m.fast), mask(m.fast_mask))

    cache: dict[int, Memory] = {}

    def score(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        if n not in cache:
            cache[n] = expand(memory, n)
        tgt = np.array([[BOS] + p for p in prefixes], dtype=np.int64)
        logits = model.decode_forward(tgt, cache[n]).data[:, -1, :].astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    return score


def beam_search(src: SegmentedSentence, model: SlowFastTransformer, beam: int = 4, alpha: float = 0.6,
                max_len: int | None = None) -> Hypothesis:
    """Translate one sentence; ``Hypothesis.finished`` is False if ``max_len`` cut it off."""
    if max_len is None:
        max_len = min(model.cfg.max_positions - 1, 2 * len(src.subwords) + 10)
    with nx.no_grad():
        batch = prepare_source([src], model.cfg, model.dtype)
        enc = model.encode(batch)
        memory = model.encdec_interaction(enc, batch)
        return beam_search_core(_decoder_scorer(model, memory), beam, alpha, max_len,
                                banned=(PAD, BOS, UNK))


def greedy_decode(src: SegmentedSentence, model: SlowFastTransformer, max_len: int | None = None) -> list[int]:
    """Argmax decoding, independent of the beam machinery."""
    if max_len is None:
        max_len = min(model.cfg.max_positions - 1, 2 * len(src.subwords) + 10)
    with nx.no_grad():
        batch = prepare_source([src], model.cfg, model.dtype)
        memory = model.encdec_interaction(model.encode(batch), batch)
        out: list[int] = []
        for _ in range(max_len):
            logits = model.decode_forward(np.array([[BOS] + out]), memory).data[0, -1].copy()
            logits[[PAD, BOS, UNK]] = -np.inf
            tok = int(np.argmax(logits))
            if tok == EOS:
                break
            out.append(tok)
        return out


# ---------------------------------------------------------------- BLEU


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        c, r = self.hyp_len, self.ref_len
        if c == 0:
            return 0.0
        return 1.0 if c >= r else math.exp(1.0 - r / c)

    @property
    def score(self) -> float:
        p = self.precisions
        if min(p) == 0.0:
            return 0.0
        return 100.0 * self.brevity_penalty * math.exp(sum(math.log(x) for x in p) / len(p))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
               max_n: int = 4) -> BleuStats:
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h, g = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(cnt, g[ng]) for ng, cnt in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStats(matches, totals, c, r)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Unsmoothed corpus BLEU-4 in percent."""
    return bleu_stats(hypotheses, references).score


# ---------------------------------------------------------------- FLOPs

FLOP_COMPONENTS = ("slow", "fast", "fusion", "decoder")


def _mm(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def _attention(lq: int, lk: int, h_q: int, h_kv: int, width: int, rel_rows: int = 0) -> int:
    proj = _mm(lq, h_q, width) + 2 * _mm(lk, h_kv, width) + _mm(lq, width, width)
    scores = 2 * lq * lk * width * 2          # QK^T and AV, summed over heads
    return proj + scores + 2 * lq * width * rel_rows


def _ffn(L: int, H: int, inner: int) -> int:
    return _mm(L, H, inner) + _mm(L, inner, H)


def _gcn(L: int, H: int) -> int:
    return _mm(L, H, H) + _mm(L, L, H)


def flops_estimate(cfg: ModelConfig, L_s: int, L_f: int, T: int) -> dict[str, int]:
    """Forward-pass matmul FLOPs (2*m*k*n per product) for one sentence.

    ``L_f`` is the fast-branch length (equal to ``L_s`` when the fast
    branch reads subwords).  Softmax, normalization and elementwise work
    are not counted.
    """
    if min(L_s, L_f, T) < 1:
        raise ValueError("lengths must be positive")
    Hs, Hf = cfg.hidden_slow, cfg.hidden_fast
    out = dict.fromkeys(FLOP_COMPONENTS, 0)
    fast = cfg.uses_fast_branch
    rel_rows = 2 * cfg.k + 2 if cfg.relpos_mode != "none" else 0
    if cfg.slow_gcn:
        out["slow"] += _gcn(L_s, Hs)
    if fast and cfg.fast_gcn != "none":
        out["fast"] += _gcn(L_f, Hf)
    to_slow, to_fast = cfg.receives()
    for layer in range(cfg.layers):
        out["slow"] += _attention(L_s, L_s, Hs, Hs, Hs) + _ffn(L_s, Hs, cfg.ffn_slow)
        if fast:
            out["fast"] += _attention(L_f, L_f, Hf, Hf, Hf, rel_rows) + _ffn(L_f, Hf, cfg.ffn_fast)
        if not cfg.fusion_at(layer):
            continue
        v = cfg.fusion_variant
        if v == "cga":
            if to_fast:
                out["fusion"] += _attention(L_f, L_s, Hf, Hs, Hf)
            if to_slow:
                out["fusion"] += _attention(L_s, L_f, Hs, Hf, Hs)
        elif v == "linear_attention":
            if to_fast:
                out["fusion"] += _mm(L_s, Hs, Hf) + _attention(L_f, L_s, Hf, Hf, Hf)
            if to_slow:
                out["fusion"] += _mm(L_f, Hf, Hs) + _attention(L_s, L_f, Hs, Hs, Hs)
        else:
            out["fusion"] += _mm(L_s, L_f, Hf) + _mm(L_s, Hf, Hs)
            if v == "ds_concat":
                out["fusion"] += _mm(L_s, 2 * Hs, Hs)
    mode = cfg.interaction_mode
    L_mem = L_s
    if mode == "fast":
        out["decoder"] += _mm(L_f, Hf, Hs)
        L_mem = L_f
    for _ in range(cfg.decoder_layers):
        out["decoder"] += _attention(T, T, Hs, Hs, Hs) + _attention(T, L_mem, Hs, Hs, Hs)
        if mode == "gated_both":
            out["decoder"] += _attention(T, L_f, Hs, Hf, Hs) + _mm(T, 2 * Hs, Hs)
        out["decoder"] += _ffn(T, Hs, cfg.ffn_slow)
    out["decoder"] += _mm(T, Hs, cfg.tgt_vocab)
    out["total"] = sum(out[c] for c in FLOP_COMPONENTS)
    return out


def count_forward_flops(model: SlowFastTransformer, src: SegmentedSentence, T: int) -> dict[str, int]:
    """Run the real forward pass under the matmul counter."""
    batch = prepare_source([src], model.cfg, model.dtype)
    tgt = np.full((1, T), BOS, dtype=np.int64)
    with nx.no_grad(), nx.count_flops() as counter:
        model.forward(batch, tgt)
    out = {c: int(counter.by_scope.get(c, 0)) for c in FLOP_COMPONENTS}
    out["total"] = counter.total
    return out
