"""Subword and character views of a sentence plus word-boundary structures.

Text arrives whitespace-tokenized.  Subwords come from a greedy BPE whose
non-final pieces carry the ``@@`` continuation marker; characters are the
plain decomposition of each word with no separator between words.  Word
membership is carried by ``sub2word`` / ``char2word`` and drives the
boundary adjacency matrices and the boundary-restricted relative positions.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MARKER = "@@"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3
# sentinel for pairs with no relative-position embedding
OUT = np.iinfo(np.int32).min


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------- BPE


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_counts(vocab: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for word, freq in vocab.items():
        for pair in zip(word, word[1:]):
            counts[pair] += freq
    return counts


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    char_vocab: dict[str, int] = field(default_factory=dict)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    unk_id = UNK

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if not self.char_vocab:
            chars = sorted({c for t in self.vocab if t not in SPECIALS
                            for c in t.removesuffix(MARKER)})
            self.char_vocab = {t: i for i, t in enumerate(SPECIALS)}
            for c in chars:
                self.char_vocab[c] = len(self.char_vocab)
        self._cache: dict[str, tuple[str, ...]] = {}

    def split_word(self, word: str) -> tuple[str, ...]:
        """Plain pieces of ``word`` (no markers) after applying merges by rank."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        symbols = tuple(word)
        while len(symbols) > 1:
            pairs = set(zip(symbols, symbols[1:]))
            best = min(pairs, key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            symbols = _merge_word(symbols, best)
        self._cache[word] = symbols
        return symbols

    def word_tokens(self, word: str) -> list[str]:
        pieces = self.split_word(word)
        return [p + MARKER for p in pieces[:-1]] + [pieces[-1]]

    def encode_words(self, words: Sequence[str]) -> tuple[list[int], list[int]]:
        ids, owner = [], []
        for w, word in enumerate(words):
            for tok in self.word_tokens(word):
                ids.append(self.vocab.get(tok, UNK))
                owner.append(w)
        return ids, owner

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Turn subword ids back into words, dropping special symbols."""
        text = " ".join(self.id_to_token[i] for i in ids if i >= len(SPECIALS))
        return text.replace(MARKER + " ", "").removesuffix(MARKER).split()

    # --- persistence: header, merges, then a #vocab section
    def dumps(self) -> str:
        lines = [f"bpe-v1 {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append("#vocab")
        lines += [f"{t}\t{i}" for t, i in sorted(self.vocab.items(), key=lambda kv: kv[1])]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BpeModel":
        lines = text.splitlines()
        head = lines[0].split()
        if len(head) != 2 or head[0] != "bpe-v1":
            raise CorpusError("not a bpe-v1 model")
        n = int(head[1])
        merges = []
        for line in lines[1:1 + n]:
            a, b = line.split(" ")
            merges.append((a, b))
        if lines[1 + n] != "#vocab":
            raise CorpusError("missing #vocab section")
        vocab = {}
        for line in lines[2 + n:]:
            if line:
                tok, idx = line.rsplit("\t", 1)
                vocab[tok] = int(idx)
        return cls(merges, vocab)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def learn_bpe(corpus: Iterable[Sequence[str]], num_merges: int) -> BpeModel:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair."""
    freqs: Counter = Counter()
    for sentence in corpus:
        for word in sentence:
            freqs[word] += 1
    if not freqs:
        raise CorpusError("cannot learn BPE from an empty corpus")
    vocab = {tuple(w): f for w, f in freqs.items()}
    symbols = {c for w in vocab for c in w}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(vocab)
        if not counts:
            break
        top = max(counts.values())
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        symbols.add(pair[0] + pair[1])
        vocab = {_merge_word(w, pair): f for w, f in vocab.items()}
    tokens = sorted({s + MARKER for s in symbols} | symbols)
    ids = {t: i for i, t in enumerate(SPECIALS)}
    for t in tokens:
        ids[t] = len(ids)
    return BpeModel(merges, ids)


# ---------------------------------------------------------------- sentences


@dataclass
class SegmentedSentence:
    words: list[str]
    subwords: list[int]
    sub2word: list[int]
    chars: list[int]
    char2word: list[int]

    @property
    def n_words(self) -> int:
        return len(self.words)


def segment(words: Sequence[str], bpe: BpeModel) -> SegmentedSentence:
    words = list(words)
    if not words or any(not w for w in words):
        raise CorpusError("segment() needs non-empty words")
    sub, sub2word = bpe.encode_words(words)
    chars, char2word = [], []
    for w, word in enumerate(words):
        for c in word:
            chars.append(bpe.char_vocab.get(c, UNK))
            char2word.append(w)
    return SegmentedSentence(words, sub, sub2word, chars, char2word)


# ---------------------------------------------------------------- adjacency


@dataclass
class SparseAdjacency:
    n: int
    edges: frozenset
    normalized: np.ndarray


def normalize_adjacency(edges: Iterable[tuple[int, int]], n: int) -> np.ndarray:
    """D^-1/2 A D^-1/2 for an adjacency that already contains self-loops."""
    A = np.zeros((n, n))
    for i, j in edges:
        A[i, j] = 1.0
    if n and not np.all(np.diag(A) == 1.0):
        raise ValueError("adjacency must contain every self-loop")
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


def group_adjacency(owner: Sequence[int]) -> SparseAdjacency:
    """Connect every pair of positions with the same owner (self-loops included)."""
    owner = np.asarray(owner)
    same = owner[:, None] == owner[None, :]
    ii, jj = np.nonzero(same)
    edges = frozenset(zip(ii.tolist(), jj.tolist()))
    return SparseAdjacency(len(owner), edges, normalize_adjacency(edges, len(owner)))


def build_char_adjacency(s: SegmentedSentence) -> SparseAdjacency:
    return group_adjacency(s.char2word)


def build_subword_adjacency(s: SegmentedSentence) -> SparseAdjacency:
    return group_adjacency(s.sub2word)


def group_normalized(owner: np.ndarray) -> np.ndarray:
    """Vectorized normalized same-group adjacency, used on the batching hot path."""
    same = (owner[:, None] == owner[None, :]).astype(np.float64)
    d = 1.0 / np.sqrt(same.sum(axis=1))
    return same * d[:, None] * d[None, :]


# ---------------------------------------------------------------- relative positions


@dataclass
class RelPosIndexMatrix:
    n: int
    k: int
    indices: np.ndarray

    def embedding_rows(self) -> np.ndarray:
        """Map -k..k to rows 0..2k and OUT to the zero row 2k+1."""
        return np.where(self.indices == OUT, 2 * self.k + 1, self.indices + self.k)


def vanilla_relative_indices(L: int, k: int = 3) -> RelPosIndexMatrix:
    if k < 1:
        raise ValueError("window radius k must be >= 1")
    pos = np.arange(L)
    rel = pos[None, :] - pos[:, None]
    return RelPosIndexMatrix(L, k, np.where(np.abs(rel) <= k, rel, OUT).astype(np.int64))


def boundary_relative_indices_from(owner: Sequence[int], k: int = 3) -> RelPosIndexMatrix:
    if k < 1:
        raise ValueError("window radius k must be >= 1")
    owner = np.asarray(owner)
    pos = np.arange(len(owner))
    rel = pos[None, :] - pos[:, None]
    keep = (owner[:, None] == owner[None, :]) & (np.abs(rel) <= k)
    return RelPosIndexMatrix(len(owner), k, np.where(keep, rel, OUT).astype(np.int64))


def boundary_relative_indices(s: SegmentedSentence, k: int = 3) -> RelPosIndexMatrix:
    return boundary_relative_indices_from(s.char2word, k)


# ---------------------------------------------------------------- statistics


@dataclass
class LengthStats:
    char_counts: Counter
    subword_counts: Counter

    @property
    def n_words(self) -> int:
        return sum(self.char_counts.values())

    @property
    def frac_over_5_chars(self) -> float:
        n = self.n_words
        return sum(c for l, c in self.char_counts.items() if l > 5) / n if n else 0.0

    def write_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, counts in (("char", self.char_counts), ("subword", self.subword_counts)):
            with open(directory / f"{name}_lengths.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["length", "word_count"])
                for length in sorted(counts):
                    w.writerow([length, counts[length]])


def word_length_stats(corpus: Iterable[Sequence[str]], bpe: BpeModel | None = None) -> LengthStats:
    """Characters-per-word and subwords-per-word histograms over a corpus."""
    chars: Counter = Counter()
    subs: Counter = Counter()
    for sentence in corpus:
        for word in sentence:
            chars[len(word)] += 1
            subs[len(bpe.split_word(word)) if bpe else 1] += 1
    return LengthStats(chars, subs)


def read_corpus(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]
