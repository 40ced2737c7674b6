"""Synthetic toy corpora for desk-scale experiments."""

from __future__ import annotations

import random

CONSONANTS = "bdfgklmnprstvz"
BACK_VOWELS = "aou"
FRONT_VOWELS = "eiy"

# tag -> (suffix after a back-vowel stem, suffix after a front-vowel stem)
MORPHEMES = {
    "SG": ("", ""),
    "PL": ("lar", "ler"),
    "LOC": ("da", "de"),
    "ABL": ("dan", "den"),
    "GEN": ("nun", "nin"),
}


def copy_corpus(n_pairs: int = 50, vocab: int = 30, min_len: int = 3, max_len: int = 12,
                seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Pairs whose target equals the source, over ``vocab`` distinct word types."""
    rng = random.Random(seed)
    words = [f"w{i}" for i in range(vocab)]
    out = []
    for _ in range(n_pairs):
        s = [rng.choice(words) for _ in range(rng.randint(min_len, max_len))]
        out.append((s, list(s)))
    return out


def _stem(rng: random.Random) -> str:
    vowels = rng.choice([BACK_VOWELS, FRONT_VOWELS])
    n = rng.randint(1, 3)
    return "".join(rng.choice(CONSONANTS) + rng.choice(vowels) for _ in range(n)) + rng.choice(CONSONANTS)


def harmony(stem: str) -> int:
    """0 for back-vowel stems, 1 for front-vowel stems (decided by the last vowel)."""
    for ch in reversed(stem):
        if ch in BACK_VOWELS:
            return 0
        if ch in FRONT_VOWELS:
            return 1
    return 0


def inflect(stem: str, tag: str) -> str:
    return stem + MORPHEMES[tag][harmony(stem)]


def held_out_forms(stems: list[str], fraction: float, seed: int) -> set[tuple[str, str]]:
    """A seeded subset of (stem, tag) combinations reserved for evaluation."""
    forms = sorted((s, t) for s in stems for t in MORPHEMES)
    rng = random.Random(seed)
    return set(rng.sample(forms, round(fraction * len(forms))))


def reversal_morphology_corpus(n_pairs: int = 2000, n_stems: int = 80, min_len: int = 3, max_len: int = 8,
                               seed: int = 0, stem_seed: int = 1234, holdout: float = 0.0,
                               split: str = "train") -> list[tuple[list[str], list[str]]]:
    """Inflected words in; reversed word order out, each word as ``stem TAG``.

    Suffix spelling follows vowel harmony of the stem, so the tag is
    recoverable from characters while subword merges often straddle the
    stem/suffix boundary.  ``stem_seed`` fixes the lexicon so that train and
    dev splits drawn with different ``seed`` share it.  With ``holdout > 0``
    that fraction of (stem, tag) forms never occurs in the train split and
    the dev split uses only those forms.
    """
    if split not in ("train", "dev"):
        raise ValueError("split must be 'train' or 'dev'")
    lex_rng = random.Random(stem_seed)
    stems = sorted({_stem(lex_rng) for _ in range(n_stems)})
    held = held_out_forms(stems, holdout, stem_seed) if holdout > 0 else set()
    forms = [(s, t) for s in stems for t in MORPHEMES]
    if held:
        forms = sorted(held) if split == "dev" else [f for f in forms if f not in held]
    rng = random.Random(seed)
    out = []
    for _ in range(n_pairs):
        words = [rng.choice(forms) for _ in range(rng.randint(min_len, max_len))]
        src = [inflect(s, t) for s, t in words]
        tgt = [tok for s, t in reversed(words) for tok in (s, t)]
        out.append((src, tgt))
    return out
