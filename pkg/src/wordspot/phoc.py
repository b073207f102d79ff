"""Pyramidal histogram of characters (PHOC) encoding for strings.

A word of n characters is laid out on [0, 1]; character k occupies
[k/n, (k+1)/n].  At pyramid level L the unit interval is split into L
regions and a character sets the bit of every region that covers at least
``occupancy_overlap`` of its own interval.  Bigrams occupy the union of
their two characters' intervals.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"

DEFAULT_BIGRAMS = (
    "th he in er an re on at en nd ti es or te of ed is it al ar "
    "st to nt ng se ha as ou io le ve co me de hi ri ro ic ne ea "
    "ra ce li ch ll be ma si om ur"
).split()


class PhocError(ValueError):
    pass


@dataclass(frozen=True)
class PhocConfig:
    alphabet: str = DEFAULT_ALPHABET
    unigram_levels: tuple[int, ...] = (2, 3, 4, 5)
    bigrams: tuple[str, ...] = tuple(DEFAULT_BIGRAMS)
    bigram_levels: tuple[int, ...] = (2,)
    occupancy_overlap: float = 0.5

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise PhocError("alphabet contains duplicate characters")
        if any(level < 1 for level in self.unigram_levels + self.bigram_levels):
            raise PhocError("pyramid levels must be >= 1")
        if any(len(b) != 2 for b in self.bigrams):
            raise PhocError("bigrams must be two characters long")
        if not 0 < self.occupancy_overlap <= 1:
            raise PhocError("occupancy_overlap must lie in (0, 1]")
        object.__setattr__(self, "unigram_levels", tuple(self.unigram_levels))
        object.__setattr__(self, "bigram_levels", tuple(self.bigram_levels))
        object.__setattr__(self, "bigrams", tuple(self.bigrams))

    @property
    def dimension(self) -> int:
        return phoc_dimension(self)

    def to_dict(self) -> dict:
        return {
            "alphabet": self.alphabet,
            "unigram_levels": list(self.unigram_levels),
            "bigrams": list(self.bigrams),
            "bigram_levels": list(self.bigram_levels),
            "occupancy_overlap": self.occupancy_overlap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhocConfig":
        d = dict(d)
        for key in ("unigram_levels", "bigram_levels", "bigrams"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        """Short stable digest used to tag models and embedding stores."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def phoc_dimension(cfg: PhocConfig) -> int:
    return len(cfg.alphabet) * sum(cfg.unigram_levels) + len(cfg.bigrams) * sum(
        cfg.bigram_levels
    )


def normalize_word(word: str, cfg: PhocConfig | None = None) -> str:
    """Lowercase and drop every character that is not in the alphabet."""
    alphabet = (cfg or PhocConfig()).alphabet
    return "".join(ch for ch in word.lower() if ch in alphabet)


def occupancy(k: int, n: int) -> tuple[Fraction, Fraction]:
    if not 0 <= k < n:
        raise PhocError(f"character index {k} out of range for length {n}")
    return Fraction(k, n), Fraction(k + 1, n)


def in_region(char_iv, region_iv, overlap_frac) -> bool:
    lo = max(char_iv[0], region_iv[0])
    hi = min(char_iv[1], region_iv[1])
    overlap = max(hi - lo, 0)
    frac = Fraction(overlap_frac) if isinstance(overlap_frac, (int, float)) else overlap_frac
    return overlap >= frac * (char_iv[1] - char_iv[0])


def _regions_hit(start: int, stop: int, n: int, level: int, frac: Fraction) -> list[int]:
    # Span [start/n, stop/n] scaled by n*level becomes integers, so the
    # comparison below is exact.
    lo, hi = start * level, stop * level
    need = frac * (hi - lo)
    hits = []
    for r in range(lo // n, min(level, -(-hi // n))):
        overlap = min(hi, (r + 1) * n) - max(lo, r * n)
        if overlap > 0 and overlap >= need:
            hits.append(r)
    return hits


def encode_string(word: str, cfg: PhocConfig | None = None) -> np.ndarray:
    """Binary PHOC of ``word`` as a float32 vector of length ``cfg.dimension``."""
    cfg = cfg or PhocConfig()
    w = normalize_word(word, cfg)
    if not w:
        raise PhocError(f"word {word!r} is empty after normalization")
    n = len(w)
    frac = Fraction(cfg.occupancy_overlap).limit_denominator(10**6)
    char_index = {c: i for i, c in enumerate(cfg.alphabet)}
    n_chars = len(cfg.alphabet)

    out = np.zeros(phoc_dimension(cfg), dtype=np.float32)
    offset = 0
    for level in cfg.unigram_levels:
        for k, ch in enumerate(w):
            for r in _regions_hit(k, k + 1, n, level, frac):
                out[offset + r * n_chars + char_index[ch]] = 1.0
        offset += level * n_chars

    bigram_index = {b: i for i, b in enumerate(cfg.bigrams)}
    n_bigrams = len(cfg.bigrams)
    for level in cfg.bigram_levels:
        for k in range(n - 1):
            j = bigram_index.get(w[k : k + 2])
            if j is None:
                continue
            for r in _regions_hit(k, k + 2, n, level, frac):
                out[offset + r * n_bigrams + j] = 1.0
        offset += level * n_bigrams
    return out


def describe(vec: np.ndarray, cfg: PhocConfig | None = None) -> list[str]:
    """Human readable names of the set bits, e.g. ``L2r0:b`` or ``B2r1:th``."""
    cfg = cfg or PhocConfig()
    names = []
    for level in cfg.unigram_levels:
        for r in range(level):
            names.extend(f"L{level}r{r}:{c}" for c in cfg.alphabet)
    for level in cfg.bigram_levels:
        for r in range(level):
            names.extend(f"B{level}r{r}:{b}" for b in cfg.bigrams)
    return [names[i] for i in np.flatnonzero(vec > 0.5)]
