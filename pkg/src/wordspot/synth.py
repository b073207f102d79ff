"""Synthetic handwriting-like pages with exact word boxes.

Glyphs come from a built-in 5x9 bitmap font: rows 0-1 hold ascenders and
i/j dots, rows 2-6 the x-height band (row 6 is the baseline), rows 7-8
descenders.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import GroundTruthWord, Page
from .imaging import BBox, GrayImage
from .phoc import PhocConfig, normalize_word

GLYPH_W, GLYPH_H = 5, 9

_FONT_SRC = {
    "a": ".....|.....|.###.|....#|.####|#...#|.####|.....|.....",
    "b": "#....|#....|####.|#...#|#...#|#...#|####.|.....|.....",
    "c": ".....|.....|.####|#....|#....|#....|.####|.....|.....",
    "d": "....#|....#|.####|#...#|#...#|#...#|.####|.....|.....",
    "e": ".....|.....|.###.|#...#|#####|#....|.###.|.....|.....",
    "f": "..##.|.#...|####.|.#...|.#...|.#...|.#...|.....|.....",
    "g": ".....|.....|.####|#...#|#...#|#...#|.####|....#|####.",
    "h": "#....|#....|####.|#...#|#...#|#...#|#...#|.....|.....",
    "i": "..#..|.....|.##..|..#..|..#..|..#..|.###.|.....|.....",
    "j": "...#.|.....|..##.|...#.|...#.|...#.|...#.|#..#.|.##..",
    "k": "#....|#....|#..#.|#.#..|##...|#.#..|#..#.|.....|.....",
    "l": ".##..|..#..|..#..|..#..|..#..|..#..|.###.|.....|.....",
    "m": ".....|.....|##.#.|#.#.#|#.#.#|#.#.#|#.#.#|.....|.....",
    "n": ".....|.....|####.|#...#|#...#|#...#|#...#|.....|.....",
    "o": ".....|.....|.###.|#...#|#...#|#...#|.###.|.....|.....",
    "p": ".....|.....|####.|#...#|#...#|#...#|####.|#....|#....",
    "q": ".....|.....|.####|#...#|#...#|#...#|.####|....#|....#",
    "r": ".....|.....|#.##.|##..#|#....|#....|#....|.....|.....",
    "s": ".....|.....|.####|#....|.###.|....#|####.|.....|.....",
    "t": ".#...|.#...|####.|.#...|.#...|.#..#|..##.|.....|.....",
    "u": ".....|.....|#...#|#...#|#...#|#..##|.##.#|.....|.....",
    "v": ".....|.....|#...#|#...#|#...#|.#.#.|..#..|.....|.....",
    "w": ".....|.....|#...#|#...#|#.#.#|#.#.#|.#.#.|.....|.....",
    "x": ".....|.....|#...#|.#.#.|..#..|.#.#.|#...#|.....|.....",
    "y": ".....|.....|#...#|#...#|#...#|#...#|.####|....#|.###.",
    "z": ".....|.....|#####|...#.|..#..|.#...|#####|.....|.....",
    "0": ".###.|#...#|#..##|#.#.#|##..#|#...#|.###.|.....|.....",
    "1": "..#..|.##..|..#..|..#..|..#..|..#..|.###.|.....|.....",
    "2": ".###.|#...#|....#|...#.|..#..|.#...|#####|.....|.....",
    "3": "####.|....#|....#|.###.|....#|....#|####.|.....|.....",
    "4": "...#.|..##.|.#.#.|#..#.|#####|...#.|...#.|.....|.....",
    "5": "#####|#....|####.|....#|....#|#...#|.###.|.....|.....",
    "6": "..##.|.#...|#....|####.|#...#|#...#|.###.|.....|.....",
    "7": "#####|....#|...#.|..#..|.#...|.#...|.#...|.....|.....",
    "8": ".###.|#...#|#...#|.###.|#...#|#...#|.###.|.....|.....",
    "9": ".###.|#...#|#...#|.####|....#|...#.|.##..|.....|.....",
}

FONT = {
    ch: np.array([[c == "#" for c in row] for row in src.split("|")], dtype=bool)
    for ch, src in _FONT_SRC.items()
}

DEFAULT_LEXICON = (
    "about after again army before could country enemy every first general great "
    "house letter little might never officer order other people place right should "
    "since small their there these think those under until water which would young "
    "state where orders sent march letters company captain"
).split()


@dataclass
class SynthSpec:
    lexicon: list[str] = field(default_factory=lambda: list(DEFAULT_LEXICON))
    pages: int = 20
    lines_per_page: int = 6
    words_per_line: int = 4
    glyph_scale: tuple[int, int] = (2, 2)
    letter_spacing: int = 1  # blank glyph columns between letters, before scaling
    noise: float = 8.0  # std of additive Gaussian intensity noise
    baseline_jitter: int = 2  # max vertical offset of a word, pixels
    word_gap: tuple[int, int] = (22, 34)  # pixels between words
    line_gap: int = 16  # blank pixels between the glyph cells of consecutive lines
    margin: int = 16
    ink: tuple[int, int] = (20, 70)
    paper: tuple[int, int] = (215, 235)
    seed: int = 0

    def __post_init__(self):
        self.glyph_scale = tuple(self.glyph_scale)
        self.word_gap = tuple(self.word_gap)
        self.ink = tuple(self.ink)
        self.paper = tuple(self.paper)
        self.lexicon = list(self.lexicon)
        if self.glyph_scale[0] < 1 or self.glyph_scale[0] > self.glyph_scale[1]:
            raise ValueError("glyph_scale must be an increasing pair of positive integers")
        if self.word_gap[0] <= self.letter_spacing * self.glyph_scale[1]:
            raise ValueError("word gaps must exceed the spacing between letters")
        for w in self.lexicon:
            missing = set(w.lower()) - set(FONT)
            if missing:
                raise ValueError(f"lexicon word {w!r} uses glyphs without a bitmap: {sorted(missing)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**d)


def word_mask(word: str, scale: int, spacing: int = 1) -> np.ndarray:
    """Ink mask of a word in the glyph cell (height 9*scale, no side bearings)."""
    cols = []
    for k, ch in enumerate(word.lower()):
        if k:
            cols.append(np.zeros((GLYPH_H, spacing), dtype=bool))
        cols.append(FONT[ch])
    mask = np.concatenate(cols, axis=1)
    return np.kron(mask, np.ones((scale, scale), dtype=bool))


def render_synthetic(spec: SynthSpec, phoc_cfg: PhocConfig | None = None) -> dict[str, Page]:
    rng = np.random.default_rng(spec.seed)
    pages = {}
    digits = max(2, len(str(spec.pages)))
    for p in range(spec.pages):
        page_id = f"p{p + 1:0{digits}d}"
        lines = []
        for _ in range(spec.lines_per_page):
            line = []
            for _ in range(spec.words_per_line):
                word = spec.lexicon[rng.integers(len(spec.lexicon))]
                scale = int(rng.integers(spec.glyph_scale[0], spec.glyph_scale[1] + 1))
                gap = int(rng.integers(spec.word_gap[0], spec.word_gap[1] + 1))
                jitter = int(rng.integers(-spec.baseline_jitter, spec.baseline_jitter + 1))
                ink = int(rng.integers(spec.ink[0], spec.ink[1] + 1))
                line.append((word, word_mask(word, scale, spec.letter_spacing), gap, jitter, ink))
            lines.append(line)

        cell_h = GLYPH_H * spec.glyph_scale[1]
        pitch = cell_h + spec.line_gap
        line_w = [sum(m.shape[1] for _, m, _, _, _ in ln) + sum(g for _, _, g, _, _ in ln[:-1]) for ln in lines]
        width = 2 * spec.margin + max(line_w)
        height = 2 * spec.margin + spec.lines_per_page * pitch - spec.line_gap + 2 * spec.baseline_jitter
        paper = int(rng.integers(spec.paper[0], spec.paper[1] + 1))
        canvas = np.full((height, width), float(paper))

        words = []
        for li, line in enumerate(lines):
            x = spec.margin
            top = spec.margin + spec.baseline_jitter + li * pitch
            for word, mask, gap, jitter, ink in line:
                # Align baselines: cells of smaller glyphs sit on the same bottom edge.
                y = top + cell_h - mask.shape[0] + jitter
                region = canvas[y : y + mask.shape[0], x : x + mask.shape[1]]
                region[mask] = ink
                rows = np.flatnonzero(mask.any(axis=1))
                cols = np.flatnonzero(mask.any(axis=0))
                box = BBox(
                    x + int(cols[0]),
                    y + int(rows[0]),
                    int(cols[-1] - cols[0] + 1),
                    int(rows[-1] - rows[0] + 1),
                )
                words.append(GroundTruthWord(page_id, box, word, normalize_word(word, phoc_cfg)))
                x += mask.shape[1] + gap
        if spec.noise > 0:
            canvas += rng.normal(0.0, spec.noise, canvas.shape)
        pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        pages[page_id] = Page(page_id, GrayImage(pixels), words)
    return pages
