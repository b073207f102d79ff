"""Page + annotation loading and cross-validation folds.

A dataset directory holds, per page, an image ``<id>.pgm`` (or ``.png``)
and an annotation file ``<id>.gt`` with one ``x y w h transcription`` line
per word.  Boxes are 0-indexed with a top-left origin.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import BBox, GrayImage, InvalidInput, load_gray, save_gray
from .phoc import PhocConfig, normalize_word

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthWord:
    page_id: str
    bbox: BBox
    transcription: str
    label: str  # normalized form used for matching

    @classmethod
    def make(cls, page_id: str, bbox: BBox, transcription: str, phoc_cfg: PhocConfig | None = None):
        return cls(page_id, bbox, transcription, normalize_word(transcription, phoc_cfg))


@dataclass
class Page:
    page_id: str
    image: GrayImage
    words: list[GroundTruthWord]


@dataclass
class FoldSplit:
    index: int
    train: list[str]
    test: list[str]


def parse_annotations(text: str, page_id: str, width: int, height: int, source: str = "<gt>",
                      phoc_cfg: PhocConfig | None = None) -> list[GroundTruthWord]:
    words = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(None, 4)
        if len(parts) < 5:
            raise DatasetError(f"{source}:{lineno}: expected 'x y w h transcription'")
        try:
            x, y, w, h = (int(v) for v in parts[:4])
            box = BBox(x, y, w, h)
        except (ValueError, InvalidInput) as exc:
            raise DatasetError(f"{source}:{lineno}: bad box ({exc})") from exc
        clipped = box.clip(width, height)
        if clipped is None:
            raise DatasetError(f"{source}:{lineno}: box lies outside the page")
        if clipped != box:
            log.warning("%s:%d: box %s clipped to the page", source, lineno, box.as_tuple())
        transcription = parts[4].strip()
        words.append(GroundTruthWord.make(page_id, clipped, transcription, phoc_cfg))
    return words


def format_annotations(words) -> str:
    return "".join(
        f"{w.bbox.x} {w.bbox.y} {w.bbox.w} {w.bbox.h} {w.transcription}\n" for w in words
    )


def _find_image(root: Path, page_id: str) -> Path | None:
    for suffix in IMAGE_SUFFIXES:
        p = root / f"{page_id}{suffix}"
        if p.exists():
            return p
    return None


def load_dataset(root, phoc_cfg: PhocConfig | None = None) -> dict[str, Page]:
    """All pages under ``root`` keyed by page id, in sorted id order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    pages = {}
    for gt_path in sorted(root.glob("*.gt")):
        page_id = gt_path.stem
        img_path = _find_image(root, page_id)
        if img_path is None:
            raise DatasetError(f"annotation {gt_path.name} has no matching image")
        img = load_gray(img_path)
        words = parse_annotations(
            gt_path.read_text(encoding="utf-8"), page_id, img.width, img.height, str(gt_path), phoc_cfg
        )
        pages[page_id] = Page(page_id, img, words)
    return pages


def save_dataset(pages, root, image_format: str = "pgm") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for page in pages.values() if isinstance(pages, dict) else pages:
        save_gray(page.image, root / f"{page.page_id}.{image_format}")
        (root / f"{page.page_id}.gt").write_text(format_annotations(page.words), encoding="utf-8")


def make_folds(page_ids, seed: int = 0, bins: int = 4) -> list[FoldSplit]:
    ids = sorted(page_ids)
    if not ids or len(ids) % bins:
        raise DatasetError(
            f"{len(ids)} pages cannot be split into {bins} equal bins (use --bins to change)"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    size = len(ids) // bins
    test_bins = [sorted(ids[i] for i in order[k * size : (k + 1) * size]) for k in range(bins)]
    folds = []
    for k, test in enumerate(test_bins):
        held = set(test)
        folds.append(FoldSplit(k, [p for p in ids if p not in held], test))
    return folds


def convert_corner_annotations(text: str, one_indexed: bool = False, source: str = "<gtp>") -> dict[str, str]:
    """Convert ``page x1 y1 x2 y2 word`` lines (inclusive corners) to per-page ``.gt`` text.

    This is the layout of the segmentation-free GW ground truth files in
    common circulation.  Corners are taken as 0-indexed with a top-left
    origin; pass ``one_indexed`` for sources that count from 1.  The page
    field may carry an image suffix, which is stripped.
    """
    shift = 1 if one_indexed else 0
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(None, 5)
        if len(parts) < 6:
            raise DatasetError(f"{source}:{lineno}: expected 'page x1 y1 x2 y2 word'")
        try:
            x1, y1, x2, y2 = (int(v) - shift for v in parts[1:5])
        except ValueError as exc:
            raise DatasetError(f"{source}:{lineno}: bad corner ({exc})") from exc
        if x2 < x1 or y2 < y1:
            raise DatasetError(f"{source}:{lineno}: corners are out of order")
        page_id = Path(parts[0]).stem
        out.setdefault(page_id, []).append(f"{x1} {y1} {x2 - x1 + 1} {y2 - y1 + 1} {parts[5].strip()}\n")
    return {pid: "".join(lines) for pid, lines in out.items()}
