"""Tiling, minibatch sampling and SGD training for the region PHOC network."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..imaging import BBox, GrayImage
from ..phoc import PhocConfig, encode_string
from ..proposals import iou_matrix
from .model import RegionPhocNet, default_arch

log = logging.getLogger(__name__)


class SkipTile(Exception):
    """The tile has no usable positive ROI; pick another one."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TileConfig:
    """Tile geometry; a TrainConfig carries the same three fields."""

    tile_w: int = 600
    tile_h: int = 1000
    tile_overlap: int = 100

    def __post_init__(self):
        if not 0 <= self.tile_overlap < min(self.tile_w, self.tile_h):
            raise ValueError("tile_overlap must be smaller than both tile sides")


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_step: int = 1000
    lr_gamma: float = 0.9
    iterations: int = 30000
    batch_rois: int = 128
    positive_fraction: float = 0.6
    iou_pos: float = 0.5
    iou_bg: float = 0.2
    tile_w: int = 600
    tile_h: int = 1000
    tile_overlap: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"  # "sgd" (with momentum) or "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in (0, 1]")
        if not self.iou_bg < self.iou_pos:
            raise ValueError("iou_bg must be below iou_pos")
        if not 0 <= self.tile_overlap < min(self.tile_w, self.tile_h):
            raise ValueError("tile_overlap must be smaller than both tile sides")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def tiles(self) -> TileConfig:
        return TileConfig(self.tile_w, self.tile_h, self.tile_overlap)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_gamma ** (it // cfg.lr_step)


def _starts(extent: int, size: int, stride: int) -> list[int]:
    if extent <= size:
        return [0]
    out = [0]
    while out[-1] + size < extent:
        out.append(min(out[-1] + stride, extent - size))
    return out


def tile_page(page: GrayImage | tuple[int, int], cfg: TileConfig | TrainConfig) -> list[BBox]:
    """Overlapping tile rectangles covering the page; the last row/column is clamped to the edge."""
    if isinstance(page, GrayImage):
        width, height = page.width, page.height
    else:
        width, height = page
    tw, th = min(cfg.tile_w, width), min(cfg.tile_h, height)
    xs = _starts(width, tw, cfg.tile_w - cfg.tile_overlap)
    ys = _starts(height, th, cfg.tile_h - cfg.tile_overlap)
    return [BBox(x, y, tw, th) for y in ys for x in xs]


def crop(page: GrayImage, box: BBox) -> GrayImage:
    return GrayImage(page.pixels[box.y : box.y2, box.x : box.x2])


def assign_to_tiles(boxes, tiles: list[BBox]) -> np.ndarray:
    """Tile index per box: the containing tile whose centre is nearest; -1 if none contains it."""
    out = np.full(len(boxes), -1, dtype=np.int64)
    for k, box in enumerate(boxes):
        cx, cy = box.center
        best, best_d = -1, math.inf
        for t, tile in enumerate(tiles):
            if tile.contains(box):
                tx, ty = tile.center
                d = (tx - cx) ** 2 + (ty - cy) ** 2
                if d < best_d:
                    best, best_d = t, d
        out[k] = best
    return out


def sample_minibatch(max_ious: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Indices of a minibatch: at least ceil(fraction * batch) positives, the rest background.

    Positives have IoU > iou_pos, background IoU < iou_bg; the band between is
    never drawn.  Pools smaller than their quota are drawn with replacement.
    """
    max_ious = np.asarray(max_ious)
    pos = np.flatnonzero(max_ious > cfg.iou_pos)
    bg = np.flatnonzero(max_ious < cfg.iou_bg)
    if pos.size == 0:
        raise SkipTile("no positive candidates in this tile")
    n_pos = math.ceil(cfg.positive_fraction * cfg.batch_rois)
    n_bg = cfg.batch_rois - n_pos
    if bg.size == 0:
        n_pos, n_bg = cfg.batch_rois, 0

    def draw(pool, k):
        return rng.choice(pool, size=k, replace=pool.size < k)

    picks = [draw(pos, n_pos)]
    if n_bg:
        picks.append(draw(bg, n_bg))
    return np.concatenate(picks)


@dataclass
class TrainPage:
    page_id: str
    image: GrayImage
    words: list  # (BBox, normalized transcription)
    candidates: list[BBox]


@dataclass
class _Tile:
    x: np.ndarray  # normalized (1, h, w)
    boxes: np.ndarray  # (K, 4) in tile coordinates
    max_iou: np.ndarray
    targets: np.ndarray  # (K, dim)


def _build_tiles(pages, cfg: TrainConfig, phoc_cfg: PhocConfig, input_mean: float, dtype):
    cache: dict[str, np.ndarray] = {}
    dim = phoc_cfg.dimension
    tiles = []
    dropped = 0
    for page in pages:
        if not page.candidates:
            continue
        gt_boxes = [w[0] for w in page.words]
        if gt_boxes:
            ious = iou_matrix(page.candidates, gt_boxes)
            best = ious.argmax(axis=1)
            max_iou = ious[np.arange(len(page.candidates)), best]
        else:
            best = np.zeros(len(page.candidates), dtype=np.int64)
            max_iou = np.zeros(len(page.candidates))
        rects = tile_page(page.image, cfg)
        where = assign_to_tiles(page.candidates, rects)
        dropped += int((where < 0).sum())
        for t, rect in enumerate(rects):
            idx = np.flatnonzero(where == t)
            if idx.size == 0:
                continue
            targets = np.zeros((idx.size, dim), dtype=dtype)
            for row, k in enumerate(idx):
                if max_iou[k] > cfg.iou_pos:
                    label = page.words[best[k]][1]
                    if label not in cache:
                        cache[label] = encode_string(label, phoc_cfg)
                    targets[row] = cache[label]
            boxes = np.array(
                [page.candidates[k].shift(-rect.x, -rect.y).as_tuple() for k in idx], dtype=np.int64
            )
            px = crop(page.image, rect).pixels.astype(dtype) / dtype(255.0) - dtype(input_mean)
            tiles.append(_Tile(px[None], boxes, max_iou[idx], targets))
    if dropped:
        log.warning("%d training candidates fit in no tile and were dropped", dropped)
    return tiles


@dataclass
class TrainResult:
    model: RegionPhocNet
    losses: list[float] = field(default_factory=list)
    skipped_tiles: int = 0


def train(
    pages: list[TrainPage],
    cfg: TrainConfig,
    phoc_cfg: PhocConfig | None = None,
    arch: dict | None = None,
    init: RegionPhocNet | None = None,
    progress=None,
) -> TrainResult:
    """Plain SGD (with optional momentum) on the summed per-ROI PHOC loss.

    Every iteration draws one tile, samples a minibatch from its candidates,
    and takes one step.  Results are reproducible for a fixed ``cfg.seed``.
    """
    phoc_cfg = phoc_cfg or PhocConfig()
    dtype = np.dtype(cfg.dtype).type
    if init is not None:
        model = init.astype(dtype)
    else:
        arch = dict(arch or default_arch(phoc_cfg.dimension, phoc_cfg.hash))
        arch["out_dim"] = phoc_cfg.dimension
        arch["phoc_hash"] = phoc_cfg.hash
        arch["input_mean"] = float(
            np.mean([p.image.pixels.mean(dtype=np.float64) for p in pages]) / 255.0
        ) if pages else 0.0
        model = RegionPhocNet.initialize(arch, seed=cfg.seed, dtype=dtype)
    if model.arch.get("phoc_hash") != phoc_cfg.hash:
        raise ValueError("model was built for a different PHOC configuration")

    tiles = _build_tiles(pages, cfg, phoc_cfg, model.arch["input_mean"], dtype)
    usable = [t for t in tiles if np.any(t.max_iou > cfg.iou_pos)]
    result = TrainResult(model)
    if cfg.iterations and not usable:
        raise ValueError("no training tile contains a positive candidate")

    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    second = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2 = cfg.adam_betas
    for it in range(cfg.iterations):
        while True:
            tile = usable[rng.integers(len(usable))]
            try:
                idx = sample_minibatch(tile.max_iou, cfg, rng)
                break
            except SkipTile:
                result.skipped_tiles += 1
        loss, grads, _ = model.loss_and_grads(tile.x, tile.boxes[idx], tile.targets[idx])
        lr = lr_schedule(it, cfg)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it} (lr={lr:g})")
        for k, p in model.params.items():
            g = grads[k]
            if cfg.weight_decay:
                g = g + dtype(cfg.weight_decay) * p
            v = velocity[k]
            if cfg.optimizer == "adam":
                m2 = second[k]
                v *= dtype(b1)
                v += dtype(1 - b1) * g
                m2 *= dtype(b2)
                m2 += dtype(1 - b2) * g * g
                step = lr * math.sqrt(1 - b2 ** (it + 1)) / (1 - b1 ** (it + 1))
                p -= dtype(step) * v / (np.sqrt(m2) + dtype(1e-8))
            else:
                v *= dtype(cfg.momentum)
                v -= dtype(lr) * g
                p += v
            if not np.isfinite(p).all():
                raise TrainingDiverged(f"{k} became non-finite at iteration {it} (lr={lr:g})")
        result.losses.append(loss)
        if progress is not None:
            progress(it, loss, lr)
    return result
