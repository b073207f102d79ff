"""Embedding store, nearest-neighbour queries, and mAP evaluation."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .imaging import BBox, GrayImage
from .net.model import RegionPhocNet
from .net.train import TileConfig, assign_to_tiles, crop, tile_page
from .phoc import PhocConfig, encode_string, normalize_word
from .proposals import iou, iou_matrix

log = logging.getLogger(__name__)

STORE_MAGIC = b"RPHE"


class IncompatibleEncoding(ValueError):
    pass


class UndefinedDistance(ValueError):
    pass


@dataclass
class EmbeddingStore:
    page_ids: list[str]
    boxes: np.ndarray  # (N, 4) int32, x y w h in page coordinates
    vectors: np.ndarray  # (N, dim) float32
    phoc_hash: str
    dropped: int = 0

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.int32).reshape(-1, 4)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.boxes) != len(self.page_ids):
            raise ValueError("store records are inconsistent")
        self.boxes.setflags(write=False)
        self.vectors.setflags(write=False)
        self._order_key = None

    def __len__(self) -> int:
        return len(self.page_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def bbox(self, i: int) -> BBox:
        return BBox(*(int(v) for v in self.boxes[i]))

    def tie_order(self) -> np.ndarray:
        """Rank of each record under (page_id, x, y, w, h) ordering."""
        if self._order_key is None:
            pages = np.array(self.page_ids, dtype=object)
            _, page_rank = np.unique(pages, return_inverse=True) if len(pages) else (None, np.zeros(0, int))
            keys = (self.boxes[:, 3], self.boxes[:, 2], self.boxes[:, 1], self.boxes[:, 0], page_rank)
            order = np.lexsort(keys)
            rank = np.empty(len(order), dtype=np.int64)
            rank[order] = np.arange(len(order))
            self._order_key = rank
        return self._order_key

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"phoc_hash": self.phoc_hash, "dim": self.dim, "count": len(self)}, sort_keys=True
        ).encode("utf-8")
        parts = [STORE_MAGIC, struct.pack("<I", len(header)), header]
        for pid, box, vec in zip(self.page_ids, self.boxes, self.vectors):
            name = pid.encode("utf-8")
            parts.append(struct.pack("<I", len(name)))
            parts.append(name)
            parts.append(box.astype("<i4").tobytes())
            parts.append(vec.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != STORE_MAGIC:
            raise ValueError(f"{path}: not an embedding store")
        (hlen,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8 : 8 + hlen])
        dim, count = header["dim"], header["count"]
        off = 8 + hlen
        page_ids, boxes, vectors = [], np.zeros((count, 4), np.int32), np.zeros((count, dim), np.float32)
        for i in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            page_ids.append(data[off : off + n].decode("utf-8"))
            off += n
            boxes[i] = np.frombuffer(data, "<i4", 4, off)
            off += 16
            vectors[i] = np.frombuffer(data, "<f4", dim, off)
            off += 4 * dim
        return cls(page_ids, boxes, vectors, header["phoc_hash"])


def _check_compat(model: RegionPhocNet, phoc_cfg: PhocConfig | None):
    if phoc_cfg is not None and model.arch.get("phoc_hash") != phoc_cfg.hash:
        raise IncompatibleEncoding(
            f"model encodes PHOC {model.arch.get('phoc_hash')}, requested {phoc_cfg.hash}"
        )


def embed_regions(model: RegionPhocNet, image: GrayImage, boxes: list[BBox], tile_cfg: TileConfig):
    """PHOC probabilities for page boxes; one trunk pass per tile.

    Returns (vectors, kept) where ``kept`` flags boxes that fit in some tile.
    """
    dim = model.arch["out_dim"]
    out = np.zeros((len(boxes), dim), dtype=np.float32)
    if not boxes:
        return out, np.zeros(0, dtype=bool)
    tiles = tile_page(image, tile_cfg)
    where = assign_to_tiles(boxes, tiles)
    for t, rect in enumerate(tiles):
        idx = np.flatnonzero(where == t)
        if idx.size == 0:
            continue
        rois = [boxes[k].shift(-rect.x, -rect.y) for k in idx]
        out[idx] = model.forward(crop(image, rect), rois)
    return out, where >= 0


def embed_pages(model, pages, candidates, tile_cfg: TileConfig | None = None,
                phoc_cfg: PhocConfig | None = None) -> EmbeddingStore:
    """``pages``: page_id -> GrayImage (or Page); ``candidates``: page_id -> list of BBox."""
    _check_compat(model, phoc_cfg)
    tile_cfg = tile_cfg or TileConfig()
    page_ids, boxes, vecs = [], [], []
    dropped = 0
    for pid in sorted(candidates):
        cands = candidates[pid]
        if not cands:
            continue
        page = pages[pid]
        image = getattr(page, "image", page)
        v, kept = embed_regions(model, image, cands, tile_cfg)
        dropped += int((~kept).sum())
        for k in np.flatnonzero(kept):
            page_ids.append(pid)
            boxes.append(cands[k].as_tuple())
            vecs.append(v[k])
    if dropped:
        log.warning("%d candidates fit in no tile and were not embedded", dropped)
    dim = model.arch["out_dim"]
    return EmbeddingStore(
        page_ids,
        np.array(boxes, dtype=np.int32).reshape(-1, 4),
        np.array(vecs, dtype=np.float32).reshape(-1, dim),
        model.arch.get("phoc_hash", ""),
        dropped,
    )


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors differ in dimension")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedDistance("cosine distance is undefined for a zero vector")
    return float(1.0 - (a @ b) / (na * nb))


def distances(query, store: EmbeddingStore, metric: str = "cosine") -> np.ndarray:
    """Distance from ``query`` to every stored vector; zero vectors get +inf."""
    q = np.asarray(query, dtype=np.float64)
    V = store.vectors.astype(np.float64)
    if metric == "euclidean":
        return np.linalg.norm(V - q, axis=1)
    if metric != "cosine":
        raise ValueError(f"unknown metric {metric!r}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise UndefinedDistance("query vector is all zeros")
    norms = np.linalg.norm(V, axis=1)
    d = np.full(len(V), np.inf)
    ok = norms > 0
    d[ok] = 1.0 - (V[ok] @ q) / (norms[ok] * qn)
    return d


@dataclass
class RankedList:
    indices: np.ndarray
    distances: np.ndarray

    def to_records(self, store: EmbeddingStore, top: int | None = None) -> list[dict]:
        n = len(self.indices) if top is None else min(top, len(self.indices))
        recs = []
        for i, d in zip(self.indices[:n], self.distances[:n]):
            x, y, w, h = (int(v) for v in store.boxes[i])
            recs.append({"page_id": store.page_ids[i], "x": x, "y": y, "w": w, "h": h,
                         "distance": float(d)})
        return recs


def rank(query, store: EmbeddingStore, metric: str = "cosine") -> RankedList:
    d = distances(query, store, metric)
    order = np.lexsort((store.tie_order(), d))
    return RankedList(order, d[order])


def query_by_example(page_image: GrayImage, bbox: BBox, model: RegionPhocNet,
                     store: EmbeddingStore, tile_cfg: TileConfig | None = None,
                     metric: str = "cosine") -> RankedList:
    if model.arch.get("phoc_hash") != store.phoc_hash:
        raise IncompatibleEncoding("model and store use different PHOC encodings")
    v, kept = embed_regions(model, page_image, [bbox], tile_cfg or TileConfig())
    if not kept[0]:
        raise ValueError(f"query box {bbox.as_tuple()} fits in no tile")
    return rank(v[0], store, metric)


def query_by_string(word: str, store: EmbeddingStore, phoc_cfg: PhocConfig | None = None,
                    metric: str = "cosine") -> RankedList:
    phoc_cfg = phoc_cfg or PhocConfig()
    if phoc_cfg.hash != store.phoc_hash:
        raise IncompatibleEncoding("store was built for a different PHOC configuration")
    return rank(encode_string(word, phoc_cfg), store, metric)


def relevance_flags(ranked_boxes, query_label: str, gt_words, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy top-down matching: each ground-truth word can make at most one hit relevant.

    ``ranked_boxes`` is a sequence of (page_id, BBox); ``gt_words`` holds
    objects with ``page_id``, ``bbox`` and ``label``.
    """
    by_page: dict[str, list] = {}
    for g in gt_words:
        if g.label == query_label:
            by_page.setdefault(g.page_id, []).append(g.bbox)
    used = {pid: np.zeros(len(bs), dtype=bool) for pid, bs in by_page.items()}
    flags = np.zeros(len(ranked_boxes), dtype=bool)
    for k, (pid, box) in enumerate(ranked_boxes):
        cands = by_page.get(pid)
        if not cands:
            continue
        for j, g in enumerate(cands):
            if not used[pid][j] and iou(box, g) >= iou_thr:
                used[pid][j] = True
                flags[k] = True
                break
    return flags


def relevance_judgement(retrieved, query_label: str, gt_words, iou_thr: float = 0.5,
                        matched: set | None = None) -> bool:
    """Whether one retrieved (page_id, BBox) hits an unmatched same-label ground-truth word.

    Pass the same ``matched`` set while walking down a ranked list to apply
    the single-match rule.
    """
    pid, box = retrieved
    matched = matched if matched is not None else set()
    for j, g in enumerate(gt_words):
        if g.page_id != pid or g.label != query_label or j in matched:
            continue
        if iou(box, g.bbox) >= iou_thr:
            matched.add(j)
            return True
    return False


def average_precision(flags, n_relevant: int) -> float:
    if n_relevant < 1:
        raise ValueError("average precision needs at least one relevant item")
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return 0.0
    hits = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    return float((hits[flags] / ranks[flags]).sum() / n_relevant)


@dataclass
class EvalReport:
    mode: str
    ap: list[float] = field(default_factory=list)
    queries: list[dict] = field(default_factory=list)
    skipped: int = 0
    by_length: dict[str, float] = field(default_factory=dict)
    long_word_map: float | None = None
    iou_thr: float = 0.5

    @property
    def map(self) -> float:
        return float(np.mean(self.ap)) if self.ap else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "mAP": self.map,
            "query_count": len(self.ap),
            "skipped_queries": self.skipped,
            "long_word_mAP": self.long_word_map,
            "by_length": self.by_length,
            "iou_thr": self.iou_thr,
            "queries": self.queries,
        }


def _summarize(report: EvalReport, min_long: int = 6) -> EvalReport:
    lengths: dict[int, list[float]] = {}
    for q, ap in zip(report.queries, report.ap):
        lengths.setdefault(len(q["label"]), []).append(ap)
    report.by_length = {str(n): float(np.mean(v)) for n, v in sorted(lengths.items())}
    long_aps = [ap for q, ap in zip(report.queries, report.ap) if len(q["label"]) >= min_long]
    report.long_word_map = float(np.mean(long_aps)) if long_aps else None
    return report


def _ranked_boxes(store: EmbeddingStore, order: np.ndarray):
    return [(store.page_ids[i], store.bbox(i)) for i in order]


def evaluate_qbe(model: RegionPhocNet, pages, store: EmbeddingStore, gt_words,
                 tile_cfg: TileConfig | None = None, iou_thr: float = 0.5,
                 exclude_self: bool = False, metric: str = "cosine") -> EvalReport:
    """Every ground-truth word of the store's pages is a query, embedded from its own box."""
    if model.arch.get("phoc_hash") != store.phoc_hash:
        raise IncompatibleEncoding("model and store use different PHOC encodings")
    tile_cfg = tile_cfg or TileConfig()
    report = EvalReport("qbe", iou_thr=iou_thr)
    by_page: dict[str, list] = {}
    for g in gt_words:
        by_page.setdefault(g.page_id, []).append(g)
    counts: dict[str, int] = {}
    for g in gt_words:
        counts[g.label] = counts.get(g.label, 0) + 1
    for pid in sorted(by_page):
        words = by_page[pid]
        page = pages[pid]
        image = getattr(page, "image", page)
        vecs, kept = embed_regions(model, image, [g.bbox for g in words], tile_cfg)
        for g, v, ok in zip(words, vecs, kept):
            n_rel = counts[g.label] - (1 if exclude_self else 0)
            if not ok or n_rel < 1:
                report.skipped += 1
                continue
            ranked = rank(v, store, metric)
            boxes = _ranked_boxes(store, ranked.indices)
            pool = [w for w in gt_words if not (exclude_self and w is g)]
            flags = relevance_flags(boxes, g.label, pool, iou_thr)
            report.ap.append(average_precision(flags, n_rel))
            report.queries.append({"page_id": pid, "bbox": list(g.bbox.as_tuple()),
                                   "label": g.label, "relevant": n_rel,
                                   "ap": report.ap[-1]})
    return _summarize(report)


def evaluate_qbs(store: EmbeddingStore, gt_words, phoc_cfg: PhocConfig | None = None,
                 iou_thr: float = 0.5, metric: str = "cosine") -> EvalReport:
    """One query per distinct ground-truth label."""
    phoc_cfg = phoc_cfg or PhocConfig()
    report = EvalReport("qbs", iou_thr=iou_thr)
    counts: dict[str, int] = {}
    for g in gt_words:
        counts[g.label] = counts.get(g.label, 0) + 1
    for label in sorted(counts):
        if not label:
            report.skipped += 1
            continue
        ranked = query_by_string(label, store, phoc_cfg, metric)
        flags = relevance_flags(_ranked_boxes(store, ranked.indices), label, gt_words, iou_thr)
        report.ap.append(average_precision(flags, counts[label]))
        report.queries.append({"label": label, "relevant": counts[label], "ap": report.ap[-1]})
    return _summarize(report)


def _crop_forward(model: RegionPhocNet, image: GrayImage, box: BBox) -> np.ndarray:
    """Independent forward of one candidate: crop, pad to the trunk minimum, pool the whole crop."""
    gh, gw = model.arch["roi_grid"]
    s = model.stride
    px = image.pixels[box.y : box.y2, box.x : box.x2]
    min_h, min_w = s * gh, s * gw
    pad_h, pad_w = max(0, min_h - px.shape[0]), max(0, min_w - px.shape[1])
    if pad_h or pad_w:
        px = np.pad(px, ((0, pad_h), (0, pad_w)), constant_values=255)
    return model.forward(GrayImage(px), [(0, 0, box.w, box.h)])[0]


@dataclass
class BenchReport:
    candidates: int
    shared_seconds: float
    per_candidate_seconds: float

    @property
    def ratio(self) -> float:
        return self.per_candidate_seconds / self.shared_seconds

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "shared_seconds": self.shared_seconds,
                "per_candidate_seconds": self.per_candidate_seconds, "ratio": self.ratio}


def bench_shared_vs_percandidate(model: RegionPhocNet, image: GrayImage, candidates: list[BBox],
                                 tile_cfg: TileConfig | None = None, repeats: int = 1) -> BenchReport:
    """Wall-clock of one shared trunk pass per tile versus one trunk pass per candidate."""
    tile_cfg = tile_cfg or TileConfig()
    best_shared = best_each = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        embed_regions(model, image, candidates, tile_cfg)
        best_shared = min(best_shared, time.perf_counter() - t0)
        t0 = time.perf_counter()
        for box in candidates:
            _crop_forward(model, image, box)
        best_each = min(best_each, time.perf_counter() - t0)
    return BenchReport(len(candidates), best_shared, best_each)
