"""Word candidate regions: consecutive component runs per line, plus a linear word/non-word filter."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import BBox, BinaryImage, ConnectedComponent, InvalidInput, LineBand


class DegenerateTraining(ValueError):
    pass


@dataclass
class CandidateRegion:
    bbox: BBox
    line_id: int
    first_cc: int
    last_cc: int
    score: float | None = None


@dataclass
class FilterFeatures:
    column_densities: np.ndarray
    row_densities: np.ndarray
    norm_height: float
    norm_width: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.column_densities, self.row_densities, [self.norm_height, self.norm_width]]
        )


@dataclass
class FilterConfig:
    P: int = 8
    Q: int = 4
    avg_height: float = 1.0
    avg_width: float = 1.0


@dataclass
class LinearFilter:
    weights: np.ndarray
    bias: float
    P: int
    Q: int
    avg_height: float
    avg_width: float

    @property
    def config(self) -> FilterConfig:
        return FilterConfig(self.P, self.Q, self.avg_height, self.avg_width)

    def decision(self, feats: np.ndarray) -> np.ndarray:
        return np.asarray(feats, dtype=np.float64) @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "P": self.P,
            "Q": self.Q,
            "avg_height": float(self.avg_height),
            "avg_width": float(self.avg_width),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearFilter":
        w = np.asarray(d["weights"], dtype=np.float64)
        if w.size != d["P"] + d["Q"] + 2:
            raise InvalidInput("filter weight length does not match P+Q+2")
        return cls(w, float(d["bias"]), d["P"], d["Q"], d["avg_height"], d["avg_width"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "LinearFilter":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sort_line_members(band: LineBand, ccs: list[ConnectedComponent]) -> list[ConnectedComponent]:
    by_id = {cc.id: cc for cc in ccs}
    members = [by_id[i] for i in band.members]
    return sorted(members, key=lambda cc: (cc.bbox.x, cc.bbox.y, cc.id))


def enumerate_candidates(bands, ccs, max_run: int = 8) -> list[CandidateRegion]:
    if max_run < 1:
        raise InvalidInput("max_run must be >= 1")
    seen = set()
    out = []
    for band in bands:
        if not band.members:
            continue
        members = sort_line_members(band, ccs)
        m = len(members)
        for i in range(m):
            box = members[i].bbox
            for j in range(i, min(m, i + max_run)):
                if j > i:
                    box = box.union(members[j].bbox)
                key = box.as_tuple()
                if key in seen:
                    continue
                seen.add(key)
                out.append(CandidateRegion(box, band.id, i, j))
    return out


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two box lists (rows: ``boxes_a``)."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([bb.as_tuple() for bb in boxes_a], dtype=np.float64)
    b = np.array([bb.as_tuple() for bb in boxes_b], dtype=np.float64)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None] - inter)


def _strip_bounds(extent: int, parts: int) -> list[tuple[int, int]]:
    # Strip k covers [k*extent/parts, (k+1)*extent/parts) on the pixel grid.
    edges = [math.ceil(k * extent / parts) for k in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def candidate_features(
    region: CandidateRegion | BBox, bin_img: BinaryImage, filter_cfg: FilterConfig
) -> FilterFeatures:
    box = region.bbox if isinstance(region, CandidateRegion) else region
    if box.x < 0 or box.y < 0 or box.x2 > bin_img.width or box.y2 > bin_img.height:
        raise InvalidInput(f"region {box.as_tuple()} lies outside the image")
    if filter_cfg.avg_height <= 0 or filter_cfg.avg_width <= 0:
        raise InvalidInput("normalisation statistics must be positive")
    patch = bin_img.mask[box.y : box.y2, box.x : box.x2]
    col_sums = patch.sum(axis=0, dtype=np.int64)
    row_sums = patch.sum(axis=1, dtype=np.int64)

    def densities(sums, extent, other, parts):
        out = np.zeros(parts)
        for k, (a, b) in enumerate(_strip_bounds(extent, parts)):
            if b > a:
                out[k] = sums[a:b].sum() / ((b - a) * other)
            else:
                # Strip narrower than one pixel: use the pixel it falls in.
                out[k] = sums[(k * extent) // parts] / other
        return out

    return FilterFeatures(
        column_densities=densities(col_sums, box.w, box.h, filter_cfg.P),
        row_densities=densities(row_sums, box.h, box.w, filter_cfg.Q),
        norm_height=box.h / filter_cfg.avg_height,
        norm_width=box.w / filter_cfg.avg_width,
    )


def feature_matrix(regions, bin_img: BinaryImage, filter_cfg: FilterConfig) -> np.ndarray:
    if not regions:
        return np.zeros((0, filter_cfg.P + filter_cfg.Q + 2))
    return np.stack([candidate_features(r, bin_img, filter_cfg).as_vector() for r in regions])


def label_by_iou(max_ious: np.ndarray, pos: float = 0.5, neg: float = 0.2) -> np.ndarray:
    """+1 for max IoU >= pos, -1 below neg, 0 (skip) in between."""
    labels = np.zeros(len(max_ious), dtype=np.int64)
    labels[max_ious >= pos] = 1
    labels[max_ious < neg] = -1
    return labels


def train_filter(
    samples,
    reg: float = 1e-4,
    epochs: int = 50,
    seed: int = 0,
    *,
    lr: float = 0.1,
    batch_size: int | None = 64,
    balanced: bool = True,
    filter_cfg: FilterConfig | None = None,
) -> LinearFilter:
    """Linear SVM by SGD on the L2-regularised hinge loss.

    ``samples`` is a sequence of ``(FilterFeatures | vector, label)`` pairs
    with labels in {+1, -1}.  ``batch_size=None`` takes full-batch steps.
    With ``balanced`` each class contributes half of the data term.
    """
    feats, labels = [], []
    for f, y in samples:
        feats.append(f.as_vector() if isinstance(f, FilterFeatures) else np.asarray(f, float))
        labels.append(float(y))
    X = np.asarray(feats, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(np.unique(y)) < 2:
        raise DegenerateTraining("filter training needs both positive and negative samples")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise InvalidInput("labels must be +1 or -1")
    if reg <= 0:
        raise InvalidInput("reg must be positive")

    n, d = X.shape
    if balanced:
        n_pos = (y > 0).sum()
        sw = np.where(y > 0, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        sw = np.ones(n)
    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    b = 0.0
    step = 0
    bs = n if batch_size is None else batch_size
    for _ in range(epochs):
        order = np.arange(n) if batch_size is None else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            eta = lr / (1.0 + lr * reg * step)
            margins = y[idx] * (X[idx] @ w + b)
            active = margins < 1
            coef = (sw[idx] * y[idx] * active) / len(idx)
            gw = reg * w - coef @ X[idx]
            gb = -coef.sum()
            w -= eta * gw
            b -= eta * gb
            step += 1
    cfg = filter_cfg or FilterConfig()
    if cfg.P + cfg.Q + 2 != d:
        cfg = FilterConfig(P=d - 2 - cfg.Q, Q=cfg.Q, avg_height=cfg.avg_height, avg_width=cfg.avg_width)
    return LinearFilter(w, b, cfg.P, cfg.Q, cfg.avg_height, cfg.avg_width)


def hinge_loss(model: LinearFilter, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.maximum(0.0, 1.0 - y * model.decision(X))))


def filter_candidates(
    cands: list[CandidateRegion],
    model: LinearFilter,
    bin_img: BinaryImage,
    threshold: float = 0.0,
) -> list[CandidateRegion]:
    if not cands:
        return []
    scores = model.decision(feature_matrix(cands, bin_img, model.config))
    kept = []
    for cand, s in zip(cands, scores):
        cand.score = float(s)
        if s >= threshold:
            kept.append(cand)
    return kept


# JSON-lines candidate files: one {page_id, x, y, w, h, score} object per line.


def write_candidates_jsonl(path, records) -> None:
    """``records`` yields ``(page_id, CandidateRegion | BBox, score)``."""
    with open(path, "w") as fh:
        for page_id, region, score in records:
            box = region.bbox if isinstance(region, CandidateRegion) else region
            rec = {"page_id": page_id, "x": box.x, "y": box.y, "w": box.w, "h": box.h}
            rec["score"] = None if score is None else float(score)
            fh.write(json.dumps(rec) + "\n")


def read_candidates_jsonl(path) -> dict[str, list[tuple[BBox, float | None]]]:
    out: dict[str, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                box = BBox(int(rec["x"]), int(rec["y"]), int(rec["w"]), int(rec["h"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidInput(f"{path}:{lineno}: bad candidate record ({exc})") from exc
            out.setdefault(rec["page_id"], []).append((box, rec.get("score")))
    return out
