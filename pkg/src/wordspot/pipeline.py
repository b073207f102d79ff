"""End-to-end wiring: pages -> proposals -> filter -> network -> store -> reports."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .dataset import FoldSplit, Page
from .imaging import BBox, PageAnalysis, analyse_page
from .net.model import RegionPhocNet
from .net.train import TrainPage, TrainResult, train
from .proposals import (
    CandidateRegion,
    FilterConfig,
    LinearFilter,
    enumerate_candidates,
    feature_matrix,
    filter_candidates,
    iou_matrix,
    label_by_iou,
    train_filter,
)
from .retrieval import EmbeddingStore, EvalReport, embed_pages, evaluate_qbe, evaluate_qbs, _summarize

log = logging.getLogger(__name__)


@dataclass
class PageProposals:
    analysis: PageAnalysis
    candidates: list[CandidateRegion]


def propose_page(page: Page, cfg: Config) -> PageProposals:
    ic = cfg.imaging
    analysis = analyse_page(page.image, ic.threshold_factor, ic.core_density, ic.window,
                            ic.min_frac, ic.overlap_frac)
    cands = enumerate_candidates(analysis.bands, analysis.components, cfg.proposals.max_run)
    return PageProposals(analysis, cands)


def propose_all(pages: dict[str, Page], cfg: Config) -> dict[str, PageProposals]:
    return {pid: propose_page(pages[pid], cfg) for pid in sorted(pages)}


def max_iou_to_words(boxes: list[BBox], words) -> np.ndarray:
    if not boxes:
        return np.zeros(0)
    if not words:
        return np.zeros(len(boxes))
    return iou_matrix(boxes, [w.bbox for w in words]).max(axis=1)


def candidate_recall(cands: dict[str, list[BBox]], pages: dict[str, Page], thr: float = 0.5) -> float:
    """Fraction of ground-truth words matched by some candidate at IoU >= thr."""
    hit = total = 0
    for pid, page in pages.items():
        if not page.words:
            continue
        total += len(page.words)
        boxes = cands.get(pid, [])
        if boxes:
            m = iou_matrix([w.bbox for w in page.words], boxes).max(axis=1)
            hit += int((m >= thr).sum())
    return hit / total if total else 0.0


def filter_stats(props: dict[str, PageProposals]) -> tuple[float, float]:
    """Mean line-band height and mean proposal width over the given pages."""
    heights = [b.height for p in props.values() for b in p.analysis.bands]
    widths = [c.bbox.w for p in props.values() for c in p.candidates]
    if not heights or not widths:
        raise ValueError("no line bands or proposals to normalise the filter features with")
    return float(np.mean(heights)), float(np.mean(widths))


def fit_filter(pages: dict[str, Page], props: dict[str, PageProposals], cfg: Config) -> LinearFilter:
    pc = cfg.proposals
    avg_h, avg_w = filter_stats(props)
    fcfg = FilterConfig(pc.P, pc.Q, avg_h, avg_w)
    X, y = [], []
    for pid in sorted(props):
        p = props[pid]
        labels = label_by_iou(
            max_iou_to_words([c.bbox for c in p.candidates], pages[pid].words), pc.iou_pos, pc.iou_neg
        )
        keep = labels != 0
        if keep.any():
            feats = feature_matrix([c for c, k in zip(p.candidates, keep) if k], p.analysis.binary, fcfg)
            X.append(feats)
            y.append(labels[keep])
    X = np.concatenate(X) if X else np.zeros((0, pc.P + pc.Q + 2))
    y = np.concatenate(y) if y else np.zeros(0)
    return train_filter(
        list(zip(X, y)), reg=pc.reg, epochs=pc.epochs, seed=cfg.train.seed, lr=pc.lr,
        batch_size=pc.batch_size or None, balanced=pc.balanced, filter_cfg=fcfg,
    )


def apply_filter(props: dict[str, PageProposals], filt: LinearFilter | None,
                 cfg: Config) -> dict[str, list[CandidateRegion]]:
    if filt is None:
        return {pid: list(p.candidates) for pid, p in props.items()}
    return {
        pid: filter_candidates(p.candidates, filt, p.analysis.binary, cfg.proposals.threshold)
        for pid, p in props.items()
    }


def boxes_of(cands: dict[str, list[CandidateRegion]]) -> dict[str, list[BBox]]:
    return {pid: [c.bbox for c in cs] for pid, cs in cands.items()}


def train_network(pages: dict[str, Page], cands: dict[str, list[BBox]], page_ids, cfg: Config,
                  init: RegionPhocNet | None = None, progress=None) -> TrainResult:
    tp = [
        TrainPage(pid, pages[pid].image, [(w.bbox, w.label) for w in pages[pid].words if w.label],
                  cands.get(pid, []))
        for pid in sorted(page_ids)
    ]
    return train(tp, cfg.train, cfg.phoc, cfg.arch, init=init, progress=progress)


def evaluate(model: RegionPhocNet, pages: dict[str, Page], store: EmbeddingStore, cfg: Config,
             page_ids=None, modes=("qbe", "qbs")) -> dict[str, EvalReport]:
    ids = sorted(page_ids if page_ids is not None else set(store.page_ids))
    gt = [w for pid in ids for w in pages[pid].words if w.label]
    rc = cfg.retrieval
    out = {}
    if "qbe" in modes:
        out["qbe"] = _summarize(
            evaluate_qbe(model, pages, store, gt, cfg.inference, rc.iou_thr, rc.exclude_self, rc.metric),
            rc.long_word_min,
        )
    if "qbs" in modes:
        out["qbs"] = _summarize(evaluate_qbs(store, gt, cfg.phoc, rc.iou_thr, rc.metric), rc.long_word_min)
    return out


@dataclass
class FoldRun:
    fold: FoldSplit
    filter: LinearFilter
    model: RegionPhocNet
    store: EmbeddingStore
    reports: dict[str, EvalReport]
    losses: list[float] = field(default_factory=list)
    recall: dict[str, float] = field(default_factory=dict)


def run_fold(pages: dict[str, Page], fold: FoldSplit, cfg: Config, progress=None) -> FoldRun:
    """Train filter and network on the fold's training pages, evaluate on its test pages."""
    props = propose_all(pages, cfg)
    train_props = {pid: props[pid] for pid in fold.train}
    filt = fit_filter(pages, train_props, cfg)
    kept = boxes_of(apply_filter(props, filt, cfg))
    raw = boxes_of(apply_filter(props, None, cfg))
    test_pages = {pid: pages[pid] for pid in fold.test}
    recall = {
        "test_before_filter": candidate_recall(raw, test_pages, cfg.retrieval.iou_thr),
        "test_after_filter": candidate_recall(kept, test_pages, cfg.retrieval.iou_thr),
    }
    result = train_network(pages, kept, fold.train, cfg, progress=progress)
    store = embed_pages(result.model, pages, {pid: kept[pid] for pid in fold.test}, cfg.inference, cfg.phoc)
    reports = evaluate(result.model, pages, store, cfg, fold.test)
    return FoldRun(fold, filt, result.model, store, reports, result.losses, recall)
