"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary.

The slow criteria (7, 9, 10) share one desk-preset fold run on the
20-page synthetic corpus.
"""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from wordspot.config import Config, config_from_dict, desk_config
from wordspot.dataset import make_folds
from wordspot.imaging import GrayImage
from wordspot.net import layers as L
from wordspot.net.gradcheck import check_setup, grad_check
from wordspot.net.model import RegionPhocNet, default_arch
from wordspot.phoc import DEFAULT_ALPHABET, PhocConfig, encode_string, phoc_dimension
from wordspot.pipeline import apply_filter, boxes_of, candidate_recall, fit_filter, propose_all, run_fold
from wordspot.retrieval import average_precision, bench_shared_vs_percandidate
from wordspot.synth import render_synthetic

from conftest import ACCEPTANCE_LINES
from oracles import ap_oracle, phoc_oracle, roi_pool_oracle


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


@pytest.fixture(scope="session")
def corpus():
    return render_synthetic(Config().synth)


@pytest.fixture(scope="session")
def desk_run(corpus):
    cfg = desk_config()
    fold = make_folds(list(corpus), cfg.folds.seed, cfg.folds.bins)[0]
    t0 = time.perf_counter()
    run = run_fold(corpus, fold, cfg)
    return run, cfg, time.perf_counter() - t0


def test_criterion_1_phoc_oracle():
    t0 = time.perf_counter()
    cfg = PhocConfig()
    rng = np.random.default_rng(0)
    alphabet = list(DEFAULT_ALPHABET)
    bad = 0
    for _ in range(1000):
        word = "".join(rng.choice(alphabet, size=int(rng.integers(1, 16))))
        ref = phoc_oracle(word, cfg.alphabet, cfg.unigram_levels, cfg.bigrams, cfg.bigram_levels,
                          Fraction(cfg.occupancy_overlap))
        bad += not np.array_equal(encode_string(word, cfg), ref)
    dt = time.perf_counter() - t0
    dim = phoc_dimension(cfg)
    record(1, bad == 0 and dim == 604 and dt < 5,
           f"{1000 - bad}/1000 words bit-exact, dimension {dim}, {dt:.2f} s")


def test_criterion_2_gradient_integrity():
    t0 = time.perf_counter()
    model, x, rois, targets = check_setup(default_arch(), seed=0)
    rep = grad_check(model, x, rois, targets, per_param=200)
    fault = grad_check(model, x, rois, targets, per_param=200, fault="conv_sign", names={"conv0.W"})
    dt = time.perf_counter() - t0
    record(2, rep.max_rel_error < 1e-4 and fault.max_rel_error > 0.1 and dt < 60,
           f"max rel error {rep.max_rel_error:.2e} over {rep.checked} entries "
           f"({rep.skipped_kinks} kink draws replaced), fault control {fault.max_rel_error:.2f}, {dt:.1f} s")


def test_criterion_3_roi_pool_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(500):
        C, H, W = int(rng.integers(1, 5)), int(rng.integers(1, 16)), int(rng.integers(1, 16))
        s = int(rng.choice([1, 2, 4]))
        fmap = rng.normal(size=(C, H, W))
        w, h = int(rng.integers(1, W * s + 1)), int(rng.integers(1, H * s + 1))
        box = (int(rng.integers(0, W * s - w + 1)), int(rng.integers(0, H * s - h + 1)), w, h)
        grid = (int(rng.integers(1, 5)), int(rng.integers(1, 9)))
        out, _ = L.roi_pool_forward(fmap, [box], grid, s)
        mismatches += not np.array_equal(out[0], roi_pool_oracle(fmap, box, grid, s))
    dt = time.perf_counter() - t0
    record(3, mismatches == 0 and dt < 10, f"{500 - mismatches}/500 triples exact, {dt:.2f} s")


def test_criterion_4_loss_anchors():
    arch = dict(default_arch(), input_mean=0.5)
    model = RegionPhocNet.initialize(arch, seed=0, dtype=np.float64)
    tile = GrayImage(np.random.default_rng(4).integers(0, 256, (64, 160), dtype=np.uint8))
    rois = [(0, 0, 160, 64), (10, 5, 60, 30), (80, 20, 70, 40)]
    targets = np.stack([encode_string(w) for w in ("orders", "the", "letters")]).astype(np.float64)
    probs = model.forward(tile, rois)
    per_roi = L.per_roi_loss(probs, targets)
    anchor = float(np.max(np.abs(per_roi - math.log(2))))
    worked, _ = L.phoc_loss(np.array([0.8, 0.4]), np.array([1.0, 0.0]))
    direct = -(math.log(0.8) + math.log(0.6)) / 2
    record(4, anchor <= 1e-9 and abs(worked - direct) <= 1e-6,
           f"initial per-ROI loss off ln 2 by {anchor:.1e}; n=2 example {worked:.6f} vs direct "
           f"evaluation {direct:.6f} (the quoted 0.366915 is off by {abs(worked - 0.366915):.1e})")


def test_criterion_5_single_pass_equivalence():
    model = RegionPhocNet.initialize(default_arch(), seed=5, dtype=np.float32, zero_last=False)
    rng = np.random.default_rng(5)
    tile = GrayImage(rng.integers(0, 256, (96, 240), dtype=np.uint8))
    rois = []
    for _ in range(100):
        w, h = int(rng.integers(4, 241)), int(rng.integers(4, 97))
        rois.append((int(rng.integers(0, 241 - w)), int(rng.integers(0, 97 - h)), w, h))
    batch = model.forward(tile, rois)
    single = np.stack([model.forward(tile, [r])[0] for r in rois])
    err = float(np.max(np.abs(batch - single)))
    record(5, err <= 1e-6, f"max elementwise difference {err:.1e} over 100 ROIs")


def test_criterion_6_proposal_recall(corpus):
    cfg = desk_config()
    props = propose_all(corpus, cfg)
    fold = make_folds(list(corpus), cfg.folds.seed, cfg.folds.bins)[0]
    filt = fit_filter(corpus, {pid: props[pid] for pid in fold.train}, cfg)
    raw = boxes_of(apply_filter(props, None, cfg))
    kept = boxes_of(apply_filter(props, filt, cfg))
    before = candidate_recall(raw, corpus, 0.5)
    after = candidate_recall(kept, corpus, 0.5)
    held = {pid: corpus[pid] for pid in fold.test}
    record(6, before >= 0.95 and after >= 0.90,
           f"recall before filter {before:.3f}, after {after:.3f} "
           f"(held-out pages {candidate_recall(kept, held, 0.5):.3f}); "
           f"{sum(map(len, raw.values()))} -> {sum(map(len, kept.values()))} candidates")


@pytest.mark.slow
def test_criterion_7_end_to_end(desk_run):
    run, cfg, seconds = desk_run
    qbe, qbs = run.reports["qbe"].map, run.reports["qbs"].map
    first, last = float(np.mean(run.losses[:100])), float(np.mean(run.losses[-100:]))
    ok = (qbe >= 0.70 and qbs >= 0.60 and last < first and len(run.losses) <= 5000
          and seconds <= 30 * 60)
    record(7, ok, f"QBE mAP {qbe:.3f}, QBS mAP {qbs:.3f}, loss first/last 100 {first:.3f}/{last:.3f}, "
                  f"{len(run.losses)} iterations, fold run {seconds / 60:.1f} min")


def test_criterion_8_evaluator():
    cases = [
        ([1, 1, 1], 3), ([0, 0, 0], 2), ([1, 0, 1], 2), ([0, 1], 1), ([1], 1),
        ([0, 0, 1, 0, 1], 2), ([1, 0, 0, 0], 3), ([0, 1, 1, 0, 0, 1], 4), ([1, 1, 0, 1], 3), ([0] * 9 + [1], 1),
    ]
    worst = max(abs(average_precision(f, n) - float(ap_oracle(f, n))) for f, n in cases)
    five_sixths = average_precision([1, 0, 1], 2)
    ids = [f"p{i:02d}" for i in range(1, 21)]
    folds_ok = True
    for seed in range(50):
        folds = make_folds(ids, seed=seed)
        folds_ok &= all(len(f.train) == 15 and len(f.test) == 5 and not set(f.train) & set(f.test)
                        for f in folds)
        folds_ok &= sorted(p for f in folds for p in f.test) == ids
    record(8, worst < 1e-12 and abs(five_sixths - 5 / 6) < 1e-12 and folds_ok,
           f"10 AP cases max error {worst:.1e}, (1,0,1) -> {five_sixths:.6f}, folds 15/5 for 50 seeds: {folds_ok}")


@pytest.mark.slow
def test_criterion_9_shared_pass_speedup(desk_run, corpus):
    run, cfg, _ = desk_run
    props = propose_all(corpus, cfg)
    kept = boxes_of(apply_filter(props, run.filter, cfg))
    pid = max(sorted(kept), key=lambda p: len(kept[p]))
    cands = kept[pid]
    image = corpus[pid].image
    ratios = {}
    for n in (10, 50, 100):
        ratios[n] = bench_shared_vs_percandidate(run.model, image, cands[:n], cfg.inference, repeats=3).ratio
    full = bench_shared_vs_percandidate(run.model, image, cands, cfg.inference, repeats=3).ratio
    # The page bench covers all of its filtered candidates; subsets must not lose ground as they grow.
    mono = ratios[10] <= ratios[50] <= ratios[100] <= full
    record(9, len(cands) >= 100 and full > 3 and mono,
           f"page {pid}, all {len(cands)} filtered candidates: ratio {full:.1f}x; subsets "
           + ", ".join(f"{n}: {r:.1f}x" for n, r in ratios.items()))


@pytest.mark.slow
def test_criterion_10_determinism():
    cfg = config_from_dict({
        "synth": {"pages": 4, "lines_per_page": 3},
        "train": {"iterations": 60},
        "proposals": {"epochs": 10},
    }, desk_config())
    outputs = []
    for _ in range(2):
        pages = render_synthetic(cfg.synth, cfg.phoc)
        fold = make_folds(list(pages), cfg.folds.seed, cfg.folds.bins)[0]
        run = run_fold(pages, fold, cfg)
        report = json.dumps({m: r.to_dict() for m, r in run.reports.items()}, sort_keys=True)
        outputs.append((run.model.to_bytes(), run.store.to_bytes(), report))
    same = [a == b for a, b in zip(*outputs)]
    record(10, all(same), f"checkpoint/store/report identical: {same}, store size {len(run.store)}")
