import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wordspot.dataset import (
    DatasetError,
    convert_corner_annotations,
    load_dataset,
    make_folds,
    parse_annotations,
    save_dataset,
)
from wordspot.imaging import BBox, GrayImage, binarize, connected_components, save_gray
from wordspot.proposals import iou
from wordspot.synth import SynthSpec, render_synthetic, word_mask


# -- annotations ---------------------------------------------------------------


def test_parse_line():
    (w,) = parse_annotations("10 20 30 40 Company\n", "p", 100, 100)
    assert w.bbox == BBox(10, 20, 30, 40) and w.label == "company" and w.transcription == "Company"


def test_transcription_keeps_spaces():
    (w,) = parse_annotations("1 1 5 5 New  York\n", "p", 100, 100)
    assert w.transcription == "New  York" and w.label == "newyork"


def test_empty_file_means_no_words(tmp_path):
    save_gray(GrayImage(np.full((10, 10), 200, np.uint8)), tmp_path / "p01.pgm")
    (tmp_path / "p01.gt").write_text("")
    assert load_dataset(tmp_path)["p01"].words == []


def test_malformed_line_reports_number():
    with pytest.raises(DatasetError, match=":2:"):
        parse_annotations("1 1 5 5 ok\n1 2 three 4 bad\n", "p", 100, 100, "x.gt")
    with pytest.raises(DatasetError, match=":1:"):
        parse_annotations("1 2 3 4\n", "p", 100, 100, "x.gt")


def test_out_of_bounds_clipped_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        (w,) = parse_annotations("90 0 20 5 edge\n", "p", 100, 100)
    assert w.bbox == BBox(90, 0, 10, 5)
    assert "clipped" in caplog.text


def test_missing_image_is_an_error(tmp_path):
    (tmp_path / "p01.gt").write_text("1 1 2 2 a\n")
    with pytest.raises(DatasetError, match="no matching image"):
        load_dataset(tmp_path)


def test_save_load_roundtrip(tmp_path):
    pages = render_synthetic(SynthSpec(pages=2, lines_per_page=2, words_per_line=2, seed=3))
    save_dataset(pages, tmp_path)
    back = load_dataset(tmp_path)
    assert sorted(back) == sorted(pages)
    for pid in pages:
        np.testing.assert_array_equal(back[pid].image.pixels, pages[pid].image.pixels)
        assert back[pid].words == pages[pid].words
    save_dataset(back, tmp_path / "again")
    again = load_dataset(tmp_path / "again")
    assert all(again[p].words == back[p].words for p in back)


def test_corner_converter():
    text = "2700270.png 10 20 39 59 Letters\n2700270.png 0 0 0 0 a\n2710271.png 5 5 9 9 the\n"
    out = convert_corner_annotations(text)
    assert out["2700270"] == "10 20 30 40 Letters\n0 0 1 1 a\n"
    assert convert_corner_annotations("p 1 1 4 4 x", one_indexed=True)["p"] == "0 0 4 4 x\n"
    with pytest.raises(DatasetError, match=":1:"):
        convert_corner_annotations("p 5 5 1 1 x")


# -- folds ---------------------------------------------------------------------


def test_twenty_pages_four_folds():
    ids = [f"p{i:02d}" for i in range(1, 21)]
    folds = make_folds(ids, seed=0)
    assert len(folds) == 4
    assert all(len(f.train) == 15 and len(f.test) == 5 for f in folds)
    assert make_folds(ids, seed=0) == folds


def test_fold_count_not_divisible():
    with pytest.raises(DatasetError, match="--bins"):
        make_folds([f"p{i}" for i in range(7)])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_fold_partition(seed, per_bin):
    ids = [f"page{i}" for i in range(4 * per_bin)]
    folds = make_folds(ids, seed=seed)
    tests = [set(f.test) for f in folds]
    assert set().union(*tests) == set(ids)
    assert sum(len(t) for t in tests) == len(ids)
    for f in folds:
        assert set(f.train) | set(f.test) == set(ids)
        assert not set(f.train) & set(f.test)


# -- synthetic corpus ----------------------------------------------------------


def test_one_word_page():
    pages = render_synthetic(SynthSpec(pages=1, lines_per_page=1, words_per_line=1, noise=0))
    (w,) = pages["p01"].words
    ink = pages["p01"].image.pixels < 128
    ys, xs = np.nonzero(ink)
    assert w.bbox == BBox(xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)


def test_same_seed_same_pixels():
    a = render_synthetic(SynthSpec(pages=2, seed=7))
    b = render_synthetic(SynthSpec(pages=2, seed=7))
    assert all(a[p].image.pixels.tobytes() == b[p].image.pixels.tobytes() for p in a)
    assert all(a[p].words == b[p].words for p in a)
    c = render_synthetic(SynthSpec(pages=2, seed=8))
    assert a["p01"].image.pixels.tobytes() != c["p01"].image.pixels.tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(lexicon=["café"])
    with pytest.raises(ValueError):
        SynthSpec(word_gap=(1, 2))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_ground_truth_airtight(seed):
    spec = SynthSpec(pages=1, lines_per_page=3, words_per_line=4, noise=0, seed=seed)
    page = render_synthetic(spec)["p01"]
    ink = page.image.pixels < 128
    inside = np.zeros_like(ink)
    for w in page.words:
        inside[w.bbox.y : w.bbox.y2, w.bbox.x : w.bbox.x2] = True
    assert not (ink & ~inside).any()
    for i, a in enumerate(page.words):
        for b in page.words[i + 1 :]:
            assert iou(a.bbox, b.bbox) == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_components_union_equals_gt_box(seed):
    spec = SynthSpec(pages=1, lines_per_page=2, words_per_line=3, noise=0, baseline_jitter=0, seed=seed)
    page = render_synthetic(spec)["p01"]
    ccs = connected_components(binarize(page.image))
    for w in page.words:
        members = [c.bbox for c in ccs if w.bbox.contains(c.bbox)]
        assert members
        u = members[0]
        for m in members[1:]:
            u = u.union(m)
        assert u == w.bbox
    assert sum(1 for c in ccs if any(w.bbox.contains(c.bbox) for w in page.words)) == len(ccs)


def test_word_mask_height():
    assert word_mask("ab", 2).shape[0] == 18
