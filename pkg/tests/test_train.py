import numpy as np
import pytest

from wordspot.imaging import BBox, GrayImage
from wordspot.net.train import (
    SkipTile,
    TileConfig,
    TrainConfig,
    TrainPage,
    assign_to_tiles,
    lr_schedule,
    sample_minibatch,
    tile_page,
    train,
)
from wordspot.phoc import PhocConfig


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(999, cfg) == 1e-4
    assert lr_schedule(2000, cfg) == pytest.approx(8.1e-5, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(positive_fraction=0)
    with pytest.raises(ValueError):
        TrainConfig(iou_bg=0.5, iou_pos=0.5)
    with pytest.raises(ValueError):
        TileConfig(100, 100, 100)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


# -- sampling ------------------------------------------------------------------


def test_sampler_counts_with_full_pools():
    ious = np.concatenate([np.full(200, 0.8), np.full(200, 0.1)])
    idx = sample_minibatch(ious, TrainConfig(), np.random.default_rng(0))
    assert len(idx) == 128
    assert (ious[idx] > 0.5).sum() == 77 and (ious[idx] < 0.2).sum() == 51
    assert len(set(idx.tolist())) == 128  # no replacement when the pools allow


def test_sampler_skips_band_only_pool():
    with pytest.raises(SkipTile):
        sample_minibatch(np.full(50, 0.3), TrainConfig(), np.random.default_rng(0))


def test_sampler_never_draws_the_middle_band():
    ious = np.concatenate([np.full(5, 0.9), np.full(300, 0.35), np.full(3, 0.0)])
    idx = sample_minibatch(ious, TrainConfig(), np.random.default_rng(1))
    picked = ious[idx]
    assert not ((picked >= 0.2) & (picked <= 0.5)).any()
    assert (picked > 0.5).sum() >= 77


def test_sampler_small_pools_use_replacement():
    ious = np.array([0.9, 0.9, 0.05])
    idx = sample_minibatch(ious, TrainConfig(), np.random.default_rng(2))
    assert len(idx) == 128 and set(idx.tolist()) <= {0, 1, 2}


def test_sampler_seeded():
    ious = np.random.default_rng(3).random(400)
    a = sample_minibatch(ious, TrainConfig(), np.random.default_rng(9))
    b = sample_minibatch(ious, TrainConfig(), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


# -- tiling --------------------------------------------------------------------


def test_single_tile_page():
    assert tile_page((600, 1000), TileConfig()) == [BBox(0, 0, 600, 1000)]


def test_two_tiles_across():
    tiles = tile_page((1100, 1000), TileConfig())
    assert [t.x for t in tiles] == [0, 500] and all(t.w == 600 for t in tiles)


def test_last_tile_clamped_to_edge():
    tiles = tile_page((1300, 1000), TileConfig())
    assert [t.x for t in tiles] == [0, 500, 700]
    assert tiles[-1].x2 == 1300


def test_small_page_single_shrunk_tile():
    assert tile_page(GrayImage(np.zeros((50, 80), np.uint8)), TileConfig()) == [BBox(0, 0, 80, 50)]


def test_roi_assigned_to_nearest_containing_tile():
    tiles = tile_page((1100, 1000), TileConfig())
    where = assign_to_tiles([BBox(510, 10, 40, 20), BBox(560, 10, 30, 20), BBox(100, 10, 900, 20)], tiles)
    assert where.tolist() == [0, 1, -1]


def test_tiles_cover_page():
    for size in [(600, 1000), (1234, 2345), (2000, 999)]:
        cover = np.zeros(size[::-1], bool)
        for t in tile_page(size, TileConfig()):
            cover[t.y : t.y2, t.x : t.x2] = True
        assert cover.all()


# -- training loop -------------------------------------------------------------


TINY = {
    "in_channels": 1,
    "trunk": [{"kind": "conv", "out": 4, "k": 3}, {"kind": "relu"}, {"kind": "pool", "size": 2}],
    "roi_grid": [2, 4],
    "head": [8],
}


@pytest.fixture(scope="module")
def tiny_pages():
    from wordspot.pipeline import boxes_of, propose_all, apply_filter
    from wordspot.config import Config
    from wordspot.synth import SynthSpec, render_synthetic

    pages = render_synthetic(SynthSpec(pages=1, lines_per_page=2, words_per_line=3, seed=5))
    cfg = Config()
    cands = boxes_of(apply_filter(propose_all(pages, cfg), None, cfg))
    return [
        TrainPage(pid, p.image, [(w.bbox, w.label) for w in p.words], cands[pid]) for pid, p in pages.items()
    ]


def _cfg(**kw):
    base = dict(iterations=5, batch_rois=8, tile_w=256, tile_h=128, tile_overlap=96, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_leaves_parameters_bit_identical(tiny_pages):
    for opt in ("sgd", "adam"):
        cfg = _cfg(lr0=0.0, optimizer=opt)
        start = train(tiny_pages, _cfg(iterations=0), arch=dict(TINY)).model
        after = train(tiny_pages, cfg, arch=dict(TINY)).model
        for k in start.params:
            assert start.params[k].tobytes() == after.params[k].tobytes()


def test_same_seed_same_trace(tiny_pages):
    a = train(tiny_pages, _cfg(lr0=1e-3, optimizer="adam"), arch=dict(TINY))
    b = train(tiny_pages, _cfg(lr0=1e-3, optimizer="adam"), arch=dict(TINY))
    assert a.losses == b.losses
    assert a.model.to_bytes() == b.model.to_bytes()
    c = train(tiny_pages, _cfg(lr0=1e-3, optimizer="adam", seed=1), arch=dict(TINY))
    assert c.losses != a.losses


def test_first_loss_is_ln2_sum(tiny_pages):
    res = train(tiny_pages, _cfg(iterations=1), arch=dict(TINY))
    assert res.losses[0] == pytest.approx(8 * np.log(2), rel=1e-5)


def test_phoc_mismatch_rejected(tiny_pages):
    model = train(tiny_pages, _cfg(iterations=0), arch=dict(TINY)).model
    with pytest.raises(ValueError, match="PHOC"):
        train(tiny_pages, _cfg(iterations=1), PhocConfig(bigrams=()), init=model)


def test_divergence_reported(tiny_pages):
    from wordspot.net.train import TrainingDiverged

    with pytest.raises(TrainingDiverged, match="iteration"), np.errstate(all="ignore"):
        train(tiny_pages, _cfg(lr0=1e38, iterations=30, optimizer="sgd"), arch=dict(TINY))
