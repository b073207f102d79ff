import numpy as np

from wordspot.net.gradcheck import check_setup, grad_check, rel_error

SMALL = {
    "in_channels": 1,
    "trunk": [
        {"kind": "conv", "out": 3, "k": 3},
        {"kind": "relu"},
        {"kind": "pool", "size": 2},
        {"kind": "conv", "out": 4, "k": 3},
        {"kind": "relu"},
    ],
    "roi_grid": [2, 3],
    "head": [6],
    "out_dim": 12,
}

LINEAR_ONLY = {"in_channels": 1, "trunk": [], "roi_grid": [4, 6], "head": [], "out_dim": 12}


def test_rel_error_formula():
    assert rel_error(1.0, 1.0) == 0.0
    assert rel_error(1.0, -1.0) == 1.0
    assert rel_error(0.0, 0.0) == 0.0


def test_linear_only_network():
    # Grid equal to the tile: every bin is one pixel, so pooling is the identity.
    model, x, _, t = check_setup(LINEAR_ONLY, seed=0, tile=(4, 6))
    rep = grad_check(model, x, [(0, 0, 6, 4)] * 2, t, per_param=200)
    assert rep.max_rel_error < 1e-8


def test_small_trunk_roi_head():
    model, x, rois, t = check_setup(SMALL, seed=1, tile=(12, 20), n_rois=3)
    rep = grad_check(model, x, rois, t, per_param=200)
    assert rep.max_rel_error < 1e-4
    assert set(rep.per_param) == set(model.params)
    assert rep.checked >= 200


def test_fault_injection_detected():
    model, x, rois, t = check_setup(SMALL, seed=1, tile=(12, 20), n_rois=3)
    rep = grad_check(model, x, rois, t, per_param=200, fault="conv_sign")
    assert rep.per_param["conv0.W"] > 0.1
    assert rep.per_param["fc1.W"] < 1e-4


def test_report_is_deterministic():
    model, x, rois, t = check_setup(SMALL, seed=2, tile=(12, 20))
    a = grad_check(model, x, rois, t, per_param=20, seed=5)
    b = grad_check(model, x, rois, t, per_param=20, seed=5)
    assert a.to_dict() == b.to_dict()
    assert np.isfinite(a.max_rel_error)
