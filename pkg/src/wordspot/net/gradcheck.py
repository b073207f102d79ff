"""Central finite-difference check of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .model import RegionPhocNet, default_arch


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped_kinks: int = 0

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "per_param": self.per_param,
            "checked": self.checked,
            "skipped_kinks": self.skipped_kinks,
        }


def rel_error(a: float, f: float) -> float:
    return abs(a - f) / max(1e-8, abs(a) + abs(f))


def _pattern(cache) -> list[np.ndarray]:
    """Every discrete choice made by a forward pass: ReLU masks and pooling argmaxes."""
    tcache, pcache, _, hcache = cache
    out = []
    for kind, _, c in tcache:
        if kind == "relu":
            out.append(c)
        elif kind == "pool":
            out.append(c[1])
    out.append(pcache[1])
    out.extend(c for kind, _, c in hcache if kind == "relu")
    return out


def _same(p, q) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def _loss(model, x, rois, targets):
    logits, cache = model.forward_logits(x, rois)
    loss, _ = L.phoc_loss(L.sigmoid(logits), targets)
    return loss, cache


def _central_difference(model, flat, idx, x, rois, targets, h, base, shrink: int = 4):
    old = flat[idx]
    try:
        for k in range(shrink):
            step = h / 4**k
            flat[idx] = old + step
            lp, cp = _loss(model, x, rois, targets)
            flat[idx] = old - step
            lm, cm = _loss(model, x, rois, targets)
            if _same(base, _pattern(cp)) and _same(base, _pattern(cm)):
                return (lp - lm) / (2 * step)
        return None
    finally:
        flat[idx] = old


def grad_check(model: RegionPhocNet, x, rois, targets, per_param: int = 200, h: float = 1e-4,
               seed: int = 0, fault: str | None = None, names=None) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled parameters.

    ``per_param`` entries of every parameter array are checked (all of them
    for smaller arrays).  A perturbation that flips any ReLU or pooling
    decision crosses a kink, where a finite difference means nothing, so the
    step is shrunk (``h``, ``h/4``, ...) until it stays on one smooth piece.
    Entries with no kink-free step are replaced by fresh draws where
    possible and counted in ``skipped_kinks``.  ``names`` limits the check
    to some parameter arrays.
    """
    model = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    targets = np.asarray(targets, dtype=np.float64)
    _, analytic, _ = model.loss_and_grads(x, rois, targets, fault=fault)
    _, base_cache = _loss(model, x, rois, targets)
    base = _pattern(base_cache)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for name, p in model.params.items():
        if names is not None and name not in names:
            continue
        flat = p.reshape(-1)
        g = analytic[name].reshape(-1)
        order = rng.permutation(flat.size)
        want = min(per_param, flat.size)
        worst, done = 0.0, 0
        for idx in order:
            if done >= want:
                break
            fd = _central_difference(model, flat, idx, x, rois, targets, h, base)
            if fd is None:
                report.skipped_kinks += 1
                continue
            worst = max(worst, rel_error(float(g[idx]), fd))
            done += 1
        report.per_param[name] = worst
        report.checked += done
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def check_setup(arch: dict | None = None, seed: int = 0, tile: tuple[int, int] = (16, 40),
                n_rois: int = 2, out_dim: int = 604):
    """A float64 model with a non-zero head, a tie-free input tile, ROIs and binary targets."""
    rng = np.random.default_rng(seed)
    arch = dict(arch or default_arch(out_dim))
    model = RegionPhocNet.initialize(arch, seed=seed, dtype=np.float64, zero_last=False)
    th, tw = tile
    # Continuous noise makes exact ties in max pooling practically impossible.
    x = rng.uniform(-0.5, 0.5, (arch["in_channels"], th, tw))
    s = model.stride
    gh, gw = arch["roi_grid"]
    rois = []
    for _ in range(n_rois):
        w = int(rng.integers(s * gw, tw + 1))
        hgt = int(rng.integers(s * gh, th + 1))
        rois.append((int(rng.integers(0, tw - w + 1)), int(rng.integers(0, th - hgt + 1)), w, hgt))
    targets = (rng.random((n_rois, arch["out_dim"])) < 0.1).astype(np.float64)
    return model, x, rois, targets
