"""Layer primitives with explicit backward passes.

Feature maps are single images shaped (C, H, W); per-ROI features are
(N, F) matrices.  Every ``*_forward`` returns ``(out, cache)`` and the
matching ``*_backward`` takes ``(dout, cache)``.
"""
from __future__ import annotations

import math

import numpy as np


class InvalidShape(ValueError):
    pass


class InvalidRoi(ValueError):
    pass


def conv2d_forward(x, kernels, bias, pad: int | None = None):
    """Cross-correlation of x (C,H,W) with kernels (O,C,kh,kw); pad=None means 'same'."""
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise InvalidShape(f"conv2d: input {x.shape} vs kernels {kernels.shape}")
    O, C, kh, kw = kernels.shape
    if bias.shape != (O,):
        raise InvalidShape(f"conv2d: bias {bias.shape} for {O} output channels")
    if pad is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidShape("'same' padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = pad
    _, H, W = x.shape
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if Ho < 1 or Wo < 1:
        raise InvalidShape(f"conv2d: kernel {kh}x{kw} does not fit padded input {x.shape}")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + Ho, j : j + Wo]
    cols = cols.reshape(C * kh * kw, Ho * Wo)
    out = kernels.reshape(O, -1) @ cols
    out += bias[:, None]
    cache = (x.shape, kernels, cols, ph, pw)
    return out.reshape(O, Ho, Wo), cache


def conv2d_backward(dout, cache, need_dx: bool = True):
    x_shape, kernels, cols, ph, pw = cache
    O, C, kh, kw = kernels.shape
    _, Ho, Wo = dout.shape
    d2 = dout.reshape(O, -1)
    dk = (d2 @ cols.T).reshape(kernels.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dk, db
    dcols = (kernels.reshape(O, -1).T @ d2).reshape(C, kh, kw, Ho, Wo)
    _, H, W = x_shape
    dxp = np.zeros((C, H + 2 * ph, W + 2 * pw), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + Ho, j : j + Wo] += dcols[:, i, j]
    return dxp[:, ph : ph + H, pw : pw + W], dk, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2d_forward(x, size: int = 2):
    """Non-overlapping max pooling; a trailing odd row/column is dropped."""
    C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise InvalidShape(f"maxpool: input {x.shape} smaller than window {size}")
    views = [
        x[:, di : di + Ho * size : size, dj : dj + Wo * size : size]
        for di in range(size)
        for dj in range(size)
    ]
    out = views[0].copy()
    arg = np.zeros((C, Ho, Wo), dtype=np.int8)
    for k, v in enumerate(views[1:], 1):
        better = v > out  # strict: the first occurrence wins ties
        np.copyto(out, v, where=better)
        arg[better] = k
    return out, (x.shape, arg, size)


def maxpool2d_backward(dout, cache):
    x_shape, arg, size = cache
    _, Ho, Wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k in range(size * size):
        di, dj = divmod(k, size)
        dx[:, di : di + Ho * size : size, dj : dj + Wo * size : size] = dout * (arg == k)
    return dx


def map_roi(box, stride: int, fmap_h: int, fmap_w: int):
    """Pixel box (x, y, w, h) -> feature-map rows/cols (y0, x0, h', w'), clipped to the map."""
    x, y, w, h = box
    x0, y0 = x // stride, y // stride
    w1 = max(1, -(-(x + w) // stride) - x0)
    h1 = max(1, -(-(y + h) // stride) - y0)
    x1, y1 = min(x0 + w1, fmap_w), min(y0 + h1, fmap_h)
    x0, y0 = max(x0, 0), max(y0, 0)
    if x1 <= x0 or y1 <= y0:
        raise InvalidRoi(f"ROI {tuple(box)} falls outside the {fmap_h}x{fmap_w} feature map")
    return y0, x0, y1 - y0, x1 - x0


def roi_bins(extent: int, parts: int) -> list[tuple[int, int]]:
    """Bin i covers [floor(i*extent/parts), ceil((i+1)*extent/parts)), never empty."""
    bins = []
    for i in range(parts):
        a = (i * extent) // parts
        b = -(-((i + 1) * extent) // parts)
        bins.append((a, max(b, a + 1)))
    return bins


def _bin_index(extent: int, parts: int):
    """Gather indices (parts, width) of every bin plus a validity mask."""
    bins = roi_bins(extent, parts)
    width = max(b - a for a, b in bins)
    idx = np.array([[min(a + t, b - 1) for t in range(width)] for a, b in bins])
    valid = np.array([[a + t < b for t in range(width)] for a, b in bins])
    return idx, valid


def roi_pool_forward(fmap, boxes, grid: tuple[int, int], stride: int):
    """Max-pool each pixel-space box of ``boxes`` onto an HxW grid of the shared map.

    Returns (N, C, H, W) and a cache holding each output's flat argmax into fmap.
    """
    C, Hf, Wf = fmap.shape
    GH, GW = grid
    n = len(boxes)
    out = np.empty((n, C, GH, GW), dtype=fmap.dtype)
    arg = np.empty((n, C, GH, GW), dtype=np.int64)
    lowest = np.finfo(fmap.dtype).min if fmap.dtype.kind == "f" else np.iinfo(fmap.dtype).min
    ci = np.arange(C)[:, None, None, None]
    gi = np.arange(GH)[None, :, None, None]
    for k, box in enumerate(boxes):
        try:
            y0, x0, h, w = map_roi(box, stride, Hf, Wf)
        except InvalidRoi as exc:
            raise InvalidRoi(f"roi {k}: {exc}") from None
        crop = fmap[:, y0 : y0 + h, x0 : x0 + w]
        ridx, rvalid = _bin_index(h, GH)
        cidx, cvalid = _bin_index(w, GW)
        # rows: (C, GH, R, w) -> max over R
        rows = crop[:, ridx, :]
        if not rvalid.all():
            rows = np.where(rvalid[None, :, :, None], rows, lowest)
        rarg = rows.argmax(axis=2)  # (C, GH, w)
        rmax = np.take_along_axis(rows, rarg[:, :, None, :], axis=2)[:, :, 0, :]
        # columns: (C, GH, GW, L) -> max over L
        cols = rmax[:, :, cidx]
        if not cvalid.all():
            cols = np.where(cvalid[None, None], cols, lowest)
        carg = cols.argmax(axis=3)  # (C, GH, GW)
        out[k] = np.take_along_axis(cols, carg[..., None], axis=3)[..., 0]
        col = cidx[np.arange(GW)[None, None, :], carg]  # crop column per output
        row_sel = ridx[np.arange(GH)[None, :, None], rarg[ci[..., 0], gi[..., 0], col]]
        arg[k] = (np.arange(C)[:, None, None] * Hf + (row_sel + y0)) * Wf + (col + x0)
    return out, (fmap.shape, arg)


def roi_pool_backward(dout, cache):
    fmap_shape, arg = cache
    dflat = np.bincount(
        arg.ravel(), weights=dout.ravel().astype(np.float64), minlength=int(np.prod(fmap_shape))
    )
    return dflat.reshape(fmap_shape).astype(dout.dtype, copy=False)


def linear_forward(x, W, b):
    """x (N, F) @ W (F, G) + b (G,)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise InvalidShape(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def linear_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


LOSS_EPS = 1e-7


def phoc_loss(pred, target, eps: float = LOSS_EPS):
    """Sigmoid cross entropy averaged over attributes, summed over ROIs.

    ``pred`` holds probabilities, shape (n,) or (N, n).  Returns the batch
    loss and its gradient with respect to the pre-sigmoid logits.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[-1]
    p = np.clip(pred.astype(np.float64), eps, 1.0 - eps)
    t = target.astype(np.float64)
    per_attr = t * np.log(p) + (1.0 - t) * np.log1p(-p)
    loss = -per_attr.sum() / n
    grad = (pred - target) / n
    return float(loss), grad.astype(pred.dtype, copy=False)


def per_roi_loss(pred, target, eps: float = LOSS_EPS) -> np.ndarray:
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean(axis=-1)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
