"""Region-based PHOC network: shared conv trunk, ROI max pooling, sigmoid head."""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..imaging import BBox, GrayImage
from . import layers as L

MAGIC = b"RPH1"


@dataclass(frozen=True)
class RoiSpec:
    bbox: BBox
    tile_id: int = 0


def default_arch(out_dim: int = 604, phoc_hash: str = "") -> dict:
    return {
        "in_channels": 1,
        "trunk": [
            {"kind": "conv", "out": 32, "k": 3},
            {"kind": "relu"},
            {"kind": "conv", "out": 32, "k": 3},
            {"kind": "relu"},
            {"kind": "pool", "size": 2},
            {"kind": "conv", "out": 64, "k": 3},
            {"kind": "relu"},
            {"kind": "conv", "out": 64, "k": 3},
            {"kind": "relu"},
            {"kind": "pool", "size": 2},
        ],
        "roi_grid": [3, 8],
        "head": [512],
        "out_dim": out_dim,
        "phoc_hash": phoc_hash,
        "input_mean": 0.0,
    }


def _box_tuple(roi) -> tuple[int, int, int, int]:
    if isinstance(roi, RoiSpec):
        return roi.bbox.as_tuple()
    if isinstance(roi, BBox):
        return roi.as_tuple()
    return tuple(int(v) for v in roi)


class RegionPhocNet:
    """Parameters plus the architecture descriptor they were built for."""

    def __init__(self, arch: dict, params: dict[str, np.ndarray]):
        self.arch = copy.deepcopy(arch)
        self.params = params
        self._check()

    # -- construction -------------------------------------------------

    @classmethod
    def initialize(cls, arch: dict, seed: int = 0, dtype=np.float64, zero_last: bool = True):
        """Glorot-uniform weights, zero biases; zero final weights give outputs of exactly 0.5."""
        rng = np.random.default_rng(seed)
        params = {}
        c = arch["in_channels"]
        conv_i = 0
        for layer in arch["trunk"]:
            if layer["kind"] == "conv":
                o, k = layer["out"], layer["k"]
                bound = L.glorot_bound(c * k * k, o * k * k)
                params[f"conv{conv_i}.W"] = rng.uniform(-bound, bound, (o, c, k, k)).astype(dtype)
                params[f"conv{conv_i}.b"] = np.zeros(o, dtype=dtype)
                c = o
                conv_i += 1
        gh, gw = arch["roi_grid"]
        widths = [c * gh * gw] + list(arch["head"]) + [arch["out_dim"]]
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_last:
                W = np.zeros((fi, fo), dtype=dtype)
            else:
                bound = L.glorot_bound(fi, fo)
                W = rng.uniform(-bound, bound, (fi, fo)).astype(dtype)
            params[f"fc{i}.W"] = W
            params[f"fc{i}.b"] = np.zeros(fo, dtype=dtype)
        return cls(arch, params)

    def _check(self):
        c = self.arch["in_channels"]
        conv_i = 0
        for layer in self.arch["trunk"]:
            if layer["kind"] == "conv":
                W = self.params[f"conv{conv_i}.W"]
                if W.shape != (layer["out"], c, layer["k"], layer["k"]):
                    raise L.InvalidShape(f"conv{conv_i}.W has shape {W.shape}")
                c = layer["out"]
                conv_i += 1
            elif layer["kind"] not in ("relu", "pool"):
                raise L.InvalidShape(f"unknown trunk layer {layer['kind']!r}")
        gh, gw = self.arch["roi_grid"]
        fi = c * gh * gw
        for i in range(self.n_fc):
            W = self.params[f"fc{i}.W"]
            if W.shape[0] != fi:
                raise L.InvalidShape(f"fc{i}.W expects {W.shape[0]} inputs, gets {fi}")
            fi = W.shape[1]
        if fi != self.arch["out_dim"]:
            raise L.InvalidShape("head output width does not match out_dim")

    @property
    def n_fc(self) -> int:
        return len(self.arch["head"]) + 1

    @property
    def stride(self) -> int:
        s = 1
        for layer in self.arch["trunk"]:
            if layer["kind"] == "pool":
                s *= layer["size"]
        return s

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "RegionPhocNet":
        return RegionPhocNet(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "RegionPhocNet":
        return RegionPhocNet(self.arch, {k: v.copy() for k, v in self.params.items()})

    # -- input ----------------------------------------------------------

    def prepare(self, tile) -> np.ndarray:
        """Scale 8-bit pixels to [0, 1], subtract the training mean, add a channel axis."""
        px = tile.pixels if isinstance(tile, GrayImage) else np.asarray(tile)
        if px.ndim == 3:
            return px.astype(self.dtype, copy=False)
        x = px.astype(self.dtype) / self.dtype.type(255.0) - self.dtype.type(self.arch.get("input_mean", 0.0))
        return x[None]

    # -- forward / backward ---------------------------------------------

    def trunk_forward(self, x):
        caches = []
        conv_i = 0
        for layer in self.arch["trunk"]:
            kind = layer["kind"]
            if kind == "conv":
                x, cache = L.conv2d_forward(
                    x, self.params[f"conv{conv_i}.W"], self.params[f"conv{conv_i}.b"]
                )
                caches.append(("conv", conv_i, cache))
                conv_i += 1
            elif kind == "relu":
                x, cache = L.relu_forward(x)
                caches.append(("relu", None, cache))
            else:
                x, cache = L.maxpool2d_forward(x, layer["size"])
                caches.append(("pool", None, cache))
        return x, caches

    def head_forward(self, feats):
        caches = []
        h = feats
        for i in range(self.n_fc):
            h, cache = L.linear_forward(h, self.params[f"fc{i}.W"], self.params[f"fc{i}.b"])
            caches.append(("fc", i, cache))
            if i < self.n_fc - 1:
                h, cache = L.relu_forward(h)
                caches.append(("relu", None, cache))
        return h, caches

    def forward_logits(self, tile, rois):
        x = self.prepare(tile)
        fmap, tcache = self.trunk_forward(x)
        boxes = [_box_tuple(r) for r in rois]
        pooled, pcache = L.roi_pool_forward(fmap, boxes, tuple(self.arch["roi_grid"]), self.stride)
        logits, hcache = self.head_forward(pooled.reshape(len(boxes), -1))
        return logits, (tcache, pcache, pooled.shape, hcache)

    def forward(self, tile, rois) -> np.ndarray:
        """PHOC probabilities (N, out_dim); one trunk pass shared by all ROIs."""
        if len(rois) == 0:
            return np.zeros((0, self.arch["out_dim"]), dtype=self.dtype)
        logits, _ = self.forward_logits(tile, rois)
        return L.sigmoid(logits)

    def backward(self, dlogits, cache, fault: str | None = None) -> dict[str, np.ndarray]:
        """Gradients of every parameter given d(loss)/d(logits).

        ``fault="conv_sign"`` flips the sign of the first conv kernel gradient;
        it exists only as a negative control for gradient checking.
        """
        tcache, pcache, pooled_shape, hcache = cache
        grads = {}
        d = dlogits
        for kind, i, c in reversed(hcache):
            if kind == "fc":
                d, grads[f"fc{i}.W"], grads[f"fc{i}.b"] = L.linear_backward(d, c)
            else:
                d = L.relu_backward(d, c)
        d = L.roi_pool_backward(d.reshape(pooled_shape), pcache)
        for pos, (kind, i, c) in enumerate(reversed(tcache)):
            if kind == "conv":
                first = i == 0
                d, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = L.conv2d_backward(
                    d, c, need_dx=not first
                )
            elif kind == "relu":
                d = L.relu_backward(d, c)
            else:
                d = L.maxpool2d_backward(d, c)
        if fault == "conv_sign":
            grads["conv0.W"] = -grads["conv0.W"]
        return {k: grads[k] for k in self.params}

    def loss_and_grads(self, tile, rois, targets, fault: str | None = None):
        logits, cache = self.forward_logits(tile, rois)
        probs = L.sigmoid(logits)
        loss, dlogits = L.phoc_loss(probs, targets)
        return loss, self.backward(dlogits, cache, fault), probs

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        header = dict(self.arch)
        header["params"] = [[k, list(v.shape)] for k, v in self.params.items()]
        header["dtype"] = np.dtype(self.dtype).name
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        return MAGIC + struct.pack("<I", len(hb)) + hb + body

    @classmethod
    def load(cls, path) -> "RegionPhocNet":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
        dtype = np.dtype(header.pop("dtype", "float64"))
        spec = header.pop("params")
        params = {}
        off = 8 + hlen
        for name, shape in spec:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
            params[name] = arr.astype(dtype)
            off += 8 * n
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes after parameters")
        return cls(header, params)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
