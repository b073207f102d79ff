"""Raster primitives for page images.

Pixel arrays are numpy arrays indexed ``[row, col]``; boxes use ``(x, y, w, h)``
with ``x`` the column and ``y`` the row of the top-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class InvalidInput(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise InvalidInput(f"degenerate box {self.as_tuple()}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)

    def union(self, other: "BBox") -> "BBox":
        x, y = min(self.x, other.x), min(self.y, other.y)
        return BBox(x, y, max(self.x2, other.x2) - x, max(self.y2, other.y2) - y)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def shift(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def clip(self, width: int, height: int) -> "BBox | None":
        x, y = max(self.x, 0), max(self.y, 0)
        x2, y2 = min(self.x2, width), min(self.y2, height)
        if x2 <= x or y2 <= y:
            return None
        return BBox(x, y, x2 - x, y2 - y)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass
class GrayImage:
    """8-bit page raster, 0 = black ink, 255 = white paper."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise InvalidInput("GrayImage needs a non-empty 2-D array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class BinaryImage:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise InvalidInput("BinaryImage needs a 2-D mask")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    def to_gray(self) -> GrayImage:
        return GrayImage(np.where(self.mask, 0, 255).astype(np.uint8))


@dataclass
class ConnectedComponent:
    id: int
    bbox: BBox
    pixel_count: int
    core_box: BBox | None = None


@dataclass
class ProjectionProfile:
    values: np.ndarray
    smoothing_window: int


@dataclass
class LineBand:
    id: int
    y_top: int
    y_bottom: int
    members: list[int] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.y_bottom - self.y_top + 1


def load_gray(path) -> GrayImage:
    """Read a PGM/PNG (or anything Pillow understands) as 8-bit grayscale."""
    from PIL import Image

    with Image.open(Path(path)) as im:
        return GrayImage(np.array(im.convert("L")))


def save_gray(img: GrayImage, path) -> None:
    from PIL import Image

    Image.fromarray(img.pixels, mode="L").save(Path(path))


def binarize(img: GrayImage, threshold_factor: float = 0.75) -> BinaryImage:
    if not 0 < threshold_factor < 1:
        raise InvalidInput("threshold_factor must lie in (0, 1)")
    px = img.pixels
    if px.size == 0:
        raise InvalidInput("empty image")
    threshold = threshold_factor * float(px.mean(dtype=np.float64))
    return BinaryImage(px.astype(np.float64) <= threshold)


_EIGHT = np.ones((3, 3), dtype=bool)


def label_components(bin_img: BinaryImage) -> tuple[np.ndarray, int]:
    """8-connected labelling; label k+1 belongs to component id k."""
    labels, n = ndimage.label(bin_img.mask, structure=_EIGHT)
    # ndimage numbers labels in raster order of each component's first pixel,
    # which is the id order we promise.
    return labels, n


def connected_components(bin_img: BinaryImage, labels: np.ndarray | None = None):
    if labels is None:
        labels, n = label_components(bin_img)
    else:
        n = int(labels.max())
    if n == 0:
        return []
    slices = ndimage.find_objects(labels)
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    ccs = []
    for i, sl in enumerate(slices):
        rs, cs = sl
        box = BBox(cs.start, rs.start, cs.stop - cs.start, rs.stop - rs.start)
        ccs.append(ConnectedComponent(id=i, bbox=box, pixel_count=int(counts[i + 1])))
    return ccs


def core_box(
    cc: ConnectedComponent,
    bin_img: BinaryImage,
    density: float = 0.9,
    labels: np.ndarray | None = None,
) -> BBox:
    """Grow a box from the centre of ``cc.bbox`` until it holds ``density`` of the pixels.

    Each step extends one side by one pixel, picking the side that gains the
    most component pixels (ties: down, up, right, left).  With ``labels`` only
    this component's pixels count; without, all ink inside its box does.
    """
    if not 0 < density <= 1:
        raise InvalidInput("density must lie in (0, 1]")
    b = cc.bbox
    if labels is not None:
        own = labels[b.y : b.y2, b.x : b.x2] == cc.id + 1
    else:
        own = bin_img.mask[b.y : b.y2, b.x : b.x2]
    target = density * cc.pixel_count
    # Integral image, padded so that ii[r, c] = sum(own[:r, :c]).
    ii = np.zeros((b.h + 1, b.w + 1), dtype=np.int64)
    ii[1:, 1:] = own.cumsum(0).cumsum(1)

    def count(r0, r1, c0, c1):  # half-open
        return int(ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0])

    r0 = (b.h - 1) // 2
    c0 = (b.w - 1) // 2
    r1, c1 = r0 + 1, c0 + 1
    inside = count(r0, r1, c0, c1)
    while inside < target:
        options = []
        if r1 < b.h:
            options.append((count(r1, r1 + 1, c0, c1), "down"))
        if r0 > 0:
            options.append((count(r0 - 1, r0, c0, c1), "up"))
        if c1 < b.w:
            options.append((count(r0, r1, c1, c1 + 1), "right"))
        if c0 > 0:
            options.append((count(r0, r1, c0 - 1, c0), "left"))
        if not options:
            break
        gain, side = max(options, key=lambda o: o[0])  # first max wins the tie
        if side == "down":
            r1 += 1
        elif side == "up":
            r0 -= 1
        elif side == "right":
            c1 += 1
        else:
            c0 -= 1
        inside += gain
    return BBox(b.x + c0, b.y + r0, c1 - c0, r1 - r0)


def compute_core_boxes(ccs, bin_img: BinaryImage, labels: np.ndarray, density: float = 0.9):
    for cc in ccs:
        cc.core_box = core_box(cc, bin_img, density, labels)
    return ccs


def _moving_average(raw: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    n = raw.size
    csum = np.concatenate([[0.0], np.cumsum(raw, dtype=np.float64)])
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def projection_profile(ccs, height: int, window: int = 15) -> ProjectionProfile:
    if window < 1 or window % 2 == 0:
        raise InvalidInput("smoothing window must be a positive odd number")
    raw = np.zeros(height, dtype=np.float64)
    for cc in ccs:
        box = cc.core_box or cc.bbox
        raw[max(box.y, 0) : min(box.y2, height)] += box.w
    return ProjectionProfile(_moving_average(raw, window), window)


def line_hypotheses(profile: ProjectionProfile, min_frac: float = 0.5) -> list[LineBand]:
    """Split rows at deep local minima of the profile; plateaus count once at their centre."""
    if not 0 <= min_frac < 1:
        raise InvalidInput("min_frac must lie in [0, 1)")
    v = np.asarray(profile.values, dtype=np.float64)
    n = v.size
    positive = v[v > 0]
    if positive.size == 0:
        return []
    gate = min_frac * positive.mean()

    # Run-length encode equal values so plateaus are handled as single points.
    starts = np.flatnonzero(np.concatenate([[True], v[1:] != v[:-1]]))
    ends = np.concatenate([starts[1:], [n]]) - 1
    seps = []
    for i, (s, e) in enumerate(zip(starts, ends)):
        left = v[starts[i - 1]] if i > 0 else np.inf
        right = v[starts[i + 1]] if i + 1 < len(starts) else np.inf
        if v[s] < left and v[s] < right and v[s] < gate:
            seps.append((s + e) // 2)

    bounds = [-1] + seps + [n]
    bands = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        top, bottom = a + 1, b - 1
        if top > bottom or not np.any(v[top : bottom + 1] > 0):
            continue
        bands.append(LineBand(id=len(bands), y_top=top, y_bottom=bottom))
    return bands


def assign_to_lines(ccs, bands: list[LineBand], overlap_frac: float = 0.5) -> list[LineBand]:
    if not 0 < overlap_frac <= 1:
        raise InvalidInput("overlap_frac must lie in (0, 1]")
    for band in bands:
        band.members = []
    if not bands:
        return bands
    for cc in ccs:
        box = cc.core_box or cc.bbox
        inter = [
            max(0, min(box.y2, band.y_bottom + 1) - max(box.y, band.y_top)) for band in bands
        ]
        hit = False
        for band, overlap in zip(bands, inter):
            if overlap >= overlap_frac * box.h:
                band.members.append(cc.id)
                hit = True
        if not hit:
            best = int(np.argmax(inter))  # first max = upper band
            bands[best].members.append(cc.id)
    return bands


@dataclass
class PageAnalysis:
    """Everything the proposal stage needs from one page."""

    binary: BinaryImage
    labels: np.ndarray
    components: list[ConnectedComponent]
    bands: list[LineBand]


def analyse_page(
    img: GrayImage,
    threshold_factor: float = 0.75,
    core_density: float = 0.9,
    window: int = 15,
    min_frac: float = 0.5,
    overlap_frac: float = 0.5,
) -> PageAnalysis:
    bin_img = binarize(img, threshold_factor)
    labels, _ = label_components(bin_img)
    ccs = connected_components(bin_img, labels)
    compute_core_boxes(ccs, bin_img, labels, core_density)
    profile = projection_profile(ccs, img.height, window)
    bands = assign_to_lines(ccs, line_hypotheses(profile, min_frac), overlap_frac)
    return PageAnalysis(bin_img, labels, ccs, bands)
