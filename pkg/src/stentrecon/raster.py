"""Grayscale raster primitives shared by the detection stages.

Images are float64 arrays in [0, 1], row-major, indexed (row, col). Histograms
are always 256 bins over quantized levels round(value * 255). Everything here
is deterministic: no RNG, ties broken by the smallest qualifying index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# ITU-R BT.601 luma weights, the same triple used by Matlab's rgb2gray.
LUMA_WEIGHTS = (0.2989, 0.5870, 0.1140)


class DegenerateHistogramError(ValueError):
    """Raised when a threshold is requested for a constant image."""


class RasterParameterError(ValueError):
    """Raised for out-of-domain raster op parameters."""


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise RasterParameterError("GrayImage needs a non-empty 2-d array")
        if px.min() < 0.0 or px.max() > 1.0:
            raise RasterParameterError("GrayImage intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BinaryImage:
    """Boolean mask with the same indexing conventions as GrayImage."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or m.size == 0:
            raise RasterParameterError("BinaryImage needs a non-empty 2-d array")
        object.__setattr__(self, "mask", m.astype(bool))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def inverted(self) -> "BinaryImage":
        return BinaryImage(~self.mask)


@dataclass(frozen=True)
class PixelRegion:
    """One 8-connected pixel component.

    pixels: (n, 2) int array of (row, col), in scan order.
    contour: (m, 2) int array, the region's outer boundary pixels as a closed
        Moore chain (first pixel not repeated at the end).
    """

    pixels: np.ndarray
    centroid: tuple[float, float]
    contour: np.ndarray = field(repr=False)

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def contour_length(self) -> int:
        return int(self.contour.shape[0])


def to_grayscale(rgb: np.ndarray) -> GrayImage:
    """Collapse an (h, w, 3) array in [0, 1] to luma per BT.601."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise RasterParameterError("expected an (h, w, 3) array")
    r, g, b = LUMA_WEIGHTS
    luma = rgb[..., 0] * r + rgb[..., 1] * g + rgb[..., 2] * b
    return GrayImage(np.clip(luma, 0.0, 1.0))


def quantize_levels(image: GrayImage) -> np.ndarray:
    """Quantize intensities to integer levels 0..255 (round half up via rint)."""
    return np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.int64)


def histogram256(image: GrayImage) -> np.ndarray:
    """256-bin count histogram over quantized levels. Sums to width*height."""
    return np.bincount(quantize_levels(image).ravel(), minlength=256)


def otsu_threshold(image: GrayImage) -> float:
    """Threshold maximizing between-class variance over the 256-bin histogram.

    Returns the level scaled to [0, 1] (level / 255). Ties resolve to the
    smallest level. A constant image has no two classes to separate and raises
    DegenerateHistogramError.
    """
    hist = histogram256(image)
    occupied = np.nonzero(hist)[0]
    if occupied.size < 2:
        raise DegenerateHistogramError("constant image has no threshold")

    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    weights = hist.astype(np.float64) / total
    # Cumulative class-0 weight and mean for every candidate split t
    # (class 0 = levels <= t, class 1 = levels > t).
    w0 = np.cumsum(weights)
    mu_acc = np.cumsum(weights * levels)
    mu_total = mu_acc[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(256)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(valid, mu_acc / w0, 0.0)
        mu1 = np.where(valid, (mu_total - mu_acc) / w1, 0.0)
    between[valid] = w0[valid] * w1[valid] * (mu0[valid] - mu1[valid]) ** 2
    best = int(np.argmax(between))  # argmax returns the first (smallest) maximizer
    return best / 255.0


def binarize(image: GrayImage, threshold: float) -> BinaryImage:
    """Foreground = pixels strictly brighter than the threshold."""
    return BinaryImage(image.pixels > threshold)


def gamma_correct(
    image: GrayImage,
    a: float,
    b: float,
    c: float,
    d: float,
    gamma: float,
) -> GrayImage:
    """Map [a, b] onto [c, d] through a power curve.

    out = (d - c) * ((in - a) / (b - a)) ** gamma + c, with inputs clamped to
    [a, b] first. gamma < 1 brightens the middle of the range.
    """
    if gamma <= 0.0:
        raise RasterParameterError("gamma must be positive")
    if b <= a:
        raise RasterParameterError("need b > a for the input window")
    if d < c:
        raise RasterParameterError("need d >= c for the output window")
    clamped = np.clip(image.pixels, a, b)
    out = (d - c) * ((clamped - a) / (b - a)) ** gamma + c
    return GrayImage(np.clip(out, 0.0, 1.0))


def histogram_cutoff_b(image: GrayImage, count_threshold: int = 20) -> tuple[float, bool]:
    """Pick the gamma window's upper bound from the histogram tail.

    Returns (b, saturated): b = i/256 for the first (lowest) level i whose count
    falls below count_threshold. If every level is populated at or above the
    threshold, b = 1.0 and saturated is True.
    """
    hist = histogram256(image)
    below = np.nonzero(hist < count_threshold)[0]
    if below.size == 0:
        return 1.0, True
    return float(below[0]) / 256.0, False


def dilate_mask(mask: BinaryImage, radius: int) -> BinaryImage:
    """Grow true pixels to all neighbors within Chebyshev distance <= radius."""
    if radius < 0:
        raise RasterParameterError("radius must be >= 0")
    if radius == 0:
        return BinaryImage(mask.mask.copy())
    size = 2 * radius + 1
    grown = ndimage.maximum_filter(mask.mask, size=size, mode="constant", cval=False)
    return BinaryImage(grown)


# Moore neighborhood in clockwise order starting from west, for (row, col).
_MOORE = np.array(
    [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)],
    dtype=np.int64,
)


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Ordered outer boundary of the true pixels (Moore-neighbor tracing).

    mask must contain exactly one 8-connected component. Returns (m, 2) int
    array of (row, col) forming a closed chain; single pixels give one entry.
    Thin parts are walked on both sides, so a 1 px line of n pixels yields a
    chain of 2n - 2 (interior pixels appear twice, matching perimeter counts).
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise RasterParameterError("cannot trace an empty mask")
    if rows.size == 1:
        return np.array([[rows[0], cols[0]]], dtype=np.int64)

    h, w = mask.shape
    moore = [tuple(d) for d in _MOORE]

    def is_set(r: int, c: int) -> bool:
        return 0 <= r < h and 0 <= c < w and bool(mask[r, c])

    # Topmost-leftmost pixel; its west neighbor is guaranteed background.
    start = (int(rows[0]), int(cols[0]))
    boundary: list[tuple[int, int]] = []
    cur = start
    backtrack = 0  # direction (index into moore) of the background we came from
    first_edge = None
    limit = 4 * int(rows.size) + 8
    while True:
        nxt = None
        for k in range(1, 9):
            d = (backtrack + k) % 8
            r = cur[0] + moore[d][0]
            c = cur[1] + moore[d][1]
            if is_set(r, c):
                nxt = (r, c)
                found_dir = d
                break
        if nxt is None:
            boundary.append(cur)
            break  # cannot happen for components of 2+ pixels, kept defensive
        edge = (cur, nxt)
        if edge == first_edge:
            break  # walked all the way around
        if first_edge is None:
            first_edge = edge
        boundary.append(cur)
        # New backtrack: the last background neighbor checked before nxt,
        # re-expressed as a direction out of nxt.
        prev_d = (found_dir - 1) % 8
        back_px = (cur[0] + moore[prev_d][0], cur[1] + moore[prev_d][1])
        backtrack = moore.index((back_px[0] - nxt[0], back_px[1] - nxt[1]))
        cur = nxt
        if len(boundary) > limit:
            raise RuntimeError("boundary trace failed to close")
    return np.array(boundary, dtype=np.int64)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def connected_regions(image: BinaryImage, min_area: int = 1) -> list[PixelRegion]:
    """8-connected components of the true pixels, discarding area < min_area.

    Components come back in label scan order. Centroid is the pixel mean
    (row, col); contour is the Moore boundary chain.
    """
    if min_area < 1:
        raise RasterParameterError("min_area must be >= 1")
    labels, count = ndimage.label(image.mask, structure=_EIGHT_CONNECTED)
    if count == 0:
        return []
    regions: list[PixelRegion] = []
    slices = ndimage.find_objects(labels)
    for idx, slc in enumerate(slices, start=1):
        local = labels[slc] == idx
        n = int(local.sum())
        if n < min_area:
            continue
        rr, cc = np.nonzero(local)
        r0, c0 = slc[0].start, slc[1].start
        pixels = np.column_stack([rr + r0, cc + c0]).astype(np.int64)
        centroid = (float(pixels[:, 0].mean()), float(pixels[:, 1].mean()))
        contour = trace_boundary(local)
        contour[:, 0] += r0
        contour[:, 1] += c0
        regions.append(PixelRegion(pixels=pixels, centroid=centroid, contour=contour))
    return regions
