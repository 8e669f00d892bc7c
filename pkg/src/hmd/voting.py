"""Hough vote maps and peak extraction.

Every pixel runs through every tree; the leaf's stored displacements for
each foreground class splat posterior-weighted mass at pixel+vote, and
detections are the strict local maxima of the smoothed accumulator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .forest import FOREGROUND_CLASSES, ClassLabel, HoughForestModel
from .forest import apply_forest as _apply_forest
from .image import MultiChannelImage, write_pgm

MAP_MAGIC = b"HMDHMAP1"


@dataclass(frozen=True)
class HoughMap:
    """Vote accumulator for one foreground class, same size as the image."""

    class_label: ClassLabel
    values: np.ndarray  # (H, W) float64, non-negative

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"map must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or (v < 0).any():
            raise ValueError("map entries must be finite and non-negative")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Detection:
    """A Hough-map peak: position (x, y), its map value, and the class."""

    position: tuple[int, int]
    score: float
    class_label: ClassLabel

    def __post_init__(self):
        if not self.score > 0.0:
            raise ValueError(f"detection score must be positive, got {self.score}")


def cast_votes(model: HoughForestModel, image: MultiChannelImage) -> dict:
    """Accumulate displacement votes from every pixel through every tree.

    Each foreground vote v stored at the reached leaf adds
    posterior[c] / len(votes[c]) at pixel+v (rounded to the nearest pixel,
    out-of-image votes dropped); maps are divided by the tree count.
    Returns {MOTHER: HoughMap, DAUGHTER: HoughMap}.
    """
    vote_maps, _ = _apply_forest(model, image)
    return {
        cls: HoughMap(cls, vote_maps[i]) for i, cls in enumerate(FOREGROUND_CLASSES)
    }


def posterior_maps(model: HoughForestModel, image: MultiChannelImage) -> np.ndarray:
    """Per-pixel forest-averaged class posteriors, shape (3, H, W)."""
    _, post = _apply_forest(model, image)
    return post


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps out to 3 sigma."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    if sigma == 0.0 or radius == 0:
        return np.ones(1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth(hough_map: HoughMap, sigma: float) -> HoughMap:
    """Separable Gaussian blur with reflective borders; sigma 0 is identity."""
    k = gaussian_kernel(sigma)
    if k.size == 1:
        return hough_map
    r = k.size // 2
    padded = np.pad(hough_map.values, r, mode="symmetric")
    rows = np.apply_along_axis(np.convolve, 1, padded, k, "valid")
    out = np.apply_along_axis(np.convolve, 0, rows, k, "valid")
    # convolving non-negative data with a non-negative kernel stays
    # non-negative up to rounding; clamp the dust
    return HoughMap(hough_map.class_label, np.maximum(out, 0.0))


def _disk_footprint(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    footprint = (xx * xx + yy * yy) <= radius * radius
    footprint[radius, radius] = False  # neighbors only
    return footprint


def nms(hough_map: HoughMap, radius: int, threshold: float) -> list[Detection]:
    """Strict local maxima within a Euclidean disk, at or above threshold.

    Sorted by descending score; ties fall back to row-major position.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    values = hough_map.values
    neighbor_max = ndimage.maximum_filter(
        values, footprint=_disk_footprint(radius), mode="constant", cval=-np.inf
    )
    ys, xs = np.nonzero((values > neighbor_max) & (values >= threshold))
    order = np.lexsort((xs, ys, -values[ys, xs]))
    return [
        Detection((int(xs[i]), int(ys[i])), float(values[ys[i], xs[i]]), hough_map.class_label)
        for i in order
    ]


def save_map(hough_map: HoughMap, path) -> None:
    """Raw map file: magic, class, height, width (u32 LE), then row-major f64."""
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<III", int(hough_map.class_label), *hough_map.values.shape))
        fh.write(hough_map.values.astype("<f8").tobytes())


def load_map(path) -> HoughMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise ValueError(f"{path}: not a Hough map file")
    cls, h, w = struct.unpack_from("<III", data, len(MAP_MAGIC))
    start = len(MAP_MAGIC) + 12
    expected = h * w * 8
    if len(data) - start != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(data) - start}")
    values = np.frombuffer(data[start:], dtype="<f8").reshape(h, w)
    return HoughMap(ClassLabel(cls), values)


def map_to_pgm(hough_map: HoughMap, path, maxval: int = 255) -> None:
    """Debug visualization: map rescaled so its maximum hits white."""
    peak = hough_map.values.max()
    scaled = hough_map.values / peak if peak > 0 else hough_map.values
    write_pgm(path, scaled, maxval=maxval)
