"""Randomly sampled Haar-like features evaluated through integral images.

A feature is one or two axis-aligned rectangles in patch-relative
coordinates. Responses are rectangle *means* (difference of means in
two-rectangle mode) so a shared threshold grid stays meaningful across
rectangle sizes. Rectangles falling partly outside the image are clipped;
a rectangle clipped to zero area contributes a mean of 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .image import IntegralImage, Rect, rect_sum


class FeatureMode(IntEnum):
    SINGLE_RECT_MEAN = 0
    TWO_RECT_MEAN_DIFF = 1


@dataclass(frozen=True)
class PatchSpec:
    """Sampling window: half-size in pixels and number of image channels."""

    patch_radius: int = 12
    channel_count: int = 2

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError(f"patch_radius must be >= 1, got {self.patch_radius}")
        if self.channel_count < 1:
            raise ValueError(f"channel_count must be >= 1, got {self.channel_count}")


@dataclass(frozen=True)
class HaarFeature:
    """One- or two-rectangle mean feature on a single channel.

    Rectangles are half-open (x0, y0, x1, y1) relative to the evaluation
    center; rect_b is ignored in single-rectangle mode.
    """

    channel: int
    mode: FeatureMode
    rect_a: Rect
    rect_b: Rect | None = None

    def __post_init__(self):
        if self.channel < 0:
            raise ValueError(f"channel index must be >= 0, got {self.channel}")
        for rect in (self.rect_a, self.rect_b):
            if rect is not None:
                x0, y0, x1, y1 = rect
                if x1 <= x0 or y1 <= y0:
                    raise ValueError(f"rectangle {rect} has no area")
        if self.mode == FeatureMode.TWO_RECT_MEAN_DIFF and self.rect_b is None:
            raise ValueError("two-rectangle mode needs rect_b")


def _sample_rect(rng: np.random.Generator, radius: int) -> Rect:
    # Half-open coordinates in [-radius, radius+1] cover exactly the
    # (2*radius+1)^2 window pixels.
    span = 2 * radius + 2
    x0, x1 = np.sort(rng.choice(span, size=2, replace=False)) - radius
    y0, y1 = np.sort(rng.choice(span, size=2, replace=False)) - radius
    return (int(x0), int(y0), int(x1), int(y1))


def sample_feature(rng: np.random.Generator, spec: PatchSpec) -> HaarFeature:
    """Draw a random feature whose rectangles lie inside the patch window."""
    channel = int(rng.integers(spec.channel_count))
    mode = FeatureMode(int(rng.integers(2)))
    rect_a = _sample_rect(rng, spec.patch_radius)
    rect_b = _sample_rect(rng, spec.patch_radius) if mode == FeatureMode.TWO_RECT_MEAN_DIFF else None
    return HaarFeature(channel=channel, mode=mode, rect_a=rect_a, rect_b=rect_b)


def _rect_mean_at(ii: IntegralImage, rect: Rect, cx: int, cy: int) -> float:
    x0, y0, x1, y1 = rect
    ax0 = min(max(cx + x0, 0), ii.width)
    ax1 = min(max(cx + x1, 0), ii.width)
    ay0 = min(max(cy + y0, 0), ii.height)
    ay1 = min(max(cy + y1, 0), ii.height)
    area = (ax1 - ax0) * (ay1 - ay0)
    if area <= 0:
        return 0.0
    return rect_sum(ii, (ax0, ay0, ax1, ay1)) / area


def evaluate_feature(
    feature: HaarFeature,
    integrals: tuple[IntegralImage, ...] | list[IntegralImage],
    center: tuple[int, int],
) -> float:
    """Feature response at `center` (x, y), pure and O(1)."""
    ii = integrals[feature.channel]
    cx, cy = center
    value = _rect_mean_at(ii, feature.rect_a, cx, cy)
    if feature.mode == FeatureMode.TWO_RECT_MEAN_DIFF:
        value -= _rect_mean_at(ii, feature.rect_b, cx, cy)
    return value


def pack_features(features) -> np.ndarray:
    """Flatten features into an int32 array for the compiled kernels.

    Layout per row: channel, mode, ax0, ay0, ax1, ay1, bx0, by0, bx1, by1
    (b-rectangle zeroed in single-rectangle mode).
    """
    packed = np.zeros((len(features), 10), dtype=np.int32)
    for i, f in enumerate(features):
        packed[i, 0] = f.channel
        packed[i, 1] = int(f.mode)
        packed[i, 2:6] = f.rect_a
        if f.rect_b is not None:
            packed[i, 6:10] = f.rect_b
    return packed


def unpack_feature(row: np.ndarray) -> HaarFeature:
    """Inverse of `pack_features` for a single row."""
    mode = FeatureMode(int(row[1]))
    rect_b = None
    if mode == FeatureMode.TWO_RECT_MEAN_DIFF:
        rect_b = (int(row[6]), int(row[7]), int(row[8]), int(row[9]))
    return HaarFeature(
        channel=int(row[0]),
        mode=mode,
        rect_a=(int(row[2]), int(row[3]), int(row[4]), int(row[5])),
        rect_b=rect_b,
    )
