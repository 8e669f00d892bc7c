"""Two-channel frame representation, PGM file I/O and integral images.

Frames are stored as float64 intensities in [0, 1], one plane per channel
(channel 0: membrane, channel 1: nucleus by convention). Integral images
give O(1) sums over axis-aligned half-open rectangles [x0,x1) x [y0,y1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Rect = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


class PgmError(ValueError):
    """Malformed or unsupported PGM data."""


@dataclass(frozen=True)
class MultiChannelImage:
    """Immutable stack of same-sized intensity planes, values in [0, 1]."""

    pixels: np.ndarray  # (channels, height, width) float64

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ValueError(f"pixels must be (channels, height, width), got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1 or px.shape[2] < 1:
            raise ValueError(f"empty image: shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite intensities")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def channel(self, index: int) -> np.ndarray:
        if not 0 <= index < self.channels:
            raise IndexError(f"channel {index} out of range (have {self.channels})")
        return self.pixels[index]


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area table: table[y, x] = sum of intensities over [0,x) x [0,y)."""

    table: np.ndarray  # (height+1, width+1) float64

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 2 or t.shape[1] < 2:
            raise ValueError(f"integral table must be (height+1, width+1), got {t.shape}")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "table", t)

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1


def build_integral(image: MultiChannelImage, channel: int) -> IntegralImage:
    """Cumulative-sum table for one channel; row 0 and column 0 are zero."""
    plane = image.channel(channel)
    table = np.zeros((image.height + 1, image.width + 1), dtype=np.float64)
    np.cumsum(np.cumsum(plane, axis=0), axis=1, out=table[1:, 1:])
    return IntegralImage(table)


def rect_sum(ii: IntegralImage, rect: Rect) -> float:
    """Sum of intensities over `rect` clipped to the image bounds.

    The rectangle is half-open: (x0, y0, x1, y1) covers pixels with
    x0 <= x < x1 and y0 <= y < y1. A rectangle with no area after
    clipping sums to 0.
    """
    x0, y0, x1, y1 = rect
    x0 = min(max(x0, 0), ii.width)
    x1 = min(max(x1, 0), ii.width)
    y0 = min(max(y0, 0), ii.height)
    y1 = min(max(y1, 0), ii.height)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    t = ii.table
    return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file as float64 intensities in [0, 1].

    Values are divided by the declared maxval. Samples wider than 8 bit
    are big-endian, per the PGM convention. Raises PgmError on any
    header or payload defect, FileNotFoundError if the file is absent.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":  # comment runs to end of line
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        return data[start:pos]

    if next_token() != b"P5":
        raise PgmError(f"{path}: not a binary PGM (missing P5 magic)")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise PgmError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1:
        raise PgmError(f"{path}: bad dimensions {width}x{height}")
    if maxval == 0:
        raise PgmError(f"{path}: maxval of 0")
    if not 0 < maxval < 65536:
        raise PgmError(f"{path}: maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raw = data[pos:]
    if len(raw) != expected:
        raise PgmError(f"{path}: expected {expected} sample bytes, found {len(raw)}")
    samples = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    if samples.max(initial=0) > maxval:
        raise PgmError(f"{path}: sample exceeds declared maxval {maxval}")
    return samples.astype(np.float64) / float(maxval)


def write_pgm(path, plane: np.ndarray, maxval: int = 255) -> None:
    """Write one intensity plane (values in [0, 1]) as binary PGM."""
    if not 0 < maxval < 65536:
        raise PgmError(f"maxval {maxval} out of range")
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise PgmError(f"plane must be 2-D, got shape {plane.shape}")
    height, width = plane.shape
    quantized = np.rint(np.clip(plane, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.astype(dtype).tobytes())


def load_image(paths) -> MultiChannelImage:
    """Load one PGM file per channel into a multichannel frame.

    All files must agree on dimensions; intensities come out normalized
    by each file's declared maxval.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one channel path")
    planes = [read_pgm(p) for p in paths]
    first = planes[0].shape
    for p, plane in zip(paths[1:], planes[1:]):
        if plane.shape != first:
            raise PgmError(
                f"channel dimension mismatch: {paths[0]} is {first[1]}x{first[0]}, "
                f"{p} is {plane.shape[1]}x{plane.shape[0]}"
            )
    return MultiChannelImage(np.stack(planes))


def save_image(image: MultiChannelImage, paths, maxval: int = 255) -> None:
    """Write each channel of `image` to the corresponding PGM path."""
    paths = list(paths)
    if len(paths) != image.channels:
        raise ValueError(f"need {image.channels} paths, got {len(paths)}")
    for ch, path in enumerate(paths):
        write_pgm(path, image.channel(ch), maxval=maxval)
