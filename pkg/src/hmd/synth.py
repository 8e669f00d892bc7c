"""Synthetic two-channel cell movies with scripted divisions.

Channel 0 carries membrane rings, channel 1 nucleus blobs. Nuclei share
one brightness, and every resting cell shares one nucleus size, so for
them class identity lives in the membrane:
ordinary cells are dim ellipses that drift a little between frames,
mothers are large round cells with a boosted ring, and optional
confuser cells reuse the mother look with a sector of the ring missing.
A scripted division puts a mother in frame t and an adjacent ellipse
pair in frame t+1 whose midpoint sits at a configured random distance
from the mother; daughters run only a touch brighter than resting cells,
which keeps them much harder to detect than mothers. Ground truth
carries the drawn outlines and the mother-to-pair links.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .crf import DistanceStats
from .evaluation import GroundTruth, GtContour, GtEvent, GtFrame
from .forest import ClassLabel
from .image import MultiChannelImage

POLYGON_VERTICES = 32
PLACEMENT_RETRIES = 400

MEMBRANE_WIDTH = 0.16  # ring thickness relative to the cell radius
NUCLEUS_SCALE = 0.42  # nucleus blob radius relative to the midrange cell radius
# mothers (and confusers) are larger than ordinary cells, which keeps the
# membrane outside the reach of any small patch centered on the interior
MOTHER_RADIUS_FACTOR = 1.7


class PlacementError(RuntimeError):
    """Could not place a cell without overlap within the retry budget."""


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 96
    frame_count: int = 6
    cell_count: int = 12
    mitosis_event_count: int = 2
    cell_radius_range: tuple[float, float] = (4.0, 7.0)
    mother_brightness_boost: float = 1.6
    pair_distance: DistanceStats = DistanceStats(10.0, 2.0)
    noise_sigma: float = 0.05
    # broken mother rings as bright as mothers: locally they imitate
    # mother rims, so telling them apart takes more than local appearance
    distractor_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if self.cell_count < 0:
            raise ValueError("cell_count must be >= 0")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be >= 0")
        if self.mitosis_event_count < 0:
            raise ValueError("mitosis_event_count must be >= 0")
        if self.mitosis_event_count > 0 and self.frame_count < 2:
            raise ValueError("events need at least 2 frames")
        lo, hi = self.cell_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad cell_radius_range {self.cell_radius_range}")
        if self.mother_brightness_boost <= 1.0:
            raise ValueError("mother_brightness_boost must be > 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class _Cell:
    cx: float
    cy: float
    a: float  # semi-axis along theta
    b: float
    theta: float
    membrane_amp: float
    nucleus_amp: float
    # nuclei share one absolute size regardless of cell size, so a small
    # patch at the center cannot tell cell types apart
    nucleus_sigma: float = 2.0
    # ring coverage: arc_span 2*pi draws the full membrane, less leaves a gap
    arc_start: float = 0.0
    arc_span: float = 2.0 * math.pi


def _cell_polygon(cell: _Cell) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * math.pi, POLYGON_VERTICES, endpoint=False)
    ex = cell.a * np.cos(t)
    ey = cell.b * np.sin(t)
    cos_t, sin_t = math.cos(cell.theta), math.sin(cell.theta)
    xs = cell.cx + ex * cos_t - ey * sin_t
    ys = cell.cy + ex * sin_t + ey * cos_t
    return np.column_stack((xs, ys))


def _draw_cell(ch0: np.ndarray, ch1: np.ndarray, cell: _Cell) -> None:
    size = ch0.shape[0]
    reach = max(cell.a, cell.b) * (1.0 + 4.0 * MEMBRANE_WIDTH) + 1.0
    x0 = max(0, int(math.floor(cell.cx - reach)))
    x1 = min(size, int(math.ceil(cell.cx + reach)) + 1)
    y0 = max(0, int(math.floor(cell.cy - reach)))
    y1 = min(size, int(math.ceil(cell.cy + reach)) + 1)
    if x1 <= x0 or y1 <= y0:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx = xx - cell.cx
    dy = yy - cell.cy
    cos_t, sin_t = math.cos(cell.theta), math.sin(cell.theta)
    xr = dx * cos_t + dy * sin_t
    yr = -dx * sin_t + dy * cos_t
    rn = np.sqrt((xr / cell.a) ** 2 + (yr / cell.b) ** 2)
    ring = np.exp(-(((rn - 1.0) / MEMBRANE_WIDTH) ** 2))
    if cell.arc_span < 2.0 * math.pi:
        rel = np.mod(np.arctan2(yr, xr) - cell.arc_start, 2.0 * math.pi)
        ring = ring * (rel <= cell.arc_span)
    r_px = np.sqrt(xr ** 2 + yr ** 2)
    blob = np.exp(-((r_px / cell.nucleus_sigma) ** 2))
    ch0[y0:y1, x0:x1] += cell.membrane_amp * ring
    ch1[y0:y1, x0:x1] += cell.nucleus_amp * blob


def _nucleus_amp(rng, config: SynthConfig) -> float:
    # nuclei are equally bright for every cell type, so the nucleus
    # channel carries position but no class identity
    return 0.55 * config.mother_brightness_boost * float(rng.uniform(0.95, 1.05))


def _ring_amp(rng, boost: float, band: tuple[float, float] = (0.42, 0.55)) -> float:
    if boost > 1.0:
        return 0.5 * boost * float(rng.uniform(0.95, 1.05))
    return float(rng.uniform(*band))


def _too_close(cx, cy, r, others, margin=1.5) -> bool:
    for o in others:
        if math.hypot(cx - o.cx, cy - o.cy) < r + max(o.a, o.b) + margin:
            return True
    return False


def _place(rng, size, r, obstacles, margin=1.5):
    border = r + 2.0
    for _ in range(PLACEMENT_RETRIES):
        cx = float(rng.uniform(border, size - border))
        cy = float(rng.uniform(border, size - border))
        if not _too_close(cx, cy, r, obstacles, margin):
            return cx, cy
    raise PlacementError(
        f"no free spot for a radius-{r:.1f} cell after {PLACEMENT_RETRIES} retries"
    )


def generate_sequence(config: SynthConfig):
    """Render one movie. Returns (frames, GroundTruth); deterministic in
    config.seed. Raises PlacementError when the scene cannot fit."""
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    lo, hi = config.cell_radius_range
    nuc_sigma = NUCLEUS_SCALE * (lo + hi) / 2.0

    # script the divisions first: they own their ground space
    event_frames = sorted(int(f) for f in rng.integers(0, config.frame_count - 1,
                                                       size=config.mitosis_event_count))
    mothers_by_frame: dict[int, list[_Cell]] = {}
    daughters_by_frame: dict[int, list[_Cell]] = {}
    scripted: list[_Cell] = []  # everything normal cells must avoid
    events = []
    gt_contours: dict[int, list[GtContour]] = {f: [] for f in range(config.frame_count)}

    for k, frame_t in enumerate(event_frames):
        mother_r = float(rng.uniform(lo, hi)) * MOTHER_RADIUS_FACTOR
        for _ in range(PLACEMENT_RETRIES):
            mcx, mcy = _place(rng, size, mother_r, scripted, margin=3.0)
            # daughter pair: midpoint at ~N(mu, sigma) from the mother
            dist = float(
                np.clip(
                    rng.normal(config.pair_distance.mu, config.pair_distance.sigma),
                    0.3 * config.pair_distance.mu,
                    config.pair_distance.mu + 3.0 * config.pair_distance.sigma,
                )
            )
            phi = float(rng.uniform(0.0, 2.0 * math.pi))
            mid_x = mcx + dist * math.cos(phi)
            mid_y = mcy + dist * math.sin(phi)
            d_r = float(rng.uniform(lo, hi)) * 0.85
            sep = 2.0 * d_r + float(rng.uniform(0.5, 2.0))
            psi = float(rng.uniform(0.0, 2.0 * math.pi))
            ux, uy = math.cos(psi), math.sin(psi)
            centers = [
                (mid_x - ux * sep / 2.0, mid_y - uy * sep / 2.0),
                (mid_x + ux * sep / 2.0, mid_y + uy * sep / 2.0),
            ]
            border = d_r + 2.0
            if all(border <= cx <= size - border and border <= cy <= size - border
                   for cx, cy in centers) and not any(
                _too_close(cx, cy, d_r, scripted, margin=1.0) for cx, cy in centers
            ):
                break
        else:
            raise PlacementError(f"could not script division {k}")

        mother = _Cell(
            cx=mcx, cy=mcy, a=mother_r, b=mother_r, theta=0.0,
            membrane_amp=_ring_amp(rng, config.mother_brightness_boost),
            nucleus_amp=_nucleus_amp(rng, config),
            nucleus_sigma=nuc_sigma,
        )
        mothers_by_frame.setdefault(frame_t, []).append(mother)
        scripted.append(mother)
        gt_contours[frame_t].append(
            GtContour(f"e{k}m", ClassLabel.MOTHER, _cell_polygon(mother))
        )
        pair = []
        for cx, cy in centers:
            daughter = _Cell(
                cx=cx, cy=cy,
                a=d_r, b=d_r * float(rng.uniform(0.75, 0.9)), theta=psi,
                # freshly divided cells run a touch brighter than the
                # resting population, but nowhere near the mother boost,
                # and carry a condensed post-division nucleus
                membrane_amp=_ring_amp(rng, 1.0, band=(0.48, 0.58)),
                nucleus_amp=_nucleus_amp(rng, config),
                nucleus_sigma=0.78 * nuc_sigma,
            )
            pair.append(daughter)
            scripted.append(daughter)
            gt_contours[frame_t + 1].append(
                GtContour(f"e{k}p", ClassLabel.DAUGHTER, _cell_polygon(daughter))
            )
        daughters_by_frame.setdefault(frame_t + 1, []).extend(pair)
        events.append(GtEvent(frame_t, f"e{k}m", f"e{k}p"))

    # persistent background population, clear of every scripted site
    base_cells: list[_Cell] = []
    for _ in range(config.cell_count):
        a = float(rng.uniform(lo, hi))
        b = a * float(rng.uniform(0.6, 0.95))
        cx, cy = _place(rng, size, a, scripted + base_cells, margin=2.0)
        base_cells.append(
            _Cell(
                cx=cx, cy=cy, a=a, b=b, theta=float(rng.uniform(0.0, math.pi)),
                membrane_amp=_ring_amp(rng, 1.0),
                nucleus_amp=_nucleus_amp(rng, config),
                nucleus_sigma=nuc_sigma,
            )
        )
    # confusers: broken mother rings. Same radius band, same brightness,
    # same nucleus, but a sector of the membrane is missing, so any
    # small patch of one matches some patch of a real mother and only
    # the complete configuration tells them apart.
    for _ in range(config.distractor_count):
        r = float(rng.uniform(lo, hi)) * MOTHER_RADIUS_FACTOR
        cx, cy = _place(rng, size, r, scripted + base_cells, margin=2.0)
        base_cells.append(
            _Cell(
                cx=cx, cy=cy, a=r, b=r, theta=0.0,
                membrane_amp=_ring_amp(rng, config.mother_brightness_boost),
                nucleus_amp=_nucleus_amp(rng, config),
                nucleus_sigma=nuc_sigma,
                arc_start=float(rng.uniform(0.0, 2.0 * math.pi)),
                arc_span=float(rng.uniform(0.8, 1.2) * math.pi),
            )
        )

    frames = []
    for f in range(config.frame_count):
        ch0 = np.zeros((size, size))
        ch1 = np.zeros((size, size))
        for cell in base_cells:
            jitter = replace(
                cell,
                cx=cell.cx + float(rng.normal(0.0, 0.7)),
                cy=cell.cy + float(rng.normal(0.0, 0.7)),
                a=cell.a * float(1.0 + rng.normal(0.0, 0.03)),
                b=cell.b * float(1.0 + rng.normal(0.0, 0.03)),
                theta=cell.theta + float(rng.normal(0.0, 0.05)),
            )
            _draw_cell(ch0, ch1, jitter)
        for cell in mothers_by_frame.get(f, []):
            _draw_cell(ch0, ch1, cell)
        for cell in daughters_by_frame.get(f, []):
            _draw_cell(ch0, ch1, cell)
        if config.noise_sigma > 0:
            ch0 = ch0 + rng.normal(0.0, config.noise_sigma, ch0.shape)
            ch1 = ch1 + rng.normal(0.0, config.noise_sigma, ch1.shape)
        pixels = np.clip(np.stack((ch0, ch1)), 0.0, 1.0)
        frames.append(MultiChannelImage(pixels))

    gt = GroundTruth(
        movie_id=f"synth_{config.seed}",
        frames=[GtFrame(f, gt_contours[f]) for f in range(config.frame_count)],
        events=events,
    )
    gt.validate()
    return frames, gt
