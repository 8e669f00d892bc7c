"""Matching rules, precision-recall analysis and grouped cross-validation.

Cell detections match ground truth by contour containment: per contour
the best-scoring inside detection is the true positive, every other
inside detection is a false positive, stray detections are false
positives and empty contours are false negatives. Division events match
only when the mother position falls inside the linked mother contour and
the pair position inside the linked daughter-pair region.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .forest import ClassLabel

GT_FORMAT_VERSION = 1

PAIR_REGION_RULES = ("hull", "either")


# ---------------------------------------------------------------------------
# ground-truth model


@dataclass(frozen=True)
class GtContour:
    object_id: str
    class_label: ClassLabel
    polygon: np.ndarray  # (N, 2) float64 vertices, (x, y)

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise ValueError(f"polygon needs >= 3 (x, y) vertices, got shape {poly.shape}")
        if not np.isfinite(poly).all():
            raise ValueError("polygon vertices must be finite")
        poly = poly.copy()
        poly.flags.writeable = False
        object.__setattr__(self, "polygon", poly)
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))


@dataclass
class GtFrame:
    frame_id: int
    contours: list[GtContour] = field(default_factory=list)

    def of_class(self, class_label: ClassLabel) -> list[GtContour]:
        return [c for c in self.contours if c.class_label == class_label]


@dataclass(frozen=True)
class GtEvent:
    """Mother contour in frame t linked to a daughter pair in frame t+1.

    The two daughter contours share the pair's object id.
    """

    frame_t: int
    mother_id: str
    daughter_pair_id: str


@dataclass
class GroundTruth:
    movie_id: str
    frames: list[GtFrame]
    events: list[GtEvent] = field(default_factory=list)

    def frame(self, frame_id: int) -> GtFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"no ground-truth frame {frame_id}")

    def validate(self) -> None:
        seen = set()
        for f in self.frames:
            if f.frame_id in seen:
                raise ValueError(f"duplicate ground-truth frame {f.frame_id}")
            seen.add(f.frame_id)
        for e in self.events:
            mothers = [
                c
                for c in self.frame(e.frame_t).contours
                if c.object_id == e.mother_id and c.class_label == ClassLabel.MOTHER
            ]
            if len(mothers) != 1:
                raise ValueError(
                    f"event at frame {e.frame_t}: expected 1 mother contour "
                    f"{e.mother_id!r}, found {len(mothers)}"
                )
            pair = self.daughter_pair_contours(e)
            if len(pair) != 2:
                raise ValueError(
                    f"event at frame {e.frame_t}: daughter pair {e.daughter_pair_id!r} "
                    f"needs exactly 2 contours in frame {e.frame_t + 1}, found {len(pair)}"
                )

    def mother_contour(self, event: GtEvent) -> GtContour:
        for c in self.frame(event.frame_t).contours:
            if c.object_id == event.mother_id and c.class_label == ClassLabel.MOTHER:
                return c
        raise KeyError(f"mother contour {event.mother_id!r} missing in frame {event.frame_t}")

    def daughter_pair_contours(self, event: GtEvent) -> list[GtContour]:
        try:
            frame = self.frame(event.frame_t + 1)
        except KeyError:
            return []
        return [
            c
            for c in frame.contours
            if c.object_id == event.daughter_pair_id and c.class_label == ClassLabel.DAUGHTER
        ]


# ---------------------------------------------------------------------------
# geometry


def point_in_polygon(p, polygon) -> bool:
    """Even-odd ray-crossing test; points on the boundary count as inside."""
    poly = np.asarray(polygon, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
        raise ValueError(f"polygon needs >= 3 (x, y) vertices, got shape {poly.shape}")
    px, py = float(p[0]), float(p[1])
    n = poly.shape[0]
    inside = False
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        # boundary check: p on segment (x0,y0)-(x1,y1)
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if abs(cross) < 1e-9:
            if min(x0, x1) - 1e-9 <= px <= max(x0, x1) + 1e-9 and (
                min(y0, y1) - 1e-9 <= py <= max(y0, y1) + 1e-9
            ):
                return True
        if (y0 > py) != (y1 > py):
            x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < x_at:
                inside = not inside
    return inside


def polygon_centroid(polygon) -> tuple[float, float]:
    """Area centroid by the shoelace formula; vertex mean for degenerate area."""
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    if abs(area) < 1e-12:
        return float(x.mean()), float(y.mean())
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(cx), float(cy)


def polygon_interior_pixels(polygon) -> list[tuple[int, int]]:
    """Integer pixel positions inside (or on) the polygon, row-major order."""
    poly = np.asarray(polygon, dtype=np.float64)
    x0 = int(math.floor(poly[:, 0].min()))
    x1 = int(math.ceil(poly[:, 0].max()))
    y0 = int(math.floor(poly[:, 1].min()))
    y1 = int(math.ceil(poly[:, 1].max()))
    return [
        (x, y)
        for y in range(y0, y1 + 1)
        for x in range(x0, x1 + 1)
        if point_in_polygon((x, y), poly)
    ]


def pair_region_polygons(pair_contours, rule: str = "hull") -> list[np.ndarray]:
    """Polygons a daughter-pair position may fall in.

    "hull": the convex hull of both contours (covers the gap between the
    cells, where the pair midpoint usually sits). "either": the two
    contours themselves.
    """
    if rule not in PAIR_REGION_RULES:
        raise ValueError(f"unknown pair region rule {rule!r} (expected one of {PAIR_REGION_RULES})")
    polys = [np.asarray(c.polygon, dtype=np.float64) for c in pair_contours]
    if rule == "either":
        return polys
    points = np.vstack(polys)
    hull = ConvexHull(points)
    return [points[hull.vertices]]


def point_in_any(p, polygons) -> bool:
    return any(point_in_polygon(p, poly) for poly in polygons)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    # one entry per detection, in processing order: matched object id or None
    assignments: list = field(default_factory=list)


@dataclass(frozen=True)
class MatchTarget:
    """One ground-truth object, possibly spanning several polygons."""

    object_id: str
    polygons: tuple


def targets_for_class(frame: GtFrame, class_label: ClassLabel) -> list[MatchTarget]:
    return [
        MatchTarget(c.object_id, (c.polygon,)) for c in frame.of_class(class_label)
    ]


def daughter_pair_targets(gt: GroundTruth, frame_t: int, rule: str = "hull") -> list[MatchTarget]:
    """One target per division's daughter pair whose daughters live in
    frame_t (i.e. events at frame_t - 1)."""
    targets = []
    for e in gt.events:
        if e.frame_t + 1 != frame_t:
            continue
        pair = gt.daughter_pair_contours(e)
        targets.append(MatchTarget(e.daughter_pair_id, tuple(pair_region_polygons(pair, rule))))
    return targets


def match_detections(detections, targets) -> MatchResult:
    """Greedy containment matching, strongest detection first.

    Each target rewards only its highest-scoring inside detection with a
    TP; every other inside detection and every detection outside all
    targets is an FP; targets nobody hit are FNs.
    """
    order = sorted(
        range(len(detections)),
        key=lambda i: (
            -detections[i].score,
            detections[i].position[1],
            detections[i].position[0],
        ),
    )
    claimed = set()
    tp = fp = 0
    assignments = [None] * len(detections)
    for i in order:
        d = detections[i]
        matched = None
        for t in targets:
            if t.object_id in claimed:
                continue
            if point_in_any(d.position, t.polygons):
                matched = t.object_id
                break
        if matched is None:
            fp += 1
        else:
            claimed.add(matched)
            tp += 1
            assignments[i] = matched
    fn = len(targets) - len(claimed)
    return MatchResult(tp=tp, fp=fp, fn=fn, assignments=assignments)


@dataclass(frozen=True)
class EventRecord:
    """A detected division event as evaluated (and as written to CSV)."""

    frame_t: int
    mother: tuple[float, float]
    daughter: tuple[float, float]
    score: float


def match_mitosis(records, gt: GroundTruth, rule: str = "hull") -> MatchResult:
    """Event-level matching: a record is a TP only when its mother lies in
    the linked mother contour and its pair position in the pair region of
    the same ground-truth event; one TP per event, the rest are FPs."""
    order = sorted(
        range(len(records)),
        key=lambda i: (
            -records[i].score,
            records[i].frame_t,
            records[i].mother[1],
            records[i].mother[0],
        ),
    )
    regions = []
    for e in gt.events:
        mother_poly = gt.mother_contour(e).polygon
        pair_polys = pair_region_polygons(gt.daughter_pair_contours(e), rule)
        regions.append((e, mother_poly, pair_polys))
    claimed = set()
    tp = fp = 0
    assignments = [None] * len(records)
    for i in order:
        r = records[i]
        matched = None
        for k, (e, mother_poly, pair_polys) in enumerate(regions):
            if k in claimed or e.frame_t != r.frame_t:
                continue
            if point_in_polygon(r.mother, mother_poly) and point_in_any(r.daughter, pair_polys):
                matched = k
                break
        if matched is None:
            fp += 1
        else:
            claimed.add(matched)
            tp += 1
            assignments[i] = matched
    fn = len(gt.events) - len(claimed)
    return MatchResult(tp=tp, fp=fp, fn=fn, assignments=assignments)


# ---------------------------------------------------------------------------
# precision-recall


def pr_curve(items, matcher, thresholds=None) -> list[tuple[float, float, float]]:
    """Sweep a score threshold and match what survives.

    items must expose .score; matcher(kept_items) returns a MatchResult
    against fixed ground truth. Default thresholds: +inf (the empty-set
    anchor, precision defined as 1) followed by each distinct score,
    descending. Returns (threshold, recall, precision) rows.
    """
    if thresholds is None:
        scores = sorted({float(i.score) for i in items}, reverse=True)
        thresholds = [math.inf] + scores
    points = []
    gt_count = None
    for thr in thresholds:
        kept = [i for i in items if i.score >= thr]
        result = matcher(kept)
        gt_count = result.tp + result.fn
        if gt_count <= 0:
            raise ValueError("precision-recall needs at least one ground-truth object")
        recall = result.tp / gt_count
        precision = result.tp / (result.tp + result.fp) if result.tp + result.fp else 1.0
        points.append((float(thr), recall, precision))
    return points


def pr_curve_from_counts(thresholds, counter) -> list[tuple[float, float, float]]:
    """PR rows for detectors re-run per threshold (no fixed score list):
    counter(threshold) -> (tp, fp, fn)."""
    points = []
    for thr in thresholds:
        tp, fp, fn = counter(thr)
        if tp + fn <= 0:
            raise ValueError("precision-recall needs at least one ground-truth object")
        recall = tp / (tp + fn)
        precision = tp / (tp + fp) if tp + fp else 1.0
        points.append((float(thr), recall, precision))
    return points


def auc(points) -> float:
    """Trapezoidal area under (recall, precision) points.

    Accepts (recall, precision) pairs or (threshold, recall, precision)
    rows; recall must be non-decreasing. Recall never reached contributes
    zero area.
    """
    if len(points) == 0:
        raise ValueError("cannot integrate an empty curve")
    rp = [(p[-2], p[-1]) for p in points]
    area = 0.0
    for (r0, p0), (r1, p1) in zip(rp, rp[1:]):
        if r1 < r0 - 1e-12:
            raise ValueError("recall must be non-decreasing along the curve")
        area += (r1 - r0) * (p0 + p1) / 2.0
    return float(area)


# ---------------------------------------------------------------------------
# grouped cross-validation


def fold_assignments(movie_ids, folds, seed: int = 0) -> list[tuple[list, list]]:
    """Movie-level folds: shuffle once, deal round-robin, each fold tests
    its own movies and trains on the rest. folds="loo" puts one movie per
    fold."""
    ids = list(movie_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("movie ids must be unique")
    k = len(ids) if folds == "loo" else int(folds)
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if len(ids) < k:
        raise ValueError(f"cannot make {k} folds from {len(ids)} movies")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    test_sets = [order[i::k] for i in range(k)]
    return [
        ([m for m in ids if m not in set(test)], sorted(test, key=order.index))
        for test in test_sets
    ]


def cross_validate(movie_ids, folds, run_fold, seed: int = 0):
    """run_fold(train_ids, test_ids) -> AUC. Returns (per-fold AUCs, mean)."""
    aucs = [float(run_fold(train, test)) for train, test in fold_assignments(movie_ids, folds, seed)]
    return aucs, float(np.mean(aucs))


# ---------------------------------------------------------------------------
# ground-truth JSON


def save_ground_truth(gt: GroundTruth, path) -> None:
    payload = {
        "formatVersion": GT_FORMAT_VERSION,
        "movieId": gt.movie_id,
        "frames": [
            {
                "frameId": f.frame_id,
                "contours": [
                    {
                        "objectId": c.object_id,
                        "class": c.class_label.name,
                        "polygon": [[float(x), float(y)] for x, y in c.polygon],
                    }
                    for c in f.contours
                ],
            }
            for f in gt.frames
        ],
        "events": [
            {"frameT": e.frame_t, "motherId": e.mother_id, "daughterPairId": e.daughter_pair_id}
            for e in gt.events
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict) or payload.get("formatVersion") != GT_FORMAT_VERSION:
        raise ValueError(f"{path}: not a version-{GT_FORMAT_VERSION} ground-truth file")
    try:
        frames = [
            GtFrame(
                frame_id=int(f["frameId"]),
                contours=[
                    GtContour(
                        object_id=str(c["objectId"]),
                        class_label=ClassLabel[c["class"]],
                        polygon=np.asarray(c["polygon"], dtype=np.float64),
                    )
                    for c in f["contours"]
                ],
            )
            for f in payload["frames"]
        ]
        events = [
            GtEvent(
                frame_t=int(e["frameT"]),
                mother_id=str(e["motherId"]),
                daughter_pair_id=str(e["daughterPairId"]),
            )
            for e in payload["events"]
        ]
        gt = GroundTruth(movie_id=str(payload["movieId"]), frames=frames, events=events)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed ground-truth file: {exc}") from exc
    gt.validate()
    return gt
