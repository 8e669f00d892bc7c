"""Batch orchestration over movie sets.

Everything here glues the per-frame pieces together: train a forest on
annotated movies, turn score maps into per-frame detections, pool those
across movies into precision-recall curves, and learn the event weights.
Pooled matching reproduces the per-frame matching rules exactly; it only
precomputes the point-in-polygon tests so the threshold sweep stays
cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crf import (
    CrfWeights,
    build_training_triples,
    enumerate_candidates,
    fit_distance_stats,
    fit_weights,
    select_events,
)
from .dataset import Movie, collect_training_samples
from .evaluation import (
    PAIR_REGION_RULES,
    EventRecord,
    MatchResult,
    auc,
    daughter_pair_targets,
    pair_region_polygons,
    point_in_any,
    point_in_polygon,
    polygon_centroid,
    pr_curve,
    targets_for_class,
)
from .forest import (
    FOREGROUND_CLASSES,
    ClassLabel,
    HoughForestModel,
    TrainParams,
    train_forest,
)
from .voting import HoughMap, cast_votes, nms, posterior_maps, smooth


@dataclass(frozen=True)
class DetectionSettings:
    smooth_sigma: float = 2.0
    nms_radius: int = 8
    rel_threshold: float = 0.1
    pair_rule: str = "hull"
    top_k: int = 5  # hard negatives kept per frame pair when fitting weights

    def __post_init__(self):
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be >= 0")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")
        if not 0 < self.rel_threshold <= 1:
            raise ValueError("rel_threshold must lie in (0, 1]")
        if self.pair_rule not in PAIR_REGION_RULES:
            raise ValueError(
                f"pair_rule must be one of {PAIR_REGION_RULES}, got {self.pair_rule!r}"
            )
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def train_detector(movies, params: TrainParams, sample_seed: int = 0) -> HoughForestModel:
    return train_forest(collect_training_samples(movies, params, seed=sample_seed), params)


def frame_score_maps(model, image, settings: DetectionSettings) -> dict:
    """Smoothed per-class score maps for one frame.

    Models that store votes score by accumulated Hough mass; vote-free
    models fall back to the per-pixel class posteriors, which is what
    plain classification-forest detection has to work with.
    """
    if model.params.store_votes:
        raw = cast_votes(model, image)
    else:
        post = posterior_maps(model, image)
        raw = {cls: HoughMap(cls, post[int(cls)]) for cls in FOREGROUND_CLASSES}
    return {cls: smooth(m, settings.smooth_sigma) for cls, m in raw.items()}


def peak_detections(score_maps: dict, settings: DetectionSettings) -> dict:
    out = {}
    for cls, score_map in score_maps.items():
        peak = float(score_map.values.max())
        if peak <= 0.0:
            out[cls] = []
        else:
            out[cls] = nms(score_map, settings.nms_radius, settings.rel_threshold * peak)
    return out


def movie_score_maps(model, movie: Movie, settings: DetectionSettings) -> list[dict]:
    return [frame_score_maps(model, image, settings) for image in movie.frames]


def movie_detections(model, movie: Movie, settings: DetectionSettings) -> list[dict]:
    return [peak_detections(m, settings) for m in movie_score_maps(model, movie, settings)]


def event_records(
    frame_dets: list[dict],
    weights: CrfWeights,
    max_radius: float | None = None,
) -> list[EventRecord]:
    """Ranked division events for one movie from its per-frame detections."""
    if max_radius is None:
        max_radius = weights.stats.mu + 3.0 * weights.stats.sigma
    records = []
    for t in range(len(frame_dets) - 1):
        mothers = frame_dets[t].get(ClassLabel.MOTHER, [])
        daughters = frame_dets[t + 1].get(ClassLabel.DAUGHTER, [])
        candidates = enumerate_candidates(mothers, daughters, max_radius, weights.stats)
        for c in select_events(candidates, weights):
            records.append(
                EventRecord(
                    frame_t=t,
                    mother=(float(c.mother.position[0]), float(c.mother.position[1])),
                    daughter=(float(c.daughter.position[0]), float(c.daughter.position[1])),
                    score=float(c.score),
                )
            )
    return records


# ---------------------------------------------------------------------------
# pooled precision-recall
#
# The matchers below reproduce match_detections / match_mitosis greedily
# over many (movie, frame) groups at once. Claims are precomputed: each
# item carries the target tokens that would accept it, in the order the
# per-frame matcher would try them.


@dataclass(frozen=True)
class _SweepItem:
    score: float
    order: tuple
    claims: tuple


def _sweep_pr(items, target_count: int):
    ordered = sorted(items, key=lambda it: it.order)

    def matcher(kept):
        claimed = set()
        tp = fp = 0
        for it in kept:
            token = next((c for c in it.claims if c not in claimed), None)
            if token is None:
                fp += 1
            else:
                claimed.add(token)
                tp += 1
        return MatchResult(tp=tp, fp=fp, fn=target_count - tp)

    return pr_curve(ordered, matcher)


def _detection_items(dets_by_movie: dict, targets_by_key: dict):
    items = []
    for movie_id, per_frame in dets_by_movie.items():
        for f, dets in enumerate(per_frame):
            targets = targets_by_key.get((movie_id, f), [])
            for d in dets:
                claims = tuple(
                    (movie_id, f, t.object_id)
                    for t in targets
                    if point_in_any(d.position, t.polygons)
                )
                items.append(
                    _SweepItem(
                        score=float(d.score),
                        order=(-d.score, movie_id, f, d.position[1], d.position[0]),
                        claims=claims,
                    )
                )
    return items


def pooled_cell_pr(dets_by_movie: dict, movies: list[Movie], class_label: ClassLabel):
    """PR rows for one cell class pooled over every frame of `movies`.

    dets_by_movie: movie_id -> per-frame list of detections of that class.
    """
    targets_by_key = {}
    total = 0
    for movie in movies:
        for f in range(len(movie.frames)):
            targets = targets_for_class(movie.gt.frame(f), class_label)
            targets_by_key[(movie.movie_id, f)] = targets
            total += len(targets)
    return _sweep_pr(_detection_items(dets_by_movie, targets_by_key), total)


def pooled_pair_pr(dets_by_movie: dict, movies: list[Movie], rule: str = "hull"):
    """PR rows for daughter-pair detection: daughter-map peaks count when
    they land in the pair region of some event's daughters."""
    targets_by_key = {}
    total = 0
    for movie in movies:
        for f in range(len(movie.frames)):
            targets = daughter_pair_targets(movie.gt, f, rule)
            targets_by_key[(movie.movie_id, f)] = targets
            total += len(targets)
    return _sweep_pr(_detection_items(dets_by_movie, targets_by_key), total)


def pooled_mitosis_pr(records_by_movie: dict, movies: list[Movie], rule: str = "hull"):
    """PR rows for ranked events pooled over movies, matching each record
    against its movie's ground-truth events."""
    regions = {}
    total = 0
    for movie in movies:
        gt = movie.gt
        per_event = []
        for e in gt.events:
            mother_poly = gt.mother_contour(e).polygon
            pair_polys = pair_region_polygons(gt.daughter_pair_contours(e), rule)
            per_event.append((e.frame_t, mother_poly, pair_polys))
        regions[movie.movie_id] = per_event
        total += len(per_event)

    items = []
    for movie_id, records in records_by_movie.items():
        for r in records:
            claims = tuple(
                (movie_id, k)
                for k, (frame_t, mother_poly, pair_polys) in enumerate(regions[movie_id])
                if frame_t == r.frame_t
                and point_in_polygon(r.mother, mother_poly)
                and point_in_any(r.daughter, pair_polys)
            )
            items.append(
                _SweepItem(
                    score=float(r.score),
                    order=(-r.score, movie_id, r.frame_t, r.mother[1], r.mother[0]),
                    claims=claims,
                )
            )
    return _sweep_pr(items, total)


# ---------------------------------------------------------------------------
# end-to-end conveniences


@dataclass
class CellEvaluation:
    mother_curve: list
    mother_auc: float
    pair_curve: list
    pair_auc: float


def evaluate_cell_detection(model, movies: list[Movie], settings: DetectionSettings) -> CellEvaluation:
    mother_dets = {}
    daughter_dets = {}
    for movie in movies:
        per_frame = movie_detections(model, movie, settings)
        mother_dets[movie.movie_id] = [d.get(ClassLabel.MOTHER, []) for d in per_frame]
        daughter_dets[movie.movie_id] = [d.get(ClassLabel.DAUGHTER, []) for d in per_frame]
    mother_curve = pooled_cell_pr(mother_dets, movies, ClassLabel.MOTHER)
    pair_curve = pooled_pair_pr(daughter_dets, movies, settings.pair_rule)
    return CellEvaluation(
        mother_curve=mother_curve,
        mother_auc=auc(mother_curve),
        pair_curve=pair_curve,
        pair_auc=auc(pair_curve),
    )


def gt_event_positions(gt) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """(mother centroid, daughter-pair midpoint) per ground-truth event."""
    out = []
    for e in gt.events:
        mx, my = polygon_centroid(gt.mother_contour(e).polygon)
        centers = [polygon_centroid(c.polygon) for c in gt.daughter_pair_contours(e)]
        mid = (
            sum(c[0] for c in centers) / len(centers),
            sum(c[1] for c in centers) / len(centers),
        )
        out.append(((mx, my), mid))
    return out


def crf_training_data(model, movies: list[Movie], settings: DetectionSettings):
    """Distance statistics plus labeled feature triples from every
    consecutive frame pair of the training movies."""
    all_events = []
    for movie in movies:
        all_events.extend(gt_event_positions(movie.gt))
    stats = fit_distance_stats(all_events)

    triples = []
    for movie in movies:
        maps = movie_score_maps(model, movie, settings)
        positions = gt_event_positions(movie.gt)
        by_frame = {}
        for e, pos in zip(movie.gt.events, positions):
            by_frame.setdefault(e.frame_t, []).append(pos)
        for t in range(len(movie.frames) - 1):
            triples.extend(
                build_training_triples(
                    maps[t][ClassLabel.MOTHER],
                    maps[t + 1][ClassLabel.DAUGHTER],
                    by_frame.get(t, []),
                    stats,
                    nms_radius=settings.nms_radius,
                    rel_threshold=settings.rel_threshold,
                    top_k=settings.top_k,
                )
            )
    return stats, triples


def train_event_weights(
    model,
    movies: list[Movie],
    settings: DetectionSettings,
    *,
    use_mother: bool = True,
    use_daughter: bool = True,
    use_distance: bool = True,
    l2: float = 1e-4,
) -> CrfWeights:
    stats, triples = crf_training_data(model, movies, settings)
    return fit_weights(
        triples,
        stats,
        use_mother=use_mother,
        use_daughter=use_daughter,
        use_distance=use_distance,
        l2=l2,
    )


def evaluate_mitosis(model, weights: CrfWeights, movies: list[Movie], settings: DetectionSettings):
    """(PR rows, AUC) for event detection over held-out movies."""
    records = {}
    for movie in movies:
        dets = movie_detections(model, movie, settings)
        records[movie.movie_id] = event_records(dets, weights)
    curve = pooled_mitosis_pr(records, movies, settings.pair_rule)
    return curve, auc(curve)
