"""Mother/daughter-pair association.

A division event is a two-node model: mother position M in frame t and
daughter-pair position D in frame t+1. Unary potentials are the Hough-map
values at the two positions, the binary potential is a Gaussian over the
mother-daughter distance, and the event score is their learned weighted
sum. With the partition constant shared across candidates, the maximum
score is the maximum a-posteriori pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .forest import ClassLabel, HoughForestModel
from .image import MultiChannelImage
from .voting import Detection, HoughMap, cast_votes, nms, smooth

WEIGHTS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DistanceStats:
    """Mean/spread of mother-to-pair-midpoint distances, in pixels."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not math.isfinite(self.mu) or not math.isfinite(self.sigma):
            raise ValueError("distance stats must be finite")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class CrfWeights:
    w_m: float
    w_d: float
    w_md: float
    bias: float
    stats: DistanceStats

    def __post_init__(self):
        for name in ("w_m", "w_d", "w_md", "bias"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass(frozen=True)
class MitosisCandidate:
    """One (mother, daughter-pair) hypothesis with its score inputs."""

    mother: Detection
    daughter: Detection
    features: tuple[float, float, float]  # (h_m, h_d, p_dist)
    score: float = 0.0


def distance_prob(m, d, stats: DistanceStats) -> float:
    """Peak-normalized Gaussian of the Euclidean mother-daughter distance:
    exp(-(dist - mu)^2 / (2 sigma^2)), in (0, 1], equal to 1 at dist == mu."""
    dist = math.hypot(m[0] - d[0], m[1] - d[1])
    z = (dist - stats.mu) / stats.sigma
    return math.exp(-0.5 * z * z)


def fit_distance_stats(events) -> DistanceStats:
    """Sample mean and n-1 standard deviation of mother-to-midpoint
    distances over ground-truth (mother, daughter-pair) position pairs."""
    distances = [math.hypot(m[0] - d[0], m[1] - d[1]) for m, d in events]
    if len(distances) < 2:
        raise ValueError(f"need at least 2 events to fit distance stats, got {len(distances)}")
    mu = float(np.mean(distances))
    sigma = float(np.std(distances, ddof=1))
    if sigma == 0.0:
        raise ValueError("degenerate distance distribution (zero variance)")
    return DistanceStats(mu=mu, sigma=sigma)


def mitosis_score(h_m: float, h_d: float, p_dist: float, w: CrfWeights) -> float:
    """Weighted sum of the two Hough scores and the distance probability.

    The bias never changes rankings; it only calibrates the logistic
    probability readout sigmoid(score).
    """
    return w.w_m * h_m + w.w_d * h_d + w.w_md * p_dist + w.bias


def enumerate_candidates(
    mothers, daughters, max_radius: float, stats: DistanceStats
) -> list[MitosisCandidate]:
    """Cross product of mother x daughter detections within max_radius,
    each carrying its (h_m, h_d, p_dist) feature triple."""
    out = []
    for m in mothers:
        for d in daughters:
            if math.hypot(m.position[0] - d.position[0], m.position[1] - d.position[1]) > max_radius:
                continue
            features = (m.score, d.score, distance_prob(m.position, d.position, stats))
            out.append(MitosisCandidate(mother=m, daughter=d, features=features))
    return out


def score_candidates(candidates, w: CrfWeights) -> list[MitosisCandidate]:
    return [replace(c, score=mitosis_score(*c.features, w)) for c in candidates]


def _candidate_order(c: MitosisCandidate):
    # descending score; deterministic row-major fallback on ties
    return (
        -c.score,
        c.mother.position[1],
        c.mother.position[0],
        c.daughter.position[1],
        c.daughter.position[0],
    )


def map_inference(candidates, w: CrfWeights) -> MitosisCandidate | None:
    """Exhaustive argmax of mitosis_score over the candidate set."""
    scored = score_candidates(candidates, w)
    if not scored:
        return None
    return min(scored, key=_candidate_order)


def select_events(candidates, w: CrfWeights) -> list[MitosisCandidate]:
    """Ranked greedy selection: repeatedly take the best-scoring candidate
    and drop everything sharing its mother or daughter detection."""
    pool = sorted(score_candidates(candidates, w), key=_candidate_order)
    chosen: list[MitosisCandidate] = []
    used_mothers: set = set()
    used_daughters: set = set()
    for c in pool:
        if c.mother.position in used_mothers or c.daughter.position in used_daughters:
            continue
        chosen.append(c)
        used_mothers.add(c.mother.position)
        used_daughters.add(c.daughter.position)
    return chosen


# ---------------------------------------------------------------------------
# weight learning


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_weights(
    triples,
    stats: DistanceStats,
    *,
    use_mother: bool = True,
    use_daughter: bool = True,
    use_distance: bool = True,
    l2: float = 1e-4,
    max_epochs: int = 2000,
    grad_tol: float = 1e-6,
) -> CrfWeights:
    """Logistic regression over (h_m, h_d, p_dist) feature triples.

    Batch gradient descent from zero weights with a fixed step set from
    the loss's curvature bound, so the regularized mean log-loss never
    increases. The Hough mass features run orders of magnitude larger
    than the distance prior, which would cripple a fixed-step method, so
    columns are standardized internally and the weights mapped back to
    the raw feature scale afterwards. Disabling a feature zeroes its
    column: its weight then has zero data gradient and stays exactly 0,
    which is how the reduced two-component models are trained.
    """
    x = np.array([t[0] for t in triples], dtype=np.float64)
    y = np.array([t[1] for t in triples], dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"triples must carry 3 features, got shape {x.shape}")
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise ValueError("need both positive and negative triples")
    mask = np.array([use_mother, use_daughter, use_distance], dtype=np.float64)
    if not mask.any():
        raise ValueError("at least one feature must stay enabled")
    x = x * mask

    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0  # masked or constant columns pass through
    xs = (x - center) / scale * mask

    n = x.shape[0]
    # curvature bound of the mean logistic loss with an intercept column
    lipschitz = 0.25 * float(((xs * xs).sum(axis=1) + 1.0).max()) + l2
    step = 1.0 / lipschitz
    w = np.zeros(3)
    b = 0.0
    for _ in range(max_epochs):
        p = _sigmoid(xs @ w + b)
        r = p - y
        grad_w = xs.T @ r / n + l2 * w
        grad_b = float(r.mean())
        if math.hypot(float(np.linalg.norm(grad_w)), grad_b) < grad_tol:
            break
        w -= step * grad_w
        b -= step * grad_b
    w_raw = w / scale * mask
    b_raw = float(b - (w * center * mask / scale).sum())
    return CrfWeights(
        w_m=float(w_raw[0]), w_d=float(w_raw[1]), w_md=float(w_raw[2]), bias=b_raw, stats=stats
    )


def logistic_loss(triples, w: CrfWeights, l2: float = 1e-4) -> float:
    """Regularized mean negative log-likelihood under the current weights."""
    x = np.array([t[0] for t in triples], dtype=np.float64)
    y = np.array([t[1] for t in triples], dtype=np.float64)
    z = x @ np.array([w.w_m, w.w_d, w.w_md]) + w.bias
    # stable log(1 + exp(-|z|)) form of -[y log p + (1-y) log(1-p)]
    loss = np.logaddexp(0.0, z) - y * z
    reg = 0.5 * l2 * (w.w_m**2 + w.w_d**2 + w.w_md**2)
    return float(loss.mean() + reg)


# ---------------------------------------------------------------------------
# training-triple construction


def _map_value(hough_map: HoughMap, position) -> float:
    x = int(round(position[0]))
    y = int(round(position[1]))
    if not (0 <= x < hough_map.width and 0 <= y < hough_map.height):
        return 0.0
    return float(hough_map.values[y, x])


def build_training_triples(
    mother_map: HoughMap,
    daughter_map: HoughMap,
    gt_events,
    stats: DistanceStats,
    *,
    nms_radius: int = 10,
    rel_threshold: float = 0.1,
    top_k: int = 5,
    match_radius: float | None = None,
):
    """Labeled triples for one frame pair.

    gt_events: (mother position, daughter-pair midpoint) tuples. Positives
    read the smoothed map values at the annotated positions. Negatives are
    the top_k non-matching enumerated candidates ranked by detector
    confidence (the sum of the two unary map values): the hard negatives
    the detector actually has to beat. Ranking negatives by the distance
    prior as well would skew the mined set toward distance coincidences
    and teach the pairwise term the wrong sign.
    """
    if match_radius is None:
        match_radius = float(nms_radius)
    triples = []
    for m_pos, d_pos in gt_events:
        features = (
            _map_value(mother_map, m_pos),
            _map_value(daughter_map, d_pos),
            distance_prob(m_pos, d_pos, stats),
        )
        triples.append((features, 1))

    mothers = nms(mother_map, nms_radius, rel_threshold * float(mother_map.values.max()))
    daughters = nms(daughter_map, nms_radius, rel_threshold * float(daughter_map.values.max()))
    max_radius = stats.mu + 3.0 * stats.sigma
    candidates = enumerate_candidates(mothers, daughters, max_radius, stats)

    def matches_truth(c: MitosisCandidate) -> bool:
        for m_pos, d_pos in gt_events:
            dm = math.hypot(c.mother.position[0] - m_pos[0], c.mother.position[1] - m_pos[1])
            dd = math.hypot(c.daughter.position[0] - d_pos[0], c.daughter.position[1] - d_pos[1])
            if dm <= match_radius and dd <= match_radius:
                return True
        return False

    negatives = [c for c in candidates if not matches_truth(c)]
    negatives.sort(key=lambda c: (-(c.features[0] + c.features[1]), _candidate_order(c)[1:]))
    for c in negatives[:top_k]:
        triples.append((c.features, 0))
    return triples


# ---------------------------------------------------------------------------
# end-to-end event detection


def detect_mitosis(
    model: HoughForestModel,
    weights: CrfWeights,
    frame_t: MultiChannelImage,
    frame_t1: MultiChannelImage,
    *,
    smooth_sigma: float = 3.0,
    nms_radius: int = 10,
    rel_threshold: float = 0.1,
    max_radius: float | None = None,
) -> list[MitosisCandidate]:
    """Detect division events between two consecutive frames.

    Mother peaks come from frame t, daughter-pair peaks from frame t+1;
    gated pairs are scored and reduced to a ranked non-overlapping event
    list suitable for threshold sweeping.
    """
    mother_map = smooth(cast_votes(model, frame_t)[ClassLabel.MOTHER], smooth_sigma)
    daughter_map = smooth(cast_votes(model, frame_t1)[ClassLabel.DAUGHTER], smooth_sigma)
    mothers = nms(mother_map, nms_radius, rel_threshold * float(mother_map.values.max()))
    daughters = nms(daughter_map, nms_radius, rel_threshold * float(daughter_map.values.max()))
    if max_radius is None:
        max_radius = weights.stats.mu + 3.0 * weights.stats.sigma
    candidates = enumerate_candidates(mothers, daughters, max_radius, weights.stats)
    return select_events(candidates, weights)


# ---------------------------------------------------------------------------
# weights file


def save_weights(w: CrfWeights, path) -> None:
    payload = {
        "formatVersion": WEIGHTS_FORMAT_VERSION,
        "w_m": w.w_m,
        "w_d": w.w_d,
        "w_md": w.w_md,
        "bias": w.bias,
        "mu": w.stats.mu,
        "sigma": w.stats.sigma,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_weights(path) -> CrfWeights:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: weights file must hold a JSON object")
    expected = {"formatVersion", "w_m", "w_d", "w_md", "bias", "mu", "sigma"}
    missing = expected - payload.keys()
    unknown = payload.keys() - expected
    if missing:
        raise ValueError(f"{path}: missing weight fields: {sorted(missing)}")
    if unknown:
        raise ValueError(f"{path}: unknown weight fields: {sorted(unknown)}")
    if payload["formatVersion"] != WEIGHTS_FORMAT_VERSION:
        raise ValueError(
            f"{path}: weights format version {payload['formatVersion']}, "
            f"expected {WEIGHTS_FORMAT_VERSION}"
        )
    stats = DistanceStats(mu=float(payload["mu"]), sigma=float(payload["sigma"]))
    return CrfWeights(
        w_m=float(payload["w_m"]),
        w_d=float(payload["w_d"]),
        w_md=float(payload["w_md"]),
        bias=float(payload["bias"]),
        stats=stats,
    )
