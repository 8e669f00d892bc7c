"""Multiclass Hough forest: training, prediction and model files.

Trees split either to purify class posteriors (entropy over
inverse-prior-weighted class frequencies) or to tighten the spread of
the displacement votes stored in their leaves; background samples carry
no votes. Leaves keep both the weighted posterior and the per-class
vote lists, which `voting.cast_votes` later splats into Hough maps.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from . import _kernels
from .features import (
    FeatureMode,
    HaarFeature,
    PatchSpec,
    evaluate_feature,
    pack_features,
    sample_feature,
)
from .image import IntegralImage, MultiChannelImage, build_integral

MODEL_MAGIC = b"HMDFORST"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Corrupt or truncated model file."""


class ModelVersionError(ModelFormatError):
    """Model file written by an incompatible format version."""


class ClassLabel(IntEnum):
    BACKGROUND = 0
    MOTHER = 1
    DAUGHTER = 2


FOREGROUND_CLASSES = (ClassLabel.MOTHER, ClassLabel.DAUGHTER)

# split objectives
CLASSIFICATION = _kernels.CLASSIFICATION
UNIFORMITY = _kernels.UNIFORMITY


@dataclass(frozen=True)
class TrainingSample:
    """One pixel drawn for training.

    Foreground samples carry the displacement from their position to the
    voting target (mother centroid, or daughter-pair midpoint); background
    samples carry none.
    """

    image_id: object
    position: tuple[int, int]
    label: ClassLabel
    displacement: tuple[float, float] | None = None

    def __post_init__(self):
        if self.label == ClassLabel.BACKGROUND:
            if self.displacement is not None:
                raise ValueError("background samples must not carry a displacement")
        elif self.displacement is None:
            raise ValueError(f"{self.label.name} sample needs a displacement")


@dataclass(frozen=True)
class ClassPriors:
    """Class frequencies of the training pool; strictly positive, sum 1.

    Forest training always uses the 3 ClassLabel entries, but the type
    accepts any class count so the posterior math stays reusable.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise ValueError(f"need at least 2 class priors, got shape {p.shape}")
        if np.any(p <= 0.0):
            raise ValueError("class priors must be strictly positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class priors must sum to 1, got {p.sum()!r}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)


@dataclass(eq=False)
class Leaf:
    posteriors: np.ndarray  # (3,) weighted, sums to 1
    raw_counts: np.ndarray  # (3,) int64 samples that reached the leaf
    votes: dict[ClassLabel, np.ndarray]  # foreground class -> (k, 2) displacements


@dataclass(eq=False)
class SplitNode:
    feature: HaarFeature
    threshold: float
    left: "SplitNode | Leaf"
    right: "SplitNode | Leaf"


@dataclass(frozen=True)
class TrainParams:
    """Forest hyperparameters; the defaults are the reference settings."""

    tree_count: int = 8
    max_depth: int = 19
    features_per_split: int = 500
    thresholds_per_feature: int = 50
    min_leaf_samples: int = 10
    uniformity_prob: float = 0.5
    store_votes: bool = True
    bg_ratio: float = 20.0
    patch_radius: int = 12
    max_displacement: float = 64.0
    seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        if self.thresholds_per_feature < 2:
            raise ValueError("thresholds_per_feature must be >= 2")
        if self.min_leaf_samples < 1:
            raise ValueError("min_leaf_samples must be >= 1")
        if not 0.0 <= self.uniformity_prob <= 1.0:
            raise ValueError("uniformity_prob must be in [0, 1]")
        if self.bg_ratio < 0.0:
            raise ValueError("bg_ratio must be >= 0")
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.max_displacement <= 0.0:
            raise ValueError("max_displacement must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


MODES = ("hf", "cf-hv", "cf")


def params_for_mode(params: TrainParams, mode: str) -> TrainParams:
    """Hough forest (hf), classification splits + Hough voting (cf-hv),
    or plain classification forest without votes (cf)."""
    if mode == "hf":
        return params
    if mode == "cf-hv":
        return replace(params, uniformity_prob=0.0)
    if mode == "cf":
        return replace(params, uniformity_prob=0.0, store_votes=False)
    raise ValueError(f"unknown forest mode {mode!r} (expected one of {MODES})")


@dataclass
class TrainingSet:
    """Images plus the pixel samples drawn from them."""

    images: dict  # image id -> MultiChannelImage
    samples: list[TrainingSample]

    def validate(self, params: TrainParams) -> None:
        for s in self.samples:
            if s.image_id not in self.images:
                raise ValueError(f"sample references unknown image {s.image_id!r}")
            if s.displacement is not None:
                mag = math.hypot(*s.displacement)
                if mag > params.max_displacement:
                    raise ValueError(
                        f"displacement magnitude {mag:.1f} exceeds bound {params.max_displacement}"
                    )


@dataclass(eq=False)
class HoughForestModel:
    trees: list  # SplitNode | Leaf roots
    priors: ClassPriors
    patch_spec: PatchSpec
    params: TrainParams
    _packed: "_PackedForest | None" = field(default=None, repr=False)

    @property
    def tree_count(self) -> int:
        return len(self.trees)

    def packed(self) -> "_PackedForest":
        if self._packed is None:
            self._packed = _pack_forest(self)
        return self._packed


# ---------------------------------------------------------------------------
# leaf statistics


def weighted_posterior(counts, priors: ClassPriors) -> np.ndarray:
    """Class posterior from leaf counts, reweighted by inverse priors:
    p_c = (n_c / prior_c) / sum_i (n_i / prior_i)."""
    n = np.asarray(counts, dtype=np.float64)
    if n.shape != priors.probs.shape:
        raise ValueError(f"counts shape {n.shape} does not match priors {priors.probs.shape}")
    if np.any(n < 0):
        raise ValueError("counts must be non-negative")
    if not np.any(n > 0):
        raise ValueError("cannot form a posterior from all-zero counts")
    weighted = n / priors.probs
    return weighted / weighted.sum()


def entropy(posteriors) -> float:
    """Shannon entropy -sum p ln p, with 0 ln 0 = 0."""
    p = np.asarray(posteriors, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def vote_scatter(votes) -> float:
    """Sum of Euclidean distances of the votes from their mean.

    Empty input scatters 0 by convention.
    """
    v = np.asarray(votes, dtype=np.float64).reshape(-1, 2)
    if v.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(v - v.mean(axis=0), axis=1).sum())


def estimate_priors(samples) -> ClassPriors:
    counts = np.zeros(3, dtype=np.int64)
    for s in samples:
        counts[s.label] += 1
    if np.any(counts == 0):
        missing = [ClassLabel(i).name for i in range(3) if counts[i] == 0]
        raise ValueError(f"training set lacks samples for: {', '.join(missing)}")
    return ClassPriors(counts / counts.sum())


# ---------------------------------------------------------------------------
# packed training data


@dataclass(eq=False)
class _PackedTraining:
    ii_stack: np.ndarray  # (n_images, channels, maxH+1, maxW+1)
    img_w: np.ndarray
    img_h: np.ndarray
    simg: np.ndarray
    spx: np.ndarray
    spy: np.ndarray
    slab: np.ndarray
    svx: np.ndarray
    svy: np.ndarray
    patch_spec: PatchSpec

    @property
    def sample_count(self) -> int:
        return self.simg.size


def _pack_training(training: TrainingSet, patch_spec: PatchSpec) -> _PackedTraining:
    image_ids = list(training.images.keys())
    index_of = {img_id: i for i, img_id in enumerate(image_ids)}
    channels = patch_spec.channel_count
    heights = [training.images[i].height for i in image_ids]
    widths = [training.images[i].width for i in image_ids]
    stack = np.zeros((len(image_ids), channels, max(heights) + 1, max(widths) + 1))
    for i, img_id in enumerate(image_ids):
        img = training.images[img_id]
        if img.channels != channels:
            raise ValueError(
                f"image {img_id!r} has {img.channels} channels, patch spec says {channels}"
            )
        for c in range(channels):
            t = build_integral(img, c).table
            stack[i, c, : t.shape[0], : t.shape[1]] = t

    n = len(training.samples)
    simg = np.empty(n, dtype=np.int32)
    spx = np.empty(n, dtype=np.int32)
    spy = np.empty(n, dtype=np.int32)
    slab = np.empty(n, dtype=np.int8)
    svx = np.zeros(n, dtype=np.float64)
    svy = np.zeros(n, dtype=np.float64)
    for i, s in enumerate(training.samples):
        simg[i] = index_of[s.image_id]
        spx[i], spy[i] = s.position
        slab[i] = int(s.label)
        if s.displacement is not None:
            svx[i], svy[i] = s.displacement
    return _PackedTraining(
        ii_stack=stack,
        img_w=np.asarray(widths, dtype=np.int32),
        img_h=np.asarray(heights, dtype=np.int32),
        simg=simg,
        spx=spx,
        spy=spy,
        slab=slab,
        svx=svx,
        svy=svy,
        patch_spec=patch_spec,
    )


# ---------------------------------------------------------------------------
# split search and tree growth


def _search_split(packed, idx, priors, params, rng, objective):
    if priors.probs.shape != (3,):
        raise ValueError("split search needs priors for the 3 detection classes")
    feats = [sample_feature(rng, packed.patch_spec) for _ in range(params.features_per_split)]
    flat = pack_features(feats)
    out_obj = np.empty(len(feats), dtype=np.float64)
    out_thr = np.empty(len(feats), dtype=np.float64)
    _kernels.scan_split_candidates(
        packed.ii_stack,
        packed.img_w,
        packed.img_h,
        packed.simg,
        packed.spx,
        packed.spy,
        packed.slab,
        packed.svx,
        packed.svy,
        idx,
        flat,
        params.thresholds_per_feature,
        params.min_leaf_samples,
        objective,
        1.0 / priors.probs,
        out_obj,
        out_thr,
    )
    best = int(np.argmin(out_obj))  # first feature wins ties
    if not np.isfinite(out_obj[best]):
        return None
    return feats[best], float(out_thr[best])


def best_split(
    training: TrainingSet,
    priors: ClassPriors,
    params: TrainParams,
    rng: np.random.Generator,
    objective: int,
    indices=None,
) -> tuple[HaarFeature, float] | None:
    """Search `features_per_split` random features x `thresholds_per_feature`
    evenly spaced thresholds for the candidate minimizing the objective.

    objective CLASSIFICATION: count-weighted sum of child entropies of the
    inverse-prior-weighted posteriors. objective UNIFORMITY: summed child
    vote scatter over the foreground votes. Returns None when no candidate
    leaves both children with at least `min_leaf_samples` samples.
    """
    packed = _pack_training(training, PatchSpec(params.patch_radius, _channel_count(training)))
    if indices is None:
        indices = np.arange(packed.sample_count, dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
    return _search_split(packed, indices, priors, params, rng, objective)


def _channel_count(training: TrainingSet) -> int:
    if not training.images:
        raise ValueError("training set has no images")
    return next(iter(training.images.values())).channels


def _make_leaf(packed, idx, priors, params):
    labels = packed.slab[idx]
    counts = np.bincount(labels, minlength=3).astype(np.int64)
    votes = {}
    for cls in FOREGROUND_CLASSES:
        if params.store_votes:
            mask = labels == int(cls)
            votes[cls] = np.column_stack((packed.svx[idx[mask]], packed.svy[idx[mask]]))
        else:
            votes[cls] = np.zeros((0, 2), dtype=np.float64)
    return Leaf(posteriors=weighted_posterior(counts, priors), raw_counts=counts, votes=votes)


def _grow(packed, idx, priors, params, rng, depth):
    n = idx.size
    if depth >= params.max_depth or n < 2 * params.min_leaf_samples:
        return _make_leaf(packed, idx, priors, params)

    objective = CLASSIFICATION
    if params.store_votes and params.uniformity_prob > 0.0:
        fg = int(np.count_nonzero(packed.slab[idx]))
        if fg >= 2 * params.min_leaf_samples and rng.random() < params.uniformity_prob:
            objective = UNIFORMITY

    found = _search_split(packed, idx, priors, params, rng, objective)
    if found is None:
        return _make_leaf(packed, idx, priors, params)
    feature, threshold = found
    resp = _kernels.feature_responses(
        packed.ii_stack,
        packed.img_w,
        packed.img_h,
        packed.simg,
        packed.spx,
        packed.spy,
        idx,
        pack_features([feature])[0],
    )
    left_mask = resp < threshold
    left = _grow(packed, idx[left_mask], priors, params, rng, depth + 1)
    right = _grow(packed, idx[~left_mask], priors, params, rng, depth + 1)
    return SplitNode(feature=feature, threshold=threshold, left=left, right=right)


def train_tree(
    training: TrainingSet,
    params: TrainParams,
    rng: np.random.Generator,
    priors: ClassPriors | None = None,
    indices=None,
):
    """Grow a single tree over the given samples (no bootstrap)."""
    if not any(s.label != ClassLabel.BACKGROUND for s in training.samples):
        raise ValueError("cannot train a tree without foreground samples")
    training.validate(params)
    if priors is None:
        priors = estimate_priors(training.samples)
    packed = _pack_training(training, PatchSpec(params.patch_radius, _channel_count(training)))
    if indices is None:
        indices = np.arange(packed.sample_count, dtype=np.int64)
    else:
        indices = np.asarray(indices, dtype=np.int64)
    return _grow(packed, indices, priors, params, rng, depth=0)


def train_forest(training: TrainingSet, params: TrainParams) -> HoughForestModel:
    """Train `tree_count` trees on bootstrap resamples of the pool.

    Priors come from the full pool once; every tree gets its own seeded
    generator, so the result is reproducible regardless of scheduling.
    """
    training.validate(params)
    priors = estimate_priors(training.samples)
    patch_spec = PatchSpec(params.patch_radius, _channel_count(training))
    packed = _pack_training(training, patch_spec)
    n = packed.sample_count
    seeds = np.random.SeedSequence(params.seed).spawn(params.tree_count)
    trees = []
    for tree_seed in seeds:
        rng = np.random.default_rng(tree_seed)
        boot = rng.integers(0, n, size=n).astype(np.int64)
        trees.append(_grow(packed, boot, priors, params, rng, depth=0))
    return HoughForestModel(trees=trees, priors=priors, patch_spec=patch_spec, params=params)


def predict_leaf(
    model: HoughForestModel,
    tree_index: int,
    integrals,
    position: tuple[int, int],
) -> Leaf:
    """Root-to-leaf descent of one tree at a pixel position."""
    node = model.trees[tree_index]
    while isinstance(node, SplitNode):
        value = evaluate_feature(node.feature, integrals, position)
        node = node.left if value < node.threshold else node.right
    return node


# ---------------------------------------------------------------------------
# packed forest for dense application


@dataclass(eq=False)
class _PackedForest:
    node_feat: np.ndarray
    node_thr: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_post: np.ndarray
    vote_start: np.ndarray
    vote_end: np.ndarray
    votes_mother: np.ndarray
    votes_daughter: np.ndarray
    roots: np.ndarray


def _count_nodes(node) -> int:
    if isinstance(node, SplitNode):
        return 1 + _count_nodes(node.left) + _count_nodes(node.right)
    return 1


def _pack_forest(model: HoughForestModel) -> _PackedForest:
    count = sum(_count_nodes(t) for t in model.trees)
    node_feat = np.zeros((count, 10), dtype=np.int32)
    node_thr = np.zeros(count, dtype=np.float64)
    node_left = np.full(count, -1, dtype=np.int32)
    node_right = np.full(count, -1, dtype=np.int32)
    node_post = np.zeros((count, 3), dtype=np.float64)
    vote_start = np.zeros((count, 2), dtype=np.int64)
    vote_end = np.zeros((count, 2), dtype=np.int64)
    votes = {cls: [] for cls in FOREGROUND_CLASSES}
    offsets = {cls: 0 for cls in FOREGROUND_CLASSES}
    cursor = 0

    def fill_walk(node):
        nonlocal cursor
        i = cursor
        cursor += 1
        if isinstance(node, SplitNode):
            node_feat[i] = pack_features([node.feature])[0]
            node_thr[i] = node.threshold
            node_left[i] = cursor
            fill_walk(node.left)
            node_right[i] = cursor
            fill_walk(node.right)
        else:
            node_post[i] = node.posteriors
            for ci, cls in enumerate(FOREGROUND_CLASSES):
                v = np.asarray(node.votes.get(cls, np.zeros((0, 2))), dtype=np.float64).reshape(-1, 2)
                vote_start[i, ci] = offsets[cls]
                offsets[cls] += v.shape[0]
                vote_end[i, ci] = offsets[cls]
                votes[cls].append(v)

    roots = []
    for root in model.trees:
        roots.append(cursor)
        fill_walk(root)

    def concat(cls):
        chunks = votes[cls]
        if not chunks:
            return np.zeros((0, 2), dtype=np.float64)
        return np.ascontiguousarray(np.concatenate(chunks, axis=0))

    return _PackedForest(
        node_feat=node_feat,
        node_thr=node_thr,
        node_left=node_left,
        node_right=node_right,
        node_post=node_post,
        vote_start=vote_start,
        vote_end=vote_end,
        votes_mother=concat(ClassLabel.MOTHER),
        votes_daughter=concat(ClassLabel.DAUGHTER),
        roots=np.asarray(roots, dtype=np.int64),
    )


def apply_forest(model: HoughForestModel, image: MultiChannelImage):
    """Dense application on one image.

    Returns (vote_maps, posterior_maps) as float64 arrays of shapes
    (2, H, W) and (3, H, W); vote map index 0 is MOTHER, 1 is DAUGHTER.
    """
    if image.channels != model.patch_spec.channel_count:
        raise ValueError(
            f"image has {image.channels} channels, model expects {model.patch_spec.channel_count}"
        )
    ii3 = np.stack([build_integral(image, c).table for c in range(image.channels)])
    p = model.packed()
    return _kernels.apply_forest(
        ii3,
        image.width,
        image.height,
        p.node_feat,
        p.node_thr,
        p.node_left,
        p.node_right,
        p.node_post,
        p.vote_start,
        p.vote_end,
        p.votes_mother,
        p.votes_daughter,
        p.roots,
    )


def image_integrals(image: MultiChannelImage) -> tuple[IntegralImage, ...]:
    """Per-channel integral images, in channel order."""
    return tuple(build_integral(image, c) for c in range(image.channels))


# ---------------------------------------------------------------------------
# model file format (little-endian binary, versioned)


def _write_node(out, node):
    if isinstance(node, SplitNode):
        f = node.feature
        bx0, by0, bx1, by1 = f.rect_b if f.rect_b is not None else (0, 0, 0, 0)
        out.append(
            struct.pack(
                "<BBB8hd",
                1,
                f.channel,
                int(f.mode),
                *f.rect_a,
                bx0,
                by0,
                bx1,
                by1,
                node.threshold,
            )
        )
        _write_node(out, node.left)
        _write_node(out, node.right)
    else:
        out.append(struct.pack("<B3d3q", 0, *node.posteriors, *node.raw_counts))
        for cls in FOREGROUND_CLASSES:
            v = np.asarray(node.votes.get(cls, np.zeros((0, 2))), dtype="<f8").reshape(-1, 2)
            out.append(struct.pack("<I", v.shape[0]))
            out.append(v.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFormatError("model file truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise ModelFormatError("model file truncated")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk


def _read_node(r: _Reader):
    (tag,) = r.take("<B")
    if tag == 1:
        channel, mode, ax0, ay0, ax1, ay1, bx0, by0, bx1, by1, threshold = r.take("<BB8hd")
        mode = FeatureMode(mode)
        rect_b = (bx0, by0, bx1, by1) if mode == FeatureMode.TWO_RECT_MEAN_DIFF else None
        feature = HaarFeature(channel=channel, mode=mode, rect_a=(ax0, ay0, ax1, ay1), rect_b=rect_b)
        left = _read_node(r)
        right = _read_node(r)
        return SplitNode(feature=feature, threshold=threshold, left=left, right=right)
    if tag == 0:
        values = r.take("<3d3q")
        posteriors = np.asarray(values[:3], dtype=np.float64)
        raw_counts = np.asarray(values[3:], dtype=np.int64)
        votes = {}
        for cls in FOREGROUND_CLASSES:
            (k,) = r.take("<I")
            raw = r.take_bytes(16 * k)
            votes[cls] = np.frombuffer(raw, dtype="<f8").reshape(k, 2).copy()
        return Leaf(posteriors=posteriors, raw_counts=raw_counts, votes=votes)
    raise ModelFormatError(f"unknown node tag {tag}")


def save_model(model: HoughForestModel, path) -> None:
    p = model.params
    out = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack(
            "<IIIIIIIQdBdd",
            len(model.trees),
            model.patch_spec.patch_radius,
            model.patch_spec.channel_count,
            p.max_depth,
            p.features_per_split,
            p.thresholds_per_feature,
            p.min_leaf_samples,
            p.seed,
            p.uniformity_prob,
            1 if p.store_votes else 0,
            p.bg_ratio,
            p.max_displacement,
        ),
        struct.pack("<3d", *model.priors.probs),
    ]
    for tree in model.trees:
        _write_node(out, tree)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_model(path) -> HoughForestModel:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take_bytes(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a forest model file")
    (version,) = r.take("<I")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, expected {MODEL_VERSION}")
    (
        tree_count,
        patch_radius,
        channel_count,
        max_depth,
        features_per_split,
        thresholds_per_feature,
        min_leaf_samples,
        seed,
        uniformity_prob,
        store_votes,
        bg_ratio,
        max_displacement,
    ) = r.take("<IIIIIIIQdBdd")
    priors = ClassPriors(np.asarray(r.take("<3d"), dtype=np.float64))
    params = TrainParams(
        tree_count=tree_count,
        max_depth=max_depth,
        features_per_split=features_per_split,
        thresholds_per_feature=thresholds_per_feature,
        min_leaf_samples=min_leaf_samples,
        uniformity_prob=uniformity_prob,
        store_votes=bool(store_votes),
        bg_ratio=bg_ratio,
        patch_radius=patch_radius,
        max_displacement=max_displacement,
        seed=seed,
    )
    trees = [_read_node(r) for _ in range(tree_count)]
    if r.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return HoughForestModel(
        trees=trees,
        priors=priors,
        patch_spec=PatchSpec(patch_radius, channel_count),
        params=params,
    )
