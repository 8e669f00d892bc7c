"""Run configuration: one flat JSON file covering every pipeline stage.

Keys are camelCase to stay diff-friendly next to the other JSON
artifacts. parse_config applies defaults for absent keys, rejects
unknown ones by name, and validates everything by building the stage
configs it feeds (forest params, detection settings, generator config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

from .crf import DistanceStats
from .forest import TrainParams, params_for_mode
from .pipeline import DetectionSettings
from .synth import SynthConfig


@dataclass(frozen=True)
class PipelineConfig:
    # forest
    tree_count: int = 8
    max_depth: int = 19
    features_per_split: int = 500
    thresholds_per_feature: int = 50
    min_leaf_samples: int = 10
    uniformity_prob: float = 0.5
    bg_ratio: float = 20.0
    patch_radius: int = 12
    max_displacement: float = 64.0
    # detection
    smooth_sigma: float = 2.0
    nms_radius: int = 8
    rel_threshold: float = 0.1
    pair_rule: str = "hull"
    top_k: int = 5
    # event weight learning
    crf_l2: float = 1e-4
    # evaluation
    folds: int | str = 5
    # synthetic data
    movie_count: int = 1
    image_size: int = 96
    frame_count: int = 6
    cell_count: int = 12
    distractor_count: int = 0
    mitosis_event_count: int = 2
    cell_radius_min: float = 4.0
    cell_radius_max: float = 7.0
    mother_brightness_boost: float = 1.6
    pair_distance_mu: float = 10.0
    pair_distance_sigma: float = 2.0
    noise_sigma: float = 0.05
    # run
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.folds, str):
            if self.folds != "loo":
                raise ValueError(f"folds must be an integer >= 2 or 'loo', got {self.folds!r}")
        elif self.folds < 2:
            raise ValueError(f"folds must be an integer >= 2 or 'loo', got {self.folds}")
        if self.movie_count < 1:
            raise ValueError("movieCount must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        # stage configs run their own checks; build them eagerly so a bad
        # value fails at load time, not in the middle of a run
        self.train_params()
        self.detection_settings()
        self.synth_config()
        if self.crf_l2 < 0:
            raise ValueError("crfL2 must be >= 0")

    def train_params(self, mode: str = "hf", seed: int | None = None) -> TrainParams:
        base = TrainParams(
            tree_count=self.tree_count,
            max_depth=self.max_depth,
            features_per_split=self.features_per_split,
            thresholds_per_feature=self.thresholds_per_feature,
            min_leaf_samples=self.min_leaf_samples,
            uniformity_prob=self.uniformity_prob,
            bg_ratio=self.bg_ratio,
            patch_radius=self.patch_radius,
            max_displacement=self.max_displacement,
            seed=self.seed if seed is None else seed,
        )
        return params_for_mode(base, mode)

    def detection_settings(self) -> DetectionSettings:
        return DetectionSettings(
            smooth_sigma=self.smooth_sigma,
            nms_radius=self.nms_radius,
            rel_threshold=self.rel_threshold,
            pair_rule=self.pair_rule,
            top_k=self.top_k,
        )

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size,
            frame_count=self.frame_count,
            cell_count=self.cell_count,
            distractor_count=self.distractor_count,
            mitosis_event_count=self.mitosis_event_count,
            cell_radius_range=(self.cell_radius_min, self.cell_radius_max),
            mother_brightness_boost=self.mother_brightness_boost,
            pair_distance=DistanceStats(self.pair_distance_mu, self.pair_distance_sigma),
            noise_sigma=self.noise_sigma,
            seed=self.seed if seed is None else seed,
        )


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(part.capitalize() for part in rest)


_INT_FIELDS = {
    "tree_count", "max_depth", "features_per_split", "thresholds_per_feature",
    "min_leaf_samples", "patch_radius", "nms_radius", "top_k", "movie_count", "image_size",
    "frame_count", "cell_count", "distractor_count", "mitosis_event_count", "seed",
}
_FLOAT_FIELDS = {
    "uniformity_prob", "bg_ratio", "max_displacement", "smooth_sigma",
    "rel_threshold", "crf_l2", "cell_radius_min", "cell_radius_max",
    "mother_brightness_boost", "pair_distance_mu", "pair_distance_sigma",
    "noise_sigma",
}
_SPECIAL_FIELDS = {"pair_rule": "str", "folds": "folds", "out_dir": "optstr"}


def _field_kind(name: str) -> str:
    if name in _INT_FIELDS:
        return "int"
    if name in _FLOAT_FIELDS:
        return "float"
    return _SPECIAL_FIELDS[name]


# JSON key -> (dataclass field, expected kind)
_SCHEMA = {_camel(f.name): (f.name, _field_kind(f.name)) for f in fields(PipelineConfig)}


def _check_type(key: str, value, kind: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ValueError(f"config key {key!r} must be a string, got {value!r}")
        return value
    if kind == "optstr":
        if value is not None and not isinstance(value, str):
            raise ValueError(f"config key {key!r} must be a string or null, got {value!r}")
        return value
    if kind == "folds":
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ValueError(f"config key {key!r} must be an integer or 'loo', got {value!r}")
        return value
    raise AssertionError(kind)


def parse_config(path) -> PipelineConfig:
    """Load a JSON config file; absent keys keep their defaults."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = sorted(set(data) - set(_SCHEMA))
    if unknown:
        raise ValueError(f"{path}: unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        field_name, kind = _SCHEMA[key]
        kwargs[field_name] = _check_type(key, value, kind)
    return PipelineConfig(**kwargs)
