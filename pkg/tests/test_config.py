import json

import pytest

from hmd.config import PipelineConfig, parse_config


@pytest.fixture()
def parse(tmp_path):
    def run(text):
        path = tmp_path / "cfg.json"
        path.write_text(text)
        return parse_config(path)

    return run


def test_empty_object_gives_documented_defaults(parse):
    cfg = parse("{}")
    assert cfg.tree_count == 8
    assert cfg.max_depth == 19
    assert cfg.features_per_split == 500
    assert cfg.thresholds_per_feature == 50
    assert cfg.min_leaf_samples == 10
    params = cfg.train_params()
    assert params.tree_count == 8
    assert params.max_depth == 19
    assert params.features_per_split == 500
    assert params.thresholds_per_feature == 50
    assert params.min_leaf_samples == 10
    assert cfg == PipelineConfig()


def test_missing_file_is_an_error(tmp_path):
    with pytest.raises(OSError):
        parse_config(tmp_path / "nope.json")


def test_zero_tree_count_rejected(parse):
    with pytest.raises(ValueError, match="tree_count"):
        parse('{"treeCount": 0}')


def test_unknown_key_rejected_by_name(parse):
    with pytest.raises(ValueError, match="treez"):
        parse('{"treez": 3}')


def test_invalid_json_rejected(parse):
    with pytest.raises(ValueError, match="JSON"):
        parse("{not json")


def test_non_object_json_rejected(parse):
    for text in ("[1, 2]", '"hi"', "3"):
        with pytest.raises(ValueError):
            parse(text)


def test_every_key_round_trips(parse):
    doc = {
        "treeCount": 3,
        "maxDepth": 7,
        "featuresPerSplit": 40,
        "thresholdsPerFeature": 9,
        "minLeafSamples": 4,
        "uniformityProb": 0.25,
        "bgRatio": 5.0,
        "patchRadius": 6,
        "maxDisplacement": 20.0,
        "smoothSigma": 1.5,
        "nmsRadius": 4,
        "relThreshold": 0.2,
        "pairRule": "either",
        "topK": 3,
        "crfL2": 0.01,
        "folds": 4,
        "movieCount": 2,
        "imageSize": 80,
        "frameCount": 4,
        "cellCount": 6,
        "distractorCount": 2,
        "mitosisEventCount": 1,
        "cellRadiusMin": 3.5,
        "cellRadiusMax": 6.5,
        "motherBrightnessBoost": 1.4,
        "pairDistanceMu": 9.0,
        "pairDistanceSigma": 1.5,
        "noiseSigma": 0.02,
        "seed": 99,
        "outDir": "runs/a",
    }
    cfg = parse(json.dumps(doc))
    assert cfg.tree_count == 3
    assert cfg.max_depth == 7
    assert cfg.features_per_split == 40
    assert cfg.thresholds_per_feature == 9
    assert cfg.min_leaf_samples == 4
    assert cfg.uniformity_prob == 0.25
    assert cfg.bg_ratio == 5.0
    assert cfg.patch_radius == 6
    assert cfg.max_displacement == 20.0
    assert cfg.smooth_sigma == 1.5
    assert cfg.nms_radius == 4
    assert cfg.rel_threshold == 0.2
    assert cfg.pair_rule == "either"
    assert cfg.top_k == 3
    assert cfg.crf_l2 == 0.01
    assert cfg.folds == 4
    assert cfg.movie_count == 2
    assert cfg.image_size == 80
    assert cfg.frame_count == 4
    assert cfg.cell_count == 6
    assert cfg.distractor_count == 2
    assert cfg.mitosis_event_count == 1
    assert cfg.cell_radius_min == 3.5
    assert cfg.cell_radius_max == 6.5
    assert cfg.mother_brightness_boost == 1.4
    assert cfg.pair_distance_mu == 9.0
    assert cfg.pair_distance_sigma == 1.5
    assert cfg.noise_sigma == 0.02
    assert cfg.seed == 99
    assert cfg.out_dir == "runs/a"

    params = cfg.train_params()
    assert params.tree_count == 3
    assert params.patch_radius == 6
    assert params.bg_ratio == 5.0
    synth = cfg.synth_config()
    assert synth.image_size == 80
    assert synth.cell_radius_range == (3.5, 6.5)
    assert synth.pair_distance.mu == 9.0
    settings = cfg.detection_settings()
    assert settings.nms_radius == 4
    assert settings.pair_rule == "either"
    assert settings.top_k == 3


def test_wrong_value_types_rejected(parse):
    bad = [
        '{"treeCount": "8"}',
        '{"treeCount": 8.5}',
        '{"treeCount": true}',
        '{"smoothSigma": "wide"}',
        '{"smoothSigma": false}',
        '{"pairRule": 3}',
        '{"folds": 2.5}',
        '{"outDir": 7}',
        '{"seed": -1}',
        '{"seed": 1.25}',
    ]
    for text in bad:
        with pytest.raises(ValueError):
            parse(text)


def test_int_accepted_where_float_expected(parse):
    cfg = parse('{"smoothSigma": 2, "bgRatio": 10}')
    assert cfg.smooth_sigma == 2.0
    assert isinstance(cfg.smooth_sigma, float)
    assert cfg.bg_ratio == 10.0


def test_folds_literal_loo_and_bounds(parse):
    assert parse('{"folds": "loo"}').folds == "loo"
    assert parse('{"folds": 2}').folds == 2
    for text in ('{"folds": 1}', '{"folds": 0}', '{"folds": "all"}'):
        with pytest.raises(ValueError):
            parse(text)


def test_multiple_unknown_keys_all_named(parse):
    with pytest.raises(ValueError) as err:
        parse('{"treez": 1, "frobnicate": 2}')
    assert "treez" in str(err.value)
    assert "frobnicate" in str(err.value)


def test_mode_controls_vote_storage_and_uniformity():
    cfg = PipelineConfig()
    hf = cfg.train_params("hf")
    assert hf.store_votes and hf.uniformity_prob == 0.5
    cfhv = cfg.train_params("cf-hv")
    assert cfhv.store_votes and cfhv.uniformity_prob == 0.0
    cf = cfg.train_params("cf")
    assert not cf.store_votes and cf.uniformity_prob == 0.0
    with pytest.raises(ValueError):
        cfg.train_params("mystery")


def test_seed_override_flows_into_stage_configs():
    cfg = PipelineConfig(seed=123)
    assert cfg.train_params(seed=7).seed == 7
    assert cfg.train_params().seed == 123
    assert cfg.synth_config(seed=9).seed == 9
    assert cfg.synth_config().seed == 123


def test_invalid_stage_values_rejected_at_parse_time(parse):
    bad = [
        '{"maxDepth": 0}',
        '{"featuresPerSplit": 0}',
        '{"nmsRadius": 0}',
        '{"relThreshold": 0.0}',
        '{"cellRadiusMin": 6.0, "cellRadiusMax": 5.0}',
        '{"pairRule": "donut"}',
        '{"crfL2": -0.5}',
        '{"movieCount": 0}',
    ]
    for text in bad:
        with pytest.raises(ValueError):
            parse(text)
