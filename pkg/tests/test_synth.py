import math

import numpy as np
import pytest

from hmd.crf import DistanceStats
from hmd.evaluation import point_in_polygon, polygon_centroid
from hmd.forest import ClassLabel
from hmd.synth import PlacementError, SynthConfig, generate_sequence


def small_config(**kw):
    base = dict(
        image_size=96,
        frame_count=5,
        cell_count=8,
        mitosis_event_count=2,
        seed=7,
    )
    base.update(kw)
    return SynthConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=16)
    with pytest.raises(ValueError):
        SynthConfig(frame_count=1)
    with pytest.raises(ValueError):
        SynthConfig(cell_count=-1)
    with pytest.raises(ValueError):
        SynthConfig(mitosis_event_count=-1)
    with pytest.raises(ValueError):
        SynthConfig(cell_radius_range=(5.0, 3.0))
    with pytest.raises(ValueError):
        SynthConfig(cell_radius_range=(0.0, 3.0))
    with pytest.raises(ValueError):
        SynthConfig(mother_brightness_boost=1.0)
    with pytest.raises(ValueError):
        SynthConfig(noise_sigma=-0.1)


def test_frame_shapes_and_intensity_range():
    cfg = small_config()
    frames, _ = generate_sequence(cfg)
    assert len(frames) == cfg.frame_count
    for img in frames:
        assert img.pixels.shape == (2, cfg.image_size, cfg.image_size)
        assert img.pixels.min() >= 0.0
        assert img.pixels.max() <= 1.0


def test_ground_truth_structure():
    cfg = small_config(mitosis_event_count=3, frame_count=8)
    _, gt = generate_sequence(cfg)
    assert len(gt.events) == 3
    gt.validate()
    for e in gt.events:
        assert 0 <= e.frame_t <= cfg.frame_count - 2
        mother = gt.mother_contour(e)
        assert mother.class_label == ClassLabel.MOTHER
        assert mother.polygon.shape == (32, 2)
        pair = gt.daughter_pair_contours(e)
        assert len(pair) == 2
        for c in pair:
            assert c.class_label == ClassLabel.DAUGHTER
            assert c.object_id == e.daughter_pair_id
            assert c.polygon.shape == (32, 2)


def test_zero_events_and_zero_cells():
    _, gt = generate_sequence(small_config(mitosis_event_count=0))
    assert gt.events == []
    assert all(not f.contours for f in gt.frames)
    frames, _ = generate_sequence(small_config(cell_count=0, noise_sigma=0.0))
    # only scripted cells remain, most frames nearly empty
    assert frames[0].pixels.max() <= 1.0


def test_centroids_inside_own_outline():
    cfg = small_config(mitosis_event_count=3, frame_count=8, seed=11)
    _, gt = generate_sequence(cfg)
    for f in gt.frames:
        for c in f.contours:
            assert point_in_polygon(polygon_centroid(c.polygon), c.polygon)


def test_deterministic_per_seed():
    cfg = small_config(seed=42)
    frames_a, gt_a = generate_sequence(cfg)
    frames_b, gt_b = generate_sequence(cfg)
    for a, b in zip(frames_a, frames_b):
        assert np.array_equal(a.pixels, b.pixels)
    assert [e.frame_t for e in gt_a.events] == [e.frame_t for e in gt_b.events]
    for fa, fb in zip(gt_a.frames, gt_b.frames):
        for ca, cb in zip(fa.contours, fb.contours):
            assert ca.object_id == cb.object_id
            assert np.array_equal(ca.polygon, cb.polygon)

    frames_c, _ = generate_sequence(small_config(seed=43))
    assert any(
        not np.array_equal(a.pixels, c.pixels) for a, c in zip(frames_a, frames_c)
    )


def test_pair_distance_statistics():
    # 200 events: the mean mother-to-midpoint distance must sit within
    # three standard errors of the configured mean
    mu, sigma = 10.0, 2.0
    distances = []
    for seed in range(50):
        cfg = SynthConfig(
            image_size=128,
            frame_count=5,
            cell_count=4,
            mitosis_event_count=4,
            pair_distance=DistanceStats(mu, sigma),
            seed=seed,
        )
        _, gt = generate_sequence(cfg)
        for e in gt.events:
            mx, my = polygon_centroid(gt.mother_contour(e).polygon)
            centers = [polygon_centroid(c.polygon) for c in gt.daughter_pair_contours(e)]
            midx = (centers[0][0] + centers[1][0]) / 2.0
            midy = (centers[0][1] + centers[1][1]) / 2.0
            distances.append(math.hypot(midx - mx, midy - my))
    assert len(distances) == 200
    stderr = sigma / math.sqrt(len(distances))
    assert abs(np.mean(distances) - mu) < 3.0 * stderr


def test_mother_membrane_brighter_than_daughter_membrane():
    # the boost lands on the membrane ring; probe channel 0 on the
    # outline itself, where the drawn ring peaks
    highs, lows = [], []
    for seed in range(8):
        cfg = small_config(seed=seed, noise_sigma=0.0, mitosis_event_count=2)
        frames, gt = generate_sequence(cfg)
        for e in gt.events:
            mother = gt.mother_contour(e)
            for vx, vy in mother.polygon[::8]:
                highs.append(frames[e.frame_t].pixels[0, int(round(vy)), int(round(vx))])
            for c in gt.daughter_pair_contours(e):
                for vx, vy in c.polygon[::8]:
                    lows.append(
                        frames[e.frame_t + 1].pixels[0, int(round(vy)), int(round(vx))]
                    )
    assert np.mean(highs) > np.mean(lows) * 1.3


def test_placement_error_when_too_crowded():
    with pytest.raises(PlacementError):
        generate_sequence(small_config(image_size=48, cell_count=60))
