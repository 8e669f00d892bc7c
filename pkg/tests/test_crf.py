import math

import numpy as np
import pytest

from hmd.crf import (
    CrfWeights,
    DistanceStats,
    MitosisCandidate,
    build_training_triples,
    detect_mitosis,
    distance_prob,
    enumerate_candidates,
    fit_distance_stats,
    fit_weights,
    load_weights,
    logistic_loss,
    map_inference,
    mitosis_score,
    save_weights,
    score_candidates,
    select_events,
)
from hmd.forest import ClassLabel
from hmd.image import MultiChannelImage
from hmd.voting import Detection, HoughMap

STATS = DistanceStats(mu=10.0, sigma=2.0)


def det(x, y, score, cls=ClassLabel.MOTHER):
    return Detection((x, y), score, cls)


def unit_weights(bias=0.0, stats=STATS):
    return CrfWeights(w_m=1.0, w_d=1.0, w_md=1.0, bias=bias, stats=stats)


def test_distance_stats_validation():
    with pytest.raises(ValueError):
        DistanceStats(mu=5.0, sigma=0.0)
    with pytest.raises(ValueError):
        DistanceStats(mu=5.0, sigma=-1.0)
    with pytest.raises(ValueError):
        DistanceStats(mu=float("nan"), sigma=1.0)


def test_distance_prob_peak_at_mu():
    assert distance_prob((0, 0), (10, 0), STATS) == pytest.approx(1.0, abs=1e-6)


def test_distance_prob_one_sigma_out():
    assert distance_prob((0, 0), (12, 0), STATS) == pytest.approx(math.exp(-0.5), abs=1e-6)
    assert distance_prob((0, 0), (8, 0), STATS) == pytest.approx(math.exp(-0.5), abs=1e-6)


def test_distance_prob_monotone_decay_and_range():
    last_above = 1.0
    for dist in (10.0, 11.0, 13.0, 16.0, 30.0):
        p = distance_prob((0.0, 0.0), (dist, 0.0), STATS)
        assert 0.0 < p <= last_above
        last_above = p
    rng = np.random.default_rng(0)
    for _ in range(200):
        # keep |dist - mu| / sigma small enough that exp() cannot underflow
        m = tuple(rng.uniform(-25, 25, 2))
        d = tuple(rng.uniform(-25, 25, 2))
        p = distance_prob(m, d, STATS)
        assert 0.0 < p <= 1.0
        assert p == pytest.approx(distance_prob(d, m, STATS), abs=1e-12)


def test_fit_distance_stats():
    events = [((0.0, 0.0), (8.0, 0.0)), ((0.0, 0.0), (0.0, 12.0))]
    stats = fit_distance_stats(events)
    assert stats.mu == pytest.approx(10.0, abs=1e-9)
    assert stats.sigma == pytest.approx(math.sqrt(8.0), abs=1e-9)


def test_fit_distance_stats_errors():
    with pytest.raises(ValueError):
        fit_distance_stats([((0, 0), (10, 0))])
    with pytest.raises(ValueError):
        fit_distance_stats([((0, 0), (10, 0)), ((5, 5), (15, 5))])  # both exactly 10


def test_mitosis_score_examples():
    zero = CrfWeights(0.0, 0.0, 0.0, 0.0, STATS)
    assert mitosis_score(0.3, 0.9, 0.5, zero) == pytest.approx(0.0, abs=1e-6)
    assert mitosis_score(0.5, 0.25, 0.8, unit_weights()) == pytest.approx(1.55, abs=1e-6)


def test_mitosis_score_monotone_in_mother_score():
    w = CrfWeights(2.0, 0.5, 0.1, -1.0, STATS)
    scores = [mitosis_score(h, 0.3, 0.7, w) for h in np.linspace(0, 1, 20)]
    assert all(b > a for a, b in zip(scores, scores[1:]))


def test_enumerate_candidates_empty_and_cross_product():
    daughters = [det(0, 0, 0.5, ClassLabel.DAUGHTER), det(5, 5, 0.4, ClassLabel.DAUGHTER),
                 det(9, 0, 0.3, ClassLabel.DAUGHTER)]
    assert enumerate_candidates([], daughters, 50.0, STATS) == []
    mothers = [det(1, 1, 0.9), det(3, 3, 0.8)]
    cands = enumerate_candidates(mothers, daughters, 50.0, STATS)
    assert len(cands) == 6
    for c in cands:
        h_m, h_d, p = c.features
        assert h_m == c.mother.score
        assert h_d == c.daughter.score
        assert p == pytest.approx(distance_prob(c.mother.position, c.daughter.position, STATS))


def test_enumerate_candidates_radius_gate():
    mothers = [det(0, 0, 1.0)]
    daughters = [det(100, 0, 1.0, ClassLabel.DAUGHTER)]
    assert enumerate_candidates(mothers, daughters, 50.0, STATS) == []
    assert len(enumerate_candidates(mothers, daughters, 100.0, STATS)) == 1


def test_map_inference_single_and_empty():
    assert map_inference([], unit_weights()) is None
    c = MitosisCandidate(det(0, 0, 0.5), det(5, 5, 0.5, ClassLabel.DAUGHTER), (0.5, 0.5, 0.9))
    best = map_inference([c], unit_weights())
    assert best.mother is c.mother and best.daughter is c.daughter
    assert best.score == pytest.approx(1.9)


def test_map_inference_matches_brute_force():
    rng = np.random.default_rng(4)
    w = CrfWeights(1.3, 0.7, 2.1, -0.4, STATS)
    for _ in range(60):
        cands = []
        for _ in range(int(rng.integers(1, 25))):
            m = det(int(rng.integers(0, 60)), int(rng.integers(0, 60)), float(rng.random() + 1e-6))
            d = det(int(rng.integers(0, 60)), int(rng.integers(0, 60)), float(rng.random() + 1e-6),
                    ClassLabel.DAUGHTER)
            p = float(rng.random())
            cands.append(MitosisCandidate(m, d, (m.score, d.score, p)))
        got = map_inference(cands, w)
        best_score = max(mitosis_score(*c.features, w) for c in cands)
        assert got.score == pytest.approx(best_score, abs=1e-12)


def test_map_inference_deterministic_tie_break():
    a = MitosisCandidate(det(2, 1, 0.5), det(0, 9, 0.5, ClassLabel.DAUGHTER), (0.5, 0.5, 0.5))
    b = MitosisCandidate(det(1, 2, 0.5), det(9, 0, 0.5, ClassLabel.DAUGHTER), (0.5, 0.5, 0.5))
    w = unit_weights()
    first = map_inference([a, b], w)
    second = map_inference([b, a], w)
    assert first.mother.position == second.mother.position == (2, 1)  # row-major: y wins


def test_ranking_invariant_under_constant_shift():
    rng = np.random.default_rng(9)
    cands = []
    for _ in range(30):
        m = det(int(rng.integers(0, 50)), int(rng.integers(0, 50)), float(rng.random() + 1e-6))
        d = det(int(rng.integers(0, 50)), int(rng.integers(0, 50)), float(rng.random() + 1e-6),
                ClassLabel.DAUGHTER)
        cands.append(MitosisCandidate(m, d, (m.score, d.score, float(rng.random()))))
    for shift in (0.0, -3.0, 7.5):
        w0 = CrfWeights(1.1, 0.9, 1.7, 0.0, STATS)
        ws = CrfWeights(1.1, 0.9, 1.7, shift, STATS)
        order0 = [(c.mother.position, c.daughter.position) for c in select_events(cands, w0)]
        orders = [(c.mother.position, c.daughter.position) for c in select_events(cands, ws)]
        assert order0 == orders
        assert map_inference(cands, w0).mother.position == map_inference(cands, ws).mother.position


def test_select_events_never_shares_detections():
    m1, m2 = det(0, 0, 0.9), det(20, 0, 0.8)
    d1, d2 = det(10, 0, 0.7, ClassLabel.DAUGHTER), det(30, 0, 0.6, ClassLabel.DAUGHTER)
    cands = enumerate_candidates([m1, m2], [d1, d2], 1000.0, STATS)
    events = select_events(cands, unit_weights())
    mothers = [e.mother.position for e in events]
    daughters = [e.daughter.position for e in events]
    assert len(mothers) == len(set(mothers))
    assert len(daughters) == len(set(daughters))
    assert len(events) == 2  # two disjoint events survive


# ---------------------------------------------------------------------------
# weight learning


def separable_triples():
    pos = [((1.0, 0.0, 0.0), 1) for _ in range(20)]
    neg = [((0.0, 0.0, 0.0), 0) for _ in range(20)]
    return pos + neg


def test_fit_weights_rejects_single_class():
    with pytest.raises(ValueError):
        fit_weights([((1.0, 0.0, 0.0), 1), ((0.5, 0.0, 0.0), 1)], STATS)


def test_fit_weights_loss_non_increasing():
    # with l2=0 the optimized objective is the plain data loss, which the
    # internal standardization leaves unchanged, so descent is exact
    triples = separable_triples()
    losses = []
    for epochs in (0, 5, 50, 500, 2000):
        w = fit_weights(triples, STATS, l2=0.0, max_epochs=epochs)
        losses.append(logistic_loss(triples, w, l2=0.0))
    for a, b in zip(losses, losses[1:]):
        assert b <= a + 1e-12


def test_fit_weights_separable_sign_matches_grid_search():
    triples = separable_triples()
    w = fit_weights(triples, STATS)
    assert w.w_m > 0.0
    # coarse grid over w_m confirms the loss prefers positive weight
    grid = np.linspace(-5, 5, 41)
    losses = [
        logistic_loss(triples, CrfWeights(g, 0.0, 0.0, 0.0, STATS)) for g in grid
    ]
    assert grid[int(np.argmin(losses))] > 0.0


def test_fit_weights_separable_reaches_full_accuracy():
    triples = separable_triples()
    w = fit_weights(triples, STATS)
    for features, label in triples:
        s = mitosis_score(*features, w)
        assert (s > 0.0) == bool(label)


def test_fit_weights_order_invariant():
    rng = np.random.default_rng(5)
    triples = []
    for _ in range(50):
        f = tuple(rng.random(3))
        label = int(f[0] + f[2] > 1.0)
        triples.append((f, label))
    if not any(t[1] for t in triples) or all(t[1] for t in triples):
        pytest.skip("degenerate draw")
    w1 = fit_weights(triples, STATS)
    shuffled = list(triples)
    rng.shuffle(shuffled)
    w2 = fit_weights(shuffled, STATS)
    assert w1.w_m == pytest.approx(w2.w_m, abs=1e-6)
    assert w1.w_d == pytest.approx(w2.w_d, abs=1e-6)
    assert w1.w_md == pytest.approx(w2.w_md, abs=1e-6)
    assert w1.bias == pytest.approx(w2.bias, abs=1e-6)


def test_fit_weights_reduced_models_zero_disabled_columns():
    rng = np.random.default_rng(6)
    triples = []
    for _ in range(60):
        f = tuple(rng.random(3))
        triples.append((f, int(sum(f) > 1.5)))
    no_dist = fit_weights(triples, STATS, use_distance=False)
    assert no_dist.w_md == 0.0
    assert no_dist.w_m != 0.0
    no_mother = fit_weights(triples, STATS, use_mother=False)
    assert no_mother.w_m == 0.0
    no_daughter = fit_weights(triples, STATS, use_daughter=False)
    assert no_daughter.w_d == 0.0
    with pytest.raises(ValueError):
        fit_weights(triples, STATS, use_mother=False, use_daughter=False, use_distance=False)


# ---------------------------------------------------------------------------
# triple construction and end-to-end detection


def peak_map(size, peaks, cls):
    values = np.zeros((size, size))
    for x, y, v in peaks:
        values[y, x] = v
    return HoughMap(cls, values)


def test_build_training_triples_positive_features():
    mother_map = peak_map(64, [(10, 10, 0.9)], ClassLabel.MOTHER)
    daughter_map = peak_map(64, [(20, 10, 0.6)], ClassLabel.DAUGHTER)
    triples = build_training_triples(
        mother_map, daughter_map, [((10, 10), (20, 10))], STATS, nms_radius=5
    )
    positives = [t for t in triples if t[1] == 1]
    assert len(positives) == 1
    h_m, h_d, p = positives[0][0]
    assert h_m == pytest.approx(0.9)
    assert h_d == pytest.approx(0.6)
    assert p == pytest.approx(1.0)  # distance exactly mu


def test_build_training_triples_hard_negatives_exclude_matches():
    # true event at (10,10)->(20,10); decoy peaks elsewhere become negatives
    mother_map = peak_map(64, [(10, 10, 0.9), (40, 40, 0.8), (55, 12, 0.7)], ClassLabel.MOTHER)
    daughter_map = peak_map(64, [(20, 10, 0.6), (48, 40, 0.5), (55, 24, 0.4)], ClassLabel.DAUGHTER)
    triples = build_training_triples(
        mother_map, daughter_map, [((10, 10), (20, 10))], STATS, nms_radius=5, top_k=3
    )
    negatives = [t for t in triples if t[1] == 0]
    assert 0 < len(negatives) <= 3
    for features, _ in negatives:
        # none of the negatives is the true pair's feature triple
        assert features != pytest.approx((0.9, 0.6, 1.0))


def test_hard_negative_ranking_ignores_distance_prior():
    # decoy A: strong unaries, poor distance; decoy B: weak unaries, ideal distance.
    # mining must rank by detector confidence alone, so A wins the single slot.
    mother_map = peak_map(64, [(10, 10, 0.9), (40, 40, 0.5), (55, 12, 0.4)], ClassLabel.MOTHER)
    daughter_map = peak_map(64, [(20, 10, 0.6), (54, 40, 0.45), (55, 22, 0.4)], ClassLabel.DAUGHTER)
    triples = build_training_triples(
        mother_map, daughter_map, [((10, 10), (20, 10))], STATS, nms_radius=5, top_k=1
    )
    negatives = [f for f, y in triples if y == 0]
    assert len(negatives) == 1
    h_m, h_d, p = negatives[0]
    assert (h_m, h_d) == pytest.approx((0.5, 0.45))
    assert p < 0.2


def test_detect_mitosis_blank_frames_yield_nothing():
    from hmd.features import PatchSpec
    from hmd.forest import ClassPriors, HoughForestModel, Leaf, TrainParams

    leaf = Leaf(np.array([1.0, 0.0, 0.0]), np.array([10, 0, 0]),
                {c: np.zeros((0, 2)) for c in (ClassLabel.MOTHER, ClassLabel.DAUGHTER)})
    model = HoughForestModel(
        trees=[leaf],
        priors=ClassPriors(np.full(3, 1 / 3)),
        patch_spec=PatchSpec(2, 1),
        params=TrainParams(tree_count=1, patch_radius=2),
    )
    blank = MultiChannelImage(np.zeros((1, 32, 32)))
    w = unit_weights()
    assert detect_mitosis(model, w, blank, blank) == []


# ---------------------------------------------------------------------------
# weights file


def test_weights_file_round_trip(tmp_path):
    w = CrfWeights(1.25, -0.5, 3.75, 0.125, DistanceStats(11.5, 3.25))
    path = tmp_path / "weights.json"
    save_weights(w, path)
    back = load_weights(path)
    assert back == w


def test_weights_file_errors(tmp_path):
    w = CrfWeights(1.0, 1.0, 1.0, 0.0, STATS)
    path = tmp_path / "weights.json"
    save_weights(w, path)

    import json

    payload = json.loads(path.read_text())
    payload["formatVersion"] = 9
    bad = tmp_path / "bad_version.json"
    bad.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        load_weights(bad)

    payload = json.loads(path.read_text())
    del payload["w_md"]
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="missing"):
        load_weights(missing)

    payload = json.loads(path.read_text())
    payload["extra"] = 1
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="unknown"):
        load_weights(unknown)


def test_score_candidates_preserves_order_and_features():
    cands = [
        MitosisCandidate(det(1, 1, 0.5), det(2, 2, 0.25, ClassLabel.DAUGHTER), (0.5, 0.25, 0.8)),
        MitosisCandidate(det(3, 3, 0.1), det(4, 4, 0.1, ClassLabel.DAUGHTER), (0.1, 0.1, 0.1)),
    ]
    scored = score_candidates(cands, unit_weights())
    assert [c.features for c in scored] == [c.features for c in cands]
    assert scored[0].score == pytest.approx(1.55)
