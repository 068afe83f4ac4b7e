import math

import numpy as np
import pytest

from descriptors import DescriptorSet, KeypointSet
from errors import DimensionMismatch, UnattainablePrecision
from matcher import (
    FLAG_NO_COMPETITOR,
    Match,
    MatchParams,
    MatchSet,
    apply_cutoff,
    match_images,
    match_score,
    read_match_csv,
    score_matrix,
    threshold_at_precision,
    warp_distance,
    write_match_csv,
)
from tps import TpsWarp, fit_warp, regular_grid

IDENTITY = TpsWarp.identity(regular_grid(3))


def descriptor_set(image_id: str, points, vectors) -> DescriptorSet:
    vectors = np.asarray(vectors, dtype=np.float64)
    vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    return DescriptorSet(KeypointSet.from_points(image_id, points), vectors, "test")


def ranked(ratios) -> MatchSet:
    pairs = tuple(Match(i, i, (0.0, 0.0), (0.0, 0.0), 1.0, float(r)) for i, r in enumerate(ratios))
    return MatchSet(pairs, MatchParams())


def test_warp_distance_examples():
    assert warp_distance([5, 5], [5, 5], IDENTITY, IDENTITY) == 0.0
    assert warp_distance([10, 10], [13, 14], IDENTITY, IDENTITY) == pytest.approx(5.0)

    grid = regular_grid(3)
    t = np.array([0.2, -0.1])
    ab, ba = fit_warp(grid, grid - t), fit_warp(grid, grid + t)
    u = np.array([0.3, 0.4])
    assert warp_distance(u, u + t, ab, ba) == pytest.approx(0.0, abs=1e-10)


def test_warp_distance_in_pixels_with_image_sizes():
    assert warp_distance([10, 10], [13, 14], IDENTITY, IDENTITY, (64, 64), (64, 64)) == pytest.approx(5.0)


def test_match_score_examples():
    params = MatchParams()
    assert match_score(0.0, 0.0, params) == pytest.approx(1.3)
    assert match_score(1e9, 1e9, params) == pytest.approx(0.0)
    assert match_score(1.75, 18.0, params) == pytest.approx(1.3 * math.exp(-1), rel=1e-12)
    assert match_score(1.75, 18.0, params) == pytest.approx(0.47825, abs=1e-5)
    assert params.max_score == pytest.approx(1.3)


def test_lambda_alias():
    assert MatchParams(**{"lambda": 0.5}).lam == 0.5


def test_equal_candidates_far_apart_are_ambiguous():
    a = descriptor_set("a", [[50, 50]], [[1, 0, 0, 0]])
    b = descriptor_set("b", [[40, 50], [60, 50]], [[1, 0, 0, 0], [1, 0, 0, 0]])
    matches = match_images(a, b, None, None, MatchParams())
    assert len(matches) == 1
    assert matches.pairs[0].ratio == pytest.approx(1.0)
    assert not matches.pairs[0].no_competitor


def test_candidates_inside_the_exclusion_radius_have_no_competitor():
    a = descriptor_set("a", [[50, 50]], [[1, 0, 0, 0]])
    b = descriptor_set("b", [[50, 50], [55, 50]], [[1, 0, 0, 0], [1, 0, 0, 0]])
    match = match_images(a, b, None, None, MatchParams()).pairs[0]
    assert match.ratio == 0.0
    assert match.no_competitor


def test_exact_copies_rank_ahead_of_noise(rng):
    points = rng.uniform(10, 90, (12, 2))
    vectors = rng.normal(size=(12, 32))
    noise_points = rng.uniform(300, 400, (20, 2))
    noise_vectors = rng.normal(size=(20, 32))
    a = descriptor_set("a", points, vectors)
    b = descriptor_set("b", np.vstack([points, noise_points]), np.vstack([vectors, noise_vectors]))

    matches = match_images(a, b, IDENTITY, IDENTITY, MatchParams())
    assert all(m.a_idx == m.b_idx for m in matches.pairs)
    assert np.all(matches.ratios < 1.0)
    assert np.all(np.diff(matches.ratios) >= 0)


def brute_force_matches(scores: np.ndarray, points_a: np.ndarray, points_b: np.ndarray, radius: float) -> list[Match]:
    expected = []
    for i in range(scores.shape[0]):
        best = 0
        for j in range(1, scores.shape[1]):
            if scores[i, j] > scores[i, best]:
                best = j
        competitors = [
            scores[i, j] for j in range(scores.shape[1]) if j != best and math.dist(points_b[j], points_b[best]) >= radius
        ]
        if competitors:
            ratio = max(competitors) / scores[i, best] if scores[i, best] > 0 else 1.0
            alone = False
        else:
            ratio, alone = 0.0, True
        a_xy = (float(points_a[i, 0]), float(points_a[i, 1]))
        b_xy = (float(points_b[best, 0]), float(points_b[best, 1]))
        expected.append(Match(i, best, a_xy, b_xy, float(scores[i, best]), float(ratio), alone))
    return sorted(expected, key=lambda m: m.ratio)


@pytest.mark.parametrize("seed", range(50))
def test_matches_agree_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    size = (100, 100)
    m_a, m_b = (int(n) for n in rng.integers(1, 21, 2))
    params = MatchParams(lam=float(rng.uniform(0.0, 1.0)), sigma_w=float(rng.uniform(5.0, 30.0)))
    grid = regular_grid(3)
    ab = fit_warp(grid, grid + rng.normal(0, 0.05, grid.shape))
    ba = fit_warp(grid, grid + rng.normal(0, 0.05, grid.shape))
    a = descriptor_set("a", rng.uniform(0, 99, (m_a, 2)), rng.normal(size=(m_a, 8)))
    b = descriptor_set("b", rng.uniform(0, 99, (m_b, 2)), rng.normal(size=(m_b, 8)))

    scores = score_matrix(a, b, params, ab, ba, size, size)
    for i in range(m_a):
        for j in range(m_b):
            d_f = np.linalg.norm(a.vectors[i] - b.vectors[j])
            d_w = warp_distance(a.keypoints.points[i], b.keypoints.points[j], ab, ba, size, size)
            assert scores[i, j] == pytest.approx(match_score(d_f, d_w, params), rel=1e-12)

    matches = match_images(a, b, ab, ba, params, size, size)
    expected = brute_force_matches(scores, a.keypoints.points, b.keypoints.points, params.min_second_nn_px)
    assert matches.pairs == tuple(expected)


def test_matches_do_not_depend_on_keypoint_order(rng):
    params = MatchParams(lam=0.5)
    grid = regular_grid(3)
    ab = fit_warp(grid, grid + rng.normal(0, 0.05, grid.shape))
    ba = fit_warp(grid, grid + rng.normal(0, 0.05, grid.shape))
    points_a, vectors_a = rng.uniform(0, 99, (14, 2)), rng.normal(size=(14, 8))
    points_b, vectors_b = rng.uniform(0, 99, (17, 2)), rng.normal(size=(17, 8))
    perm_a, perm_b = rng.permutation(14), rng.permutation(17)

    def summary(matches: MatchSet) -> list[tuple]:
        return sorted((m.a_xy, m.b_xy, m.score, m.ratio) for m in matches.pairs)

    a, b = descriptor_set("a", points_a, vectors_a), descriptor_set("b", points_b, vectors_b)
    original = match_images(a, b, ab, ba, params, (100, 100), (100, 100))
    shuffled = match_images(
        descriptor_set("a", points_a[perm_a], vectors_a[perm_a]),
        descriptor_set("b", points_b[perm_b], vectors_b[perm_b]),
        ab,
        ba,
        params,
        (100, 100),
        (100, 100),
    )
    for left, right in zip(summary(original), summary(shuffled), strict=True):
        assert left[:2] == right[:2]
        assert left[2:] == pytest.approx(right[2:], rel=1e-12)


def test_tied_candidates_go_to_the_lower_index():
    a = descriptor_set("a", [[50, 50]], [[1, 0, 0, 0]])
    b = descriptor_set("b", [[80, 20], [20, 80], [80, 20]], [[1, 0, 0, 0]] * 3)
    match = match_images(a, b, None, None, MatchParams()).pairs[0]
    assert match.b_idx == 0
    assert match.ratio == 1.0


def test_competitor_exactly_at_the_exclusion_radius_counts():
    a = descriptor_set("a", [[50, 50]], [[1, 0, 0, 0]])
    b = descriptor_set("b", [[40, 50], [50, 50]], [[1, 0, 0, 0], [1, 0, 0, 0]])
    match = match_images(a, b, None, None, MatchParams(min_second_nn_px=10.0)).pairs[0]
    assert match.b_idx == 0
    assert match.ratio == pytest.approx(1.0)
    assert not match.no_competitor

    closer = descriptor_set("b", [[40, 50], [49.5, 50]], [[1, 0, 0, 0], [1, 0, 0, 0]])
    assert match_images(a, closer, None, None, MatchParams(min_second_nn_px=10.0)).pairs[0].no_competitor


def test_zero_lambda_ignores_the_warps(rng):
    a = descriptor_set("a", rng.uniform(0, 50, (10, 2)), rng.normal(size=(10, 8)))
    b = descriptor_set("b", rng.uniform(0, 50, (12, 2)), rng.normal(size=(12, 8)))
    params = MatchParams(lam=0.0)
    with_warps = match_images(a, b, IDENTITY, IDENTITY, params)
    without = match_images(a, b, None, None, params)
    assert with_warps.pairs == without.pairs


def test_dimension_mismatch():
    a = descriptor_set("a", [[0, 0]], [[1, 0]])
    b = descriptor_set("b", [[0, 0]], [[1, 0, 0]])
    with pytest.raises(DimensionMismatch):
        match_images(a, b, None, None, MatchParams())


def test_threshold_keeps_everything_when_all_correct():
    matches = ranked([0.1, 0.2, 0.5, 0.9])
    assert threshold_at_precision(matches, [True] * 4) == 0.9


def test_threshold_stops_where_precision_falls_below_target():
    ratios = np.concatenate([np.linspace(0.03, 0.6, 20), np.linspace(0.65, 0.95, 5)])
    correct = [True] * 17 + [False] * 8
    cutoff = threshold_at_precision(ranked(ratios), correct, 0.85)
    assert cutoff == pytest.approx(0.6)
    assert len(apply_cutoff(ranked(ratios), cutoff)) == 20


def test_threshold_ends_at_the_first_drop_below_target():
    ratios = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    correct = [True, False, True, True, True, False, False, False]
    cutoff = threshold_at_precision(ranked(ratios), correct, 0.8)
    assert cutoff == pytest.approx(0.14)
    assert len(apply_cutoff(ranked(ratios), cutoff)) == 1


def test_threshold_waits_until_precision_first_reaches_target():
    ratios = np.linspace(0.1, 1.0, 10)
    correct = [False] + [True] * 9
    assert threshold_at_precision(ranked(ratios), correct, 0.85) == pytest.approx(1.0)


def test_unattainable_precision():
    correct = [False] * 3 + [True] * 7
    with pytest.raises(UnattainablePrecision):
        threshold_at_precision(ranked(np.linspace(0.1, 1.0, 10)), correct, 0.85)
    with pytest.raises(UnattainablePrecision):
        threshold_at_precision(ranked([]), [], 0.85)


def test_match_csv_round_trip(tmp_path):
    pairs = (
        Match(0, 3, (1.5, 2.0), (10.0, 11.0), 1.2, 0.1),
        Match(1, 4, (3.0, 4.0), (12.0, 13.5), 0.9, 0.0, True),
    )
    matches = MatchSet(pairs, MatchParams())
    path = write_match_csv(tmp_path / "a__b.csv", matches)
    restored = read_match_csv(path)
    assert [m.ratio for m in restored.pairs] == [0.0, 0.1]
    assert restored.pairs[0].no_competitor
    assert restored.pairs[1] == pairs[0]
    assert path.read_text().splitlines()[0] == "a_idx,b_idx,a_x,a_y,b_x,b_y,score,ratio,flags"
    assert FLAG_NO_COMPETITOR in path.read_text()


def test_external_csv_ranked_by_cost(tmp_path):
    path = tmp_path / "external.csv"
    path.write_text("a_x,a_y,b_x,b_y,cost\n1,1,2,2,5.0\n3,3,4,4,0.5\n")
    matches = read_match_csv(path)
    assert matches.ranked_by == "cost"
    assert [m.a_xy for m in matches.pairs] == [(3.0, 3.0), (1.0, 1.0)]
