import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.stats import spearmanr

from errors import EmptyTracks, InsufficientData
from propagate import TrackSet
from reconstruct import build_measurement_matrix, factorize_rigid, procrustes_rmse, xy_snap


def random_views(rng: np.random.Generator, frames: int) -> np.ndarray:
    return Rotation.from_quat(rng.normal(size=(frames, 4))).as_matrix()


def observe(shape: np.ndarray, rotations: np.ndarray, rng: np.random.Generator, missing: float = 0.0) -> TrackSet:
    """Orthographic views of shape; frame 0 is the target and sees every point."""
    tracks = TrackSet("f00")
    for p in range(len(shape)):
        tracks.tracks[p] = {}
        tracks.path_costs[p] = {}
    for f, rotation in enumerate(rotations):
        image = f"f{f:02d}"
        projected = shape @ rotation[:2].T + rng.uniform(50, 150, 2)
        for p, (x, y) in enumerate(projected):
            if f > 0 and rng.uniform() < missing:
                continue
            tracks.tracks[p][image] = (float(x), float(y))
            tracks.path_costs[p][image] = 0.0
    return tracks


@pytest.fixture
def scene(rng):
    shape = rng.uniform(-30, 30, (30, 3))
    return shape, random_views(rng, 12)


def test_full_observation_is_centered(scene, rng):
    shape, rotations = scene
    m = build_measurement_matrix(observe(shape, rotations, rng))
    assert m.mask.all()
    assert m.w.shape == (24, 30)
    assert m.frame_ids[0] == "f00" and m.target_frame == 0
    np.testing.assert_allclose(m.w.mean(axis=1), 0.0, atol=1e-10)


def test_rarely_seen_tracks_are_dropped():
    tracks = TrackSet("t")
    for p in range(5):
        tracks.tracks[p] = {"t": (float(p), 0.0)}
        tracks.path_costs[p] = {"t": 0.0}
        if p > 0:
            for f in range(1, 20):
                tracks.tracks[p][f"v{f}"] = (float(p), float(f))
                tracks.path_costs[p][f"v{f}"] = 0.1
    m = build_measurement_matrix(tracks, 0.10)
    assert m.track_ids == (1, 2, 3, 4)
    assert m.n_frames == 20


def test_centering_uses_observed_entries_only(scene, rng):
    shape, rotations = scene
    m = build_measurement_matrix(observe(shape, rotations, rng, missing=0.3))
    for row, seen in zip(m.w, m.mask):
        assert row[seen].mean() == pytest.approx(0.0, abs=1e-10)
        assert np.all(row[~seen] == 0.0)


def test_noiseless_views_recover_the_shape(scene, rng):
    shape, rotations = scene
    recon = factorize_rigid(build_measurement_matrix(observe(shape, rotations, rng)))
    assert not recon.degenerate_rank
    assert recon.residual < 1e-6
    assert procrustes_rmse(recon.shape, shape) < 1e-6

    for r1, r2 in recon.rotations:
        assert np.linalg.norm(r1) == pytest.approx(np.linalg.norm(r2), abs=1e-3)
        assert abs(r1 @ r2) < 1e-3


def test_rotating_the_scene_only_rotates_the_result(scene, rng):
    shape, rotations = scene
    turned = shape @ Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix().T
    first = factorize_rigid(build_measurement_matrix(observe(shape, rotations, rng)))
    second = factorize_rigid(build_measurement_matrix(observe(turned, rotations, rng)))
    assert procrustes_rmse(first.shape, second.shape) < 1e-6


def test_missing_entries_are_tolerated(scene, rng):
    shape, rotations = scene
    m = build_measurement_matrix(observe(shape, rotations, rng, missing=0.3))
    assert not m.mask.all()
    recon = factorize_rigid(m, max_iters=2000, tol=1e-10)
    assert procrustes_rmse(recon.shape, shape) < 0.01
    history = np.array(recon.residual_history)
    assert history[-1] <= history[0]


def test_planar_shape_is_flagged_or_rejected(rng):
    flat = np.column_stack([rng.uniform(-30, 30, (20, 2)), np.zeros(20)])
    m = build_measurement_matrix(observe(flat, random_views(rng, 8), rng))
    try:
        recon = factorize_rigid(m)
    except InsufficientData:
        return
    assert recon.degenerate_rank


def test_xy_snap_keeps_the_target_observations(scene, rng):
    shape, rotations = scene
    tracks = observe(shape, rotations, rng)
    m = build_measurement_matrix(tracks)
    points = xy_snap(factorize_rigid(m), m)

    target = np.array([tracks.tracks[p]["f00"] for p in m.track_ids])
    assert np.array_equal(points[:, :2], target)

    true_depth = shape[list(m.track_ids)] @ rotations[0][2]
    rho, _ = spearmanr(points[:, 2], true_depth)
    assert abs(rho) > 0.95


def test_too_few_frames():
    tracks = TrackSet("t")
    for p in range(6):
        tracks.tracks[p] = {"t": (float(p), 0.0), "u": (float(p), 1.0)}
        tracks.path_costs[p] = {"t": 0.0, "u": 0.1}
    with pytest.raises(InsufficientData):
        factorize_rigid(build_measurement_matrix(tracks))


def test_empty_tracks():
    with pytest.raises(EmptyTracks):
        build_measurement_matrix(TrackSet("t"))
