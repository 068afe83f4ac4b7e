import math

import numpy as np
import pytest

from descriptors import (
    WDSC_MAGIC,
    DescriptorSet,
    KeypointSet,
    PatchDescriptorConfig,
    appearance_distance,
    appearance_distances,
    extract,
    read_descriptors,
    sample_foreground_grid,
    write_descriptors,
)
from errors import DatasetError, DimensionMismatch, OutOfBounds


def keypoints(points, image_id="img") -> KeypointSet:
    return KeypointSet.from_points(image_id, points)


def test_constant_image_gives_uniform_vectors():
    image = np.full((32, 32, 3), 0.4, dtype=np.float32)
    descriptors = extract(image, keypoints([[16, 16], [5, 9]]))
    assert descriptors.dimension == 128
    np.testing.assert_allclose(descriptors.vectors, 1.0 / math.sqrt(128))


def test_extraction_is_deterministic_and_unit_norm(rng):
    image = rng.uniform(0, 1, (40, 40, 3)).astype(np.float32)
    kps = keypoints([[10, 10], [20, 25], [39, 0]])
    first, second = extract(image, kps), extract(image, kps)
    np.testing.assert_array_equal(first.vectors, second.vectors)
    np.testing.assert_allclose(np.linalg.norm(first.vectors, axis=1), 1.0)


def test_descriptor_is_not_rotation_invariant(rng):
    image = rng.uniform(0, 1, (41, 41)).astype(np.float32)
    rotated = np.rot90(image).copy()
    center = keypoints([[20, 20]])
    a, b = extract(image, center), extract(rotated, center)
    assert appearance_distance(a.vectors[0], b.vectors[0]) > 0


def test_appearance_distance_examples():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert appearance_distance(e1, e1) == 0.0
    assert appearance_distance(e1, e2) == pytest.approx(math.sqrt(2))
    assert appearance_distance(e1, -e1) == pytest.approx(2.0)
    with pytest.raises(DimensionMismatch):
        appearance_distance(e1, np.ones(3) / math.sqrt(3))


def test_distance_matrix_matches_pairwise(rng):
    image = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    a = extract(image, keypoints([[8, 8], [16, 16]]))
    b = extract(image, keypoints([[8, 8], [20, 12], [24, 24]]))
    matrix = appearance_distances(a, b)
    assert matrix.shape == (2, 3)
    assert matrix[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert matrix[1, 2] == pytest.approx(appearance_distance(a.vectors[1], b.vectors[2]))


def test_foreground_grid_counts():
    full = np.ones((32, 32), dtype=bool)
    assert len(sample_foreground_grid(full, 8)) == 16
    assert len(sample_foreground_grid(np.zeros((32, 32), dtype=bool), 8)) == 0
    half = np.zeros((32, 32), dtype=bool)
    half[:, :16] = True
    grid = sample_foreground_grid(half, 8)
    assert len(grid) == 8
    assert grid.points[:2].tolist() == [[0.0, 0.0], [8.0, 0.0]]


def test_out_of_bounds():
    image = np.zeros((32, 32), dtype=np.float32)
    with pytest.raises(OutOfBounds):
        extract(image, keypoints([[40, 3]]))
    with pytest.raises(OutOfBounds):
        extract(np.zeros((10, 10), dtype=np.float32), keypoints([[5, 5]]))


def test_empty_keypoints_give_empty_set():
    descriptors = extract(np.zeros((32, 32), dtype=np.float32), keypoints(np.zeros((0, 2))))
    assert descriptors.vectors.shape == (0, 128)


def test_config_changes_dimension_and_id():
    small = PatchDescriptorConfig(cells=2, orientation_bins=4)
    assert small.dimension == 16
    assert small.descriptor_id != PatchDescriptorConfig().descriptor_id
    descriptors = extract(np.random.default_rng(0).uniform(0, 1, (32, 32)), keypoints([[16, 16]]), small)
    assert descriptors.dimension == 16


def test_non_unit_rows_are_rejected():
    with pytest.raises(ValueError):
        DescriptorSet(keypoints([[0, 0]]), np.array([[2.0, 0.0]]), "raw")


def test_wdsc_round_trip(tmp_path, rng):
    image = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
    descriptors = extract(image, keypoints([[8, 8], [16, 20]], "bird"))
    path = write_descriptors(tmp_path / "bird.wdsc", descriptors)

    data = path.read_bytes()
    assert data[:4] == WDSC_MAGIC
    assert len(data) == 16 + 4 * 2 * 128
    assert (tmp_path / "bird.json").is_file()

    restored = read_descriptors(path)
    assert restored.keypoints.image_id == "bird"
    np.testing.assert_array_equal(restored.keypoints.points, descriptors.keypoints.points)
    np.testing.assert_allclose(restored.vectors, descriptors.vectors, atol=1e-6)


def test_corrupt_wdsc_is_a_dataset_error(tmp_path):
    path = tmp_path / "bad.wdsc"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DatasetError):
        read_descriptors(path)
