import json
from pathlib import Path

import numpy as np
import pytest

from artifacts import dumps_json, read_csv, read_ply, write_csv, write_json, write_ply
from dataset import load_manifest
from errors import DatasetError
from imaging import encode_png, load_image, load_mask, resize_shortest_side, sample_bilinear, to_gray


@pytest.fixture
def dataset_dir(tmp_path, disk_mask):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    image = np.zeros((64, 96, 3), dtype=np.float32)
    image[..., 0] = 1.0
    mask = np.zeros((64, 96), dtype=bool)
    mask[:, 16:80] = disk_mask(64, 20)
    (tmp_path / "images" / "a01.png").write_bytes(encode_png(image))
    (tmp_path / "masks" / "a01.png").write_bytes(encode_png(mask))
    return tmp_path


def write_manifest(directory: Path, *records) -> Path:
    path = directory / "manifest.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


RECORD = {
    "image_id": "a01",
    "image_path": "images/a01.png",
    "mask_path": "masks/a01.png",
    "group_label": "warbler_A",
    "parts": {"beak": [40.0, 20.0, True], "tail": [60.0, 50.0, False]},
}


def test_load_sample(dataset_dir):
    manifest = load_manifest(write_manifest(dataset_dir, RECORD))
    assert manifest.image_ids == ["a01"]
    assert manifest.groups() == {"a01": "warbler_A"}

    sample = manifest.load("a01")
    assert sample.size == (96, 64)
    assert sample.image[10, 10].tolist() == [1.0, 0.0, 0.0]
    assert sample.mask[32, 48] and not sample.mask[0, 0]
    assert sample.parts.visible_names() == {"beak"}


def test_resize_scales_parts(dataset_dir):
    sample = load_manifest(write_manifest(dataset_dir, RECORD)).load("a01", image_side=32)
    assert sample.size == (48, 32)
    np.testing.assert_allclose(sample.parts.point("beak"), [20.0, 10.0])


def test_manifest_errors(dataset_dir):
    with pytest.raises(DatasetError, match="does not exist"):
        load_manifest(write_manifest(dataset_dir, {**RECORD, "mask_path": "masks/missing.png"}))
    with pytest.raises(DatasetError, match="duplicate"):
        load_manifest(write_manifest(dataset_dir, RECORD, RECORD))
    with pytest.raises(DatasetError, match=":1:"):
        load_manifest(write_manifest(dataset_dir, {"image_id": "a01"}))
    with pytest.raises(DatasetError):
        load_manifest(dataset_dir / "nowhere.jsonl")
    with pytest.raises(DatasetError):
        load_manifest(write_manifest(dataset_dir, RECORD)).record("zz")


def test_mismatched_mask_is_rejected(dataset_dir):
    (dataset_dir / "masks" / "small.png").write_bytes(encode_png(np.ones((10, 10), dtype=bool)))
    manifest = load_manifest(write_manifest(dataset_dir, {**RECORD, "mask_path": "masks/small.png"}))
    with pytest.raises(DatasetError, match="does not match"):
        manifest.load("a01")


def test_png_round_trip(tmp_path, rng):
    image = np.round(rng.uniform(0, 1, (12, 10, 3)) * 255) / 255
    (tmp_path / "x.png").write_bytes(encode_png(image))
    np.testing.assert_allclose(load_image(tmp_path / "x.png"), image, atol=1e-6)
    mask = rng.uniform(size=(12, 10)) > 0.5
    (tmp_path / "m.png").write_bytes(encode_png(mask))
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), mask)


def test_raster_helpers():
    image = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_allclose(sample_bilinear(image, np.array([[1.5, 1.0], [10.0, 10.0]]), fill=-1), [5.5, -1])
    assert to_gray(np.ones((2, 2, 3), dtype=np.float32)) == pytest.approx(np.ones((2, 2)), abs=1e-6)
    assert resize_shortest_side(np.zeros((20, 40, 3), dtype=np.float32), 10).shape == (10, 20, 3)


def test_artifact_writers(tmp_path):
    points = np.array([[1.5, 2.0, -0.25], [3.0, 4.0, 5.0]])
    path = write_ply(tmp_path / "points.ply", points, [7, 9])
    restored, ids = read_ply(path)
    np.testing.assert_array_equal(restored, points)
    assert ids == [7, 9]
    assert path.read_text().startswith("ply\nformat ascii 1.0\nelement vertex 2\n")

    write_csv(tmp_path / "t.csv", ("a", "b"), [(1, 0.1), (np.int64(2), np.float32(0.5))])
    assert read_csv(tmp_path / "t.csv") == [{"a": "1", "b": "0.1"}, {"a": "2", "b": "0.5"}]

    write_json(tmp_path / "x.json", {"b": np.arange(2), "a": np.float64(1.0)})
    assert (tmp_path / "x.json").read_text() == dumps_json({"a": 1.0, "b": [0, 1]})
    assert not list(tmp_path.glob(".*.tmp"))
