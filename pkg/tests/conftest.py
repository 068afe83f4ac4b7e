from pathlib import Path

import numpy as np
import pytest

from descriptors import KeypointSet
from experiments import make_toy


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def disk(size: int = 64, radius: float = 20.0, center: tuple[float, float] | None = None) -> np.ndarray:
    cx, cy = center if center is not None else ((size - 1) / 2, (size - 1) / 2)
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2


@pytest.fixture
def disk_mask():
    return disk


@pytest.fixture
def make_parts():
    """KeypointSet factory from {name: (x, y, visible)}."""

    def build(image_id: str, parts: dict[str, tuple[float, float, bool]]) -> KeypointSet:
        names = tuple(parts)
        points = np.array([parts[n][:2] for n in names], dtype=np.float64)
        visible = np.array([parts[n][2] for n in names], dtype=bool)
        return KeypointSet(image_id, points, visible, names)

    return build


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> Path:
    """The rendered toy ellipsoid dataset, built once per session."""
    return make_toy(tmp_path_factory.mktemp("toy"), seed=0)
