"""
Keypoints and patch descriptors.

The built-in extractor is a gradient-orientation histogram over a radius-8
patch: 4 x 4 spatial cells of 8 orientation bins (128 dimensions), normalized,
clipped at 0.2 and renormalized. Descriptors computed elsewhere (for example
CNN features) can be imported through the WDSC binary format.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from artifacts import read_json, write_bytes, write_json
from errors import DatasetError, DimensionMismatch, OutOfBounds
from exemplar import Silhouette
from imaging import to_gray

logger = logging.getLogger(__name__)

WDSC_MAGIC = b"WDSC"
WDSC_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class KeypointSet:
    image_id: str
    points: np.ndarray
    visibility: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if len(points) != len(visibility):
            raise DimensionMismatch(f"{len(points)} points but {len(visibility)} visibility flags")
        if self.names is not None and len(self.names) != len(points):
            raise DimensionMismatch(f"{len(points)} points but {len(self.names)} names")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "visibility", visibility)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_points(cls, image_id: str, points: npt.ArrayLike, names: Sequence[str] | None = None) -> "KeypointSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(image_id, pts, np.ones(len(pts), dtype=bool), tuple(names) if names is not None else None)

    def visible(self) -> "KeypointSet":
        keep = np.flatnonzero(self.visibility)
        names = tuple(self.names[i] for i in keep) if self.names is not None else None
        return KeypointSet(self.image_id, self.points[keep], self.visibility[keep], names)

    def point(self, name: str) -> np.ndarray:
        if self.names is None or name not in self.names:
            raise KeyError(name)
        return self.points[self.names.index(name)]

    def visible_names(self) -> set[str]:
        if self.names is None:
            return set()
        return {name for name, seen in zip(self.names, self.visibility) if seen}


class PatchDescriptorConfig(BaseModel):
    """Parameters of the gradient-histogram extractor."""

    model_config = ConfigDict(frozen=True)

    radius: Annotated[int, Field(description="Patch half size in pixels.", ge=2)] = 8
    cells: Annotated[int, Field(description="Spatial cells per patch side.", ge=1)] = 4
    orientation_bins: Annotated[int, Field(description="Orientation bins per cell.", ge=1)] = 8
    clip: Annotated[float, Field(description="Per-entry clip after the first normalization.", gt=0, le=1)] = 0.2

    @property
    def dimension(self) -> int:
        return self.cells * self.cells * self.orientation_bins

    @property
    def descriptor_id(self) -> str:
        digest = hashlib.blake2b(self.model_dump_json().encode(), digest_size=4).hexdigest()
        return f"gradhist-{digest}"


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    keypoints: KeypointSet
    vectors: np.ndarray
    descriptor_id: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.keypoints):
            raise DimensionMismatch(f"{len(self.keypoints)} keypoints but vectors of shape {self.vectors.shape}")
        if len(self.vectors) and not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-6):
            raise ValueError("descriptor rows must be unit norm")

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


def _normalize_rows(hist: np.ndarray, clip: float) -> np.ndarray:
    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    empty = norms[:, 0] == 0
    out = np.divide(hist, norms, out=np.zeros_like(hist), where=norms > 0)
    out = np.minimum(out, clip)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    out = np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)
    # zero-gradient patches get the uniform unit vector
    out[empty] = 1.0 / np.sqrt(hist.shape[1])
    return out


def extract(
    image: np.ndarray,
    keypoints: KeypointSet,
    config: PatchDescriptorConfig | None = None,
) -> DescriptorSet:
    """Gradient-orientation histograms at every keypoint (rounded to the nearest pixel)."""
    config = config or PatchDescriptorConfig()
    gray = to_gray(image).astype(np.float64)
    height, width = gray.shape
    size = 2 * config.radius
    if height < size or width < size:
        raise OutOfBounds(f"image {width}x{height} is smaller than a {size}x{size} patch")

    points = keypoints.points
    if len(points) == 0:
        return DescriptorSet(keypoints, np.zeros((0, config.dimension)), config.descriptor_id)
    if np.any(points < -0.5) or np.any(points[:, 0] > width - 0.5) or np.any(points[:, 1] > height - 0.5):
        raise OutOfBounds(f"keypoints of {keypoints.image_id!r} fall outside the {width}x{height} image")

    pad = config.radius + 1
    padded = np.pad(gray, pad, mode="reflect")
    gy, gx = np.gradient(padded)
    magnitude = np.hypot(gx, gy)
    orientation = np.mod(np.arctan2(gy, gx), 2 * np.pi)

    offsets = np.arange(-config.radius, config.radius)
    cell_of = (offsets + config.radius) * config.cells // size
    ys = np.clip(np.rint(points[:, 1]).astype(int), 0, height - 1) + pad
    xs = np.clip(np.rint(points[:, 0]).astype(int), 0, width - 1) + pad
    rows = ys[:, None, None] + offsets[None, :, None]
    cols = xs[:, None, None] + offsets[None, None, :]

    sigma = config.radius
    weight = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2 + 1) / (2.0 * sigma**2))
    mag = magnitude[rows, cols] * weight[None]
    ori = np.minimum(
        (orientation[rows, cols] / (2 * np.pi / config.orientation_bins)).astype(int),
        config.orientation_bins - 1,
    )
    spatial = cell_of[:, None] * config.cells + cell_of[None, :]
    bins = spatial[None] * config.orientation_bins + ori

    m = len(points)
    hist = np.zeros((m, config.dimension))
    np.add.at(hist, (np.repeat(np.arange(m), size * size), bins.reshape(-1)), mag.reshape(-1))
    return DescriptorSet(keypoints, _normalize_rows(hist, config.clip), config.descriptor_id)


def appearance_distance(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Euclidean distance between two descriptor rows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def appearance_distances(a: DescriptorSet, b: DescriptorSet) -> np.ndarray:
    """(M_a, M_b) matrix of Euclidean descriptor distances."""
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"descriptor dimensions differ: {a.dimension} vs {b.dimension}")
    diff = a.vectors[:, None, :] - b.vectors[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def sample_foreground_grid(mask: Silhouette | np.ndarray, stride: int, image_id: str = "") -> KeypointSet:
    """Lattice points (0, stride, 2 * stride, ...) that land on foreground, row-major."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    mask = np.asarray(mask.mask if isinstance(mask, Silhouette) else mask, dtype=bool)
    ys, xs = np.mgrid[0 : mask.shape[0] : stride, 0 : mask.shape[1] : stride]
    keep = mask[ys, xs]
    points = np.column_stack([xs[keep], ys[keep]]).astype(np.float64)
    return KeypointSet(image_id, points, np.ones(len(points), dtype=bool))


def write_descriptors(path: Path, descriptors: DescriptorSet) -> Path:
    """WDSC binary (header + row-major float32) plus a JSON sidecar with the keypoints."""
    m, d = descriptors.vectors.shape
    payload = _HEADER.pack(WDSC_MAGIC, WDSC_VERSION, m, d) + descriptors.vectors.astype("<f4").tobytes()
    write_bytes(path, payload)
    keypoints = descriptors.keypoints
    write_json(
        Path(path).with_suffix(".json"),
        {
            "image_id": keypoints.image_id,
            "descriptor_id": descriptors.descriptor_id,
            "points": keypoints.points.tolist(),
            "visibility": keypoints.visibility.tolist(),
            "names": list(keypoints.names) if keypoints.names is not None else None,
        },
    )
    return Path(path)


def read_descriptors(path: Path) -> DescriptorSet:
    """Load a WDSC file and its sidecar; rows are renormalized after the float32 round trip."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetError(f"{path}: truncated descriptor file")
    magic, version, m, d = _HEADER.unpack_from(data)
    if magic != WDSC_MAGIC or version != WDSC_VERSION:
        raise DatasetError(f"{path}: not a WDSC v{WDSC_VERSION} file")
    body = data[_HEADER.size :]
    if len(body) != 4 * m * d:
        raise DatasetError(f"{path}: expected {m}x{d} float32 values")
    vectors = np.frombuffer(body, dtype="<f4").reshape(m, d).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    vectors = np.divide(vectors, norms, out=np.full_like(vectors, 1.0 / np.sqrt(max(d, 1))), where=norms > 0)

    sidecar = read_json(Path(path).with_suffix(".json"))
    names = sidecar.get("names")
    points = np.asarray(sidecar["points"], dtype=np.float64).reshape(-1, 2)
    visibility = np.asarray(sidecar.get("visibility", [True] * len(points)), dtype=bool)
    keypoints = KeypointSet(sidecar["image_id"], points, visibility, tuple(names) if names is not None else None)
    return DescriptorSet(keypoints, vectors, sidecar.get("descriptor_id", "imported"))
