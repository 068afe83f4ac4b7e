"""
Dataset manifests.

A manifest is a JSON-lines file, one image per line:

    {"image_id": "a01", "image_path": "images/a01.png", "mask_path": "masks/a01.png",
     "group_label": "toy_a", "parts": {"beak": [x, y, true], ...}}

Paths are relative to the manifest's directory. Parts are optional; each is
(x, y, visible) in pixels.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from descriptors import KeypointSet
from errors import DatasetError, DegenerateContour
from exemplar import Silhouette
from imaging import load_image, load_mask, resize_shortest_side

logger = logging.getLogger(__name__)


class ManifestRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_id: Annotated[str, Field(description="Unique image id.", min_length=1)]
    image_path: Annotated[str, Field(description="PNG or JPEG, relative to the manifest.")]
    mask_path: Annotated[str, Field(description="8-bit foreground mask PNG, relative to the manifest.")]
    group_label: Annotated[str, Field(description="Category or group of the image.")] = ""
    parts: Annotated[
        dict[str, tuple[float, float, bool]] | None, Field(description="Named part keypoints (x, y, visible).")
    ] = None


@dataclass(frozen=True, eq=False)
class Sample:
    """One loaded image with its mask and parts, after the optional resize."""

    image_id: str
    group_label: str
    image: np.ndarray
    silhouette: Silhouette
    parts: KeypointSet | None

    @property
    def mask(self) -> np.ndarray:
        return self.silhouette.mask

    @property
    def size(self) -> tuple[int, int]:
        """(width, height)."""
        return self.image.shape[1], self.image.shape[0]


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple[ManifestRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def record(self, image_id: str) -> ManifestRecord:
        for record in self.records:
            if record.image_id == image_id:
                return record
        raise DatasetError(f"image {image_id!r} is not in the manifest")

    def groups(self) -> dict[str, str]:
        return {r.image_id: r.group_label for r in self.records}

    def load(self, image_id: str, image_side: int | None = None) -> Sample:
        record = self.record(image_id)
        try:
            image = load_image(self.root / record.image_path)
            mask = load_mask(self.root / record.mask_path)
        except OSError as exc:
            raise DatasetError(f"record {image_id!r}: {exc}") from exc
        if mask.shape != image.shape[:2]:
            raise DatasetError(f"record {image_id!r}: mask {mask.shape} does not match image {image.shape[:2]}")

        scale = 1.0
        if image_side is not None:
            width = mask.shape[1]
            image = resize_shortest_side(image, image_side)
            mask = resize_shortest_side(mask, image_side, mask=True)
            scale = image.shape[1] / width
            if not mask.any():
                raise DatasetError(f"record {image_id!r}: mask is empty after resizing")

        parts = None
        if record.parts is not None:
            names = tuple(record.parts)
            points = np.array([[v[0], v[1]] for v in record.parts.values()], dtype=np.float64).reshape(-1, 2) * scale
            visible = np.array([bool(v[2]) for v in record.parts.values()], dtype=bool)
            parts = KeypointSet(image_id, points, visible, names)
        try:
            silhouette = Silhouette.from_mask(mask)
        except DegenerateContour as exc:
            raise DatasetError(f"record {image_id!r}: {exc}") from exc
        return Sample(image_id, record.group_label, image, silhouette, parts)


def load_manifest(path: Path) -> DatasetManifest:
    """Parse and validate a manifest; every error names the offending line or record."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc

    records = []
    seen: set[str] = set()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = ManifestRecord.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as exc:
            raise DatasetError(f"{path}:{number}: invalid record: {exc}") from exc
        if record.image_id in seen:
            raise DatasetError(f"{path}:{number}: duplicate image id {record.image_id!r}")
        seen.add(record.image_id)
        for label, relative in (("image", record.image_path), ("mask", record.mask_path)):
            if not (path.parent / relative).is_file():
                raise DatasetError(f"record {record.image_id!r}: {label} file {relative} does not exist")
        records.append(record)
    logger.info("manifest %s: %d records", path, len(records))
    return DatasetManifest(path.parent, tuple(records))
