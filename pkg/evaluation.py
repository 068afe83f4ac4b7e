"""
PCK, precision-recall and pseudo ground truth.

A predicted match is correct when its target lies strictly within alpha * L of
the ground-truth target of the same source point, L being the mean diagonal of
the two images. Recall always divides by the number of ground-truth source
points, so the last recall of a PR curve is exactly the PCK.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from artifacts import read_csv, write_csv
from descriptors import KeypointSet
from errors import DatasetError, DegenerateTriangulation, SingularSystem
from matcher import ImageSize, MatchSet, apply_cutoff
from tps import build_system, fit_warp, to_normalized, warp_energy

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10)
SOURCE_TOLERANCE = 1e-6
EDGE_TOLERANCE = 1e-9


class Provenance(str, Enum):
    ANNOTATED = "annotated"
    PSEUDO = "pseudo"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True, eq=False)
class GroundTruthMatches:
    source: np.ndarray
    target: np.ndarray
    provenance: Provenance

    def __post_init__(self) -> None:
        source = np.asarray(self.source, dtype=np.float64).reshape(-1, 2)
        target = np.asarray(self.target, dtype=np.float64).reshape(-1, 2)
        if source.shape != target.shape:
            raise ValueError("ground truth sources and targets differ in count")
        if not (np.all(np.isfinite(source)) and np.all(np.isfinite(target))):
            raise ValueError("ground truth contains non-finite points")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)

    def __len__(self) -> int:
        return len(self.source)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.source, self.target))

    @classmethod
    def merge(cls, first: "GroundTruthMatches", *others: "GroundTruthMatches") -> "GroundTruthMatches":
        """Concatenate, keeping the first entry for any repeated source point."""
        source = np.vstack([first.source, *(o.source for o in others)])
        target = np.vstack([first.target, *(o.target for o in others)])
        _, keep = np.unique(np.round(source / SOURCE_TOLERANCE), axis=0, return_index=True)
        keep = np.sort(keep)
        return cls(source[keep], target[keep], first.provenance)


@dataclass(frozen=True)
class PrCurve:
    points: tuple[tuple[float, float], ...]
    ap: float
    alpha: float

    @property
    def final_recall(self) -> float:
        return self.points[-1][0] if self.points else 0.0


def mean_diagonal(size_a: ImageSize, size_b: ImageSize) -> float:
    return 0.5 * (float(np.hypot(*size_a)) + float(np.hypot(*size_b)))


def label_matches(matches: MatchSet, gt: GroundTruthMatches, alpha: float, image_sizes: Sequence[ImageSize]) -> np.ndarray:
    """
    Per ranked match: 1 correct, 0 incorrect, -1 when its source point has no
    ground truth. Only the best-ranked match of a ground-truth point is judged;
    later matches from the same source are labeled -1 as well.
    """
    labels = np.full(len(matches), -1, dtype=int)
    if len(matches) == 0 or len(gt) == 0:
        return labels
    radius = alpha * mean_diagonal(*image_sizes)
    tree = cKDTree(gt.source)
    sources = np.array([m.a_xy for m in matches.pairs])
    distance, index = tree.query(sources, distance_upper_bound=SOURCE_TOLERANCE)
    found = np.isfinite(distance)
    _, first = np.unique(np.where(found, index, -1), return_index=True)
    found &= np.isin(np.arange(len(found)), first)
    predicted = np.array([m.b_xy for m in matches.pairs])
    error = np.full(len(matches), np.inf)
    error[found] = np.linalg.norm(predicted[found] - gt.target[index[found]], axis=1)
    labels[found] = (error[found] < radius).astype(int)
    return labels


def pck(matches: MatchSet, gt: GroundTruthMatches, alpha: float, image_sizes: Sequence[ImageSize]) -> float:
    """Fraction of ground-truth source points whose prediction is within alpha * L; missing predictions count wrong."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(gt) == 0:
        return 0.0
    correct = int(np.sum(label_matches(matches, gt, alpha, image_sizes) == 1))
    return correct / len(gt)


def pck_sweep(
    matches: MatchSet,
    gt: GroundTruthMatches,
    image_sizes: Sequence[ImageSize],
    alphas: Iterable[float] = DEFAULT_ALPHAS,
) -> list[tuple[float, float]]:
    return [(float(alpha), pck(matches, gt, alpha, image_sizes)) for alpha in alphas]


def pck_at_precision(
    matches: MatchSet,
    gt: GroundTruthMatches,
    alpha: float,
    image_sizes: Sequence[ImageSize],
    cutoff: float,
) -> float:
    """PCK counting only the matches that survive a ratio cutoff."""
    return pck(apply_cutoff(matches, cutoff), gt, alpha, image_sizes)


def pr_curve(matches: MatchSet, gt: GroundTruthMatches, alpha: float, image_sizes: Sequence[ImageSize]) -> PrCurve:
    """
    Walk the ranking; matches whose source has ground truth are true or false
    positives. AP is the trapezoidal area starting from recall 0 at the first
    precision.
    """
    labels = label_matches(matches, gt, alpha, image_sizes)
    labels = labels[labels >= 0]
    if len(labels) == 0 or len(gt) == 0:
        return PrCurve((), 0.0, alpha)
    tp = np.cumsum(labels)
    retrieved = np.arange(1, len(labels) + 1)
    precision = tp / retrieved
    recall = tp / len(gt)

    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    ap = float(np.sum(np.diff(r) * 0.5 * (p[1:] + p[:-1])))
    points = tuple((float(rc), float(pr)) for rc, pr in zip(recall, precision))
    return PrCurve(points, min(max(ap, 0.0), 1.0), alpha)


def labeled_correctness(matches: MatchSet, gt: GroundTruthMatches, alpha: float, image_sizes: Sequence[ImageSize]) -> list[bool]:
    """Correct/incorrect per ranked match, matches without ground truth counting as incorrect."""
    return [bool(label == 1) for label in label_matches(matches, gt, alpha, image_sizes)]


def annotated_ground_truth(parts_a: KeypointSet, parts_b: KeypointSet) -> GroundTruthMatches:
    shared = sorted(parts_a.visible_names() & parts_b.visible_names())
    source = np.array([parts_a.point(n) for n in shared]).reshape(-1, 2)
    target = np.array([parts_b.point(n) for n in shared]).reshape(-1, 2)
    return GroundTruthMatches(source, target, Provenance.ANNOTATED)


@dataclass(frozen=True, eq=False)
class _TriangleAssignment:
    keys: list[frozenset[str]]
    triangle: np.ndarray
    bary: np.ndarray


def _triangulate(parts: KeypointSet, shared: list[str]) -> tuple[Delaunay, list[list[str]]]:
    vertices = np.array([parts.point(n) for n in shared])
    try:
        tri = Delaunay(vertices)
    except QhullError as exc:
        raise DegenerateTriangulation(f"parts of {parts.image_id!r} cannot be triangulated: {exc}") from exc
    if len(tri.simplices) == 0:
        raise DegenerateTriangulation(f"parts of {parts.image_id!r} are collinear")
    labels = [[shared[v] for v in simplex] for simplex in tri.simplices]
    return tri, labels


def _assign(points: np.ndarray, tri: Delaunay, labels: list[list[str]]) -> _TriangleAssignment:
    """
    Lowest-index containing triangle for every point, and its barycentric
    coordinates ordered by the sorted part labels of the triangle.
    """
    n = len(points)
    transform = tri.transform
    delta = points[:, None, :] - transform[None, :, 2, :]
    b = np.einsum("sij,psj->psi", transform[:, :2, :], delta)
    coords = np.concatenate([b, 1.0 - b.sum(axis=2, keepdims=True)], axis=2)
    inside = np.all(coords >= -EDGE_TOLERANCE, axis=2)

    triangle = np.where(inside.any(axis=1), np.argmax(inside, axis=1), -1)
    bary = np.zeros((n, 3))
    for i in np.flatnonzero(triangle >= 0):
        s = triangle[i]
        order = np.argsort(labels[s])
        bary[i] = coords[i, s, order]
    keys = [frozenset(simplex) for simplex in labels]
    return _TriangleAssignment(keys, triangle, bary)


def expand_pseudo_gt(
    parts_a: KeypointSet,
    parts_b: KeypointSet,
    dense_a: KeypointSet,
    dense_b: KeypointSet,
    max_bary_dist: float = 0.1,
) -> GroundTruthMatches:
    """
    Dense correspondences induced by the parts visible in both images.

    Each image is triangulated on those parts on its own. A dense point of A is
    paired with the dense point of B in the triangle with the same part labels
    whose barycentric coordinates are nearest (ties to the lowest B index),
    provided the distance is below max_bary_dist.
    """
    shared = sorted(parts_a.visible_names() & parts_b.visible_names())
    if len(shared) < 3:
        raise DegenerateTriangulation(f"need 3 parts visible in both images, got {len(shared)}")
    tri_a, labels_a = _triangulate(parts_a, shared)
    tri_b, labels_b = _triangulate(parts_b, shared)
    assigned_a = _assign(dense_a.points, tri_a, labels_a)
    assigned_b = _assign(dense_b.points, tri_b, labels_b)

    members_b: dict[frozenset[str], np.ndarray] = {}
    for s, key in enumerate(assigned_b.keys):
        members_b[key] = np.flatnonzero(assigned_b.triangle == s)

    source, target = [], []
    for i in np.flatnonzero(assigned_a.triangle >= 0):
        candidates = members_b.get(assigned_a.keys[assigned_a.triangle[i]])
        if candidates is None or len(candidates) == 0:
            continue
        distance = np.linalg.norm(assigned_b.bary[candidates] - assigned_a.bary[i], axis=1)
        best = int(np.argmin(distance))
        if distance[best] < max_bary_dist:
            source.append(dense_a.points[i])
            target.append(dense_b.points[candidates[best]])
    logger.debug("pseudo ground truth %s -> %s: %d matches", parts_a.image_id, parts_b.image_id, len(source))
    return GroundTruthMatches(np.array(source).reshape(-1, 2), np.array(target).reshape(-1, 2), Provenance.PSEUDO)


def annotation_bending(parts_a: KeypointSet, parts_b: KeypointSet, size_a: ImageSize, size_b: ImageSize) -> float:
    """Bending energy of the TPS carrying the shared parts of A onto those of B (normalized coordinates)."""
    shared = sorted(parts_a.visible_names() & parts_b.visible_names())
    a = to_normalized(np.array([parts_a.point(n) for n in shared]).reshape(-1, 2), *size_a)
    b = to_normalized(np.array([parts_b.point(n) for n in shared]).reshape(-1, 2), *size_b)
    warp = fit_warp(a, b)
    return warp_energy(warp, build_system(a)).bending


def filter_test_pairs(
    pairs: Sequence[tuple[str, str]],
    parts: Mapping[str, KeypointSet],
    sizes: Mapping[str, ImageSize],
    min_shared_parts: int = 7,
    energy_percentile: float = 90.0,
    energies: Mapping[tuple[str, str], float] | None = None,
) -> list[tuple[str, str]]:
    """
    Drop pairs sharing fewer than min_shared_parts visible parts, then pairs
    whose annotation warp bends more than the energy_percentile of the rest.
    """
    occluded = 0
    candidates: list[tuple[tuple[str, str], float]] = []
    for a, b in pairs:
        if len(parts[a].visible_names() & parts[b].visible_names()) < min_shared_parts:
            occluded += 1
            continue
        try:
            energy = energies[(a, b)] if energies is not None else annotation_bending(parts[a], parts[b], sizes[a], sizes[b])
        except SingularSystem as exc:
            logger.warning("dropping test pair %s/%s: %s", a, b, exc)
            continue
        candidates.append(((a, b), energy))
    if not candidates:
        return []
    threshold = float(np.percentile([e for _, e in candidates], energy_percentile))
    kept = [pair for pair, energy in candidates if energy <= threshold]
    logger.info(
        "test pairs: %d in, %d occluded, %d above bending %.3g, %d kept",
        len(pairs),
        occluded,
        len(candidates) - len(kept),
        threshold,
        len(kept),
    )
    return kept


def evaluation_summary(
    matches: MatchSet,
    gt: GroundTruthMatches,
    image_sizes: Sequence[ImageSize],
    alpha: float = 0.05,
    cutoff: float | None = None,
) -> dict[str, Any]:
    curve = pr_curve(matches, gt, alpha, image_sizes)
    summary = {
        "ap": curve.ap,
        "pck@0.05": pck(matches, gt, 0.05, image_sizes),
        "pck@0.10": pck(matches, gt, 0.10, image_sizes),
        "n_gt": len(gt),
        "n_matches": len(matches),
        "ranked_by": matches.ranked_by,
        "provenance": gt.provenance.value,
    }
    if cutoff is not None:
        summary["pck_at_precision"] = pck_at_precision(matches, gt, alpha, image_sizes, cutoff)
        summary["ratio_cutoff"] = cutoff
    return summary


GT_CSV_COLUMNS = ("a_x", "a_y", "b_x", "b_y")


def write_ground_truth_csv(path: Path, gt: GroundTruthMatches) -> Path:
    return write_csv(path, GT_CSV_COLUMNS, (tuple(s) + tuple(t) for s, t in zip(gt.source, gt.target)))


def read_ground_truth_csv(path: Path, provenance: Provenance = Provenance.ANNOTATED) -> GroundTruthMatches:
    rows = read_csv(path)
    if rows and not set(GT_CSV_COLUMNS) <= set(rows[0]):
        raise DatasetError(f"{path}: ground truth CSV needs columns {', '.join(GT_CSV_COLUMNS)}")
    source = [(float(r["a_x"]), float(r["a_y"])) for r in rows]
    target = [(float(r["b_x"]), float(r["b_y"])) for r in rows]
    return GroundTruthMatches(np.array(source).reshape(-1, 2), np.array(target).reshape(-1, 2), provenance)
