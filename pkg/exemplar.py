"""
Exemplar warps mined from silhouette pairs, and artificial pairs sampled from them.

Silhouettes of neighbouring images are put in correspondence with shape
context descriptors (log-polar histograms, chi-squared cost, Hungarian
assignment). Each set of contour correspondences is regularized onto a K x K
control grid; the resulting TPS warps are ranked by the mean of their bending
and affine energies and only a percentile band is kept, which drops warps that
are either trivial or drastic. Artificial pairs apply a warp drawn from the bank
to an image and record exact correspondences for points sampled on the
foreground.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from errors import DegenerateContour, EmptyBank, SingularSystem
from imaging import warp_mask, warp_raster
from tps import (
    DEFAULT_BOUND,
    ControlGrid,
    Points,
    TpsWarp,
    WarpEnergy,
    apply_warp,
    build_system,
    fit_grid_to_correspondences,
    fit_warp,
    invert_warp,
    regular_grid,
    to_normalized,
    to_pixels,
    warp_energy,
)

logger = logging.getLogger(__name__)

# Moore neighbourhood as (dy, dx), clockwise starting west (image y grows downwards).
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_MOORE_INDEX = {offset: i for i, offset in enumerate(_MOORE)}

RADIAL_BINS = 5
ANGULAR_BINS = 12
R_INNER = 0.125
R_OUTER = 2.0


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected foreground component; ties go to the first in raster order."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def trace_contour(mask: np.ndarray) -> Points:
    """Moore-neighbour boundary of the largest component as closed (x, y) pixel polygon; holes are ignored."""
    region = largest_component(np.asarray(mask, dtype=bool))
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        raise DegenerateContour("mask has no foreground")
    height, width = region.shape
    start = (int(ys[0]), int(xs[0]))

    def step(current: tuple[int, int], back: int) -> tuple[tuple[int, int], int] | None:
        for i in range(1, 9):
            d = (back + i) % 8
            ny, nx = current[0] + _MOORE[d][0], current[1] + _MOORE[d][1]
            if 0 <= ny < height and 0 <= nx < width and region[ny, nx]:
                p = (back + i - 1) % 8
                prev = (current[0] + _MOORE[p][0], current[1] + _MOORE[p][1])
                return (ny, nx), _MOORE_INDEX[(prev[0] - ny, prev[1] - nx)]
        return None

    # The start pixel is the first in raster order, so its west neighbour is background.
    first = step(start, 0)
    if first is None:
        return np.array([[start[1], start[0]]], dtype=np.float64)

    contour = [start]
    current, back = first
    for _ in range(4 * height * width + 8):
        if current == start:
            following = step(current, back)
            if following is not None and following[0] == first[0]:
                break
        contour.append(current)
        current, back = step(current, back)
    return np.array([[x, y] for y, x in contour], dtype=np.float64)


def resample_contour(contour: Points, samples: int) -> Points:
    """`samples` points equally spaced by arc length along the closed polygon."""
    closed = np.vstack([contour, contour[:1]])
    lengths = np.hypot(*np.diff(closed, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(lengths)])
    if arc[-1] == 0:
        raise DegenerateContour("contour has zero length")
    t = np.arange(samples) * arc[-1] / samples
    return np.column_stack([np.interp(t, arc, closed[:, 0]), np.interp(t, arc, closed[:, 1])])


@dataclass(frozen=True, eq=False)
class Silhouette:
    mask: np.ndarray
    contour: Points

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "Silhouette":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DegenerateContour("mask has no foreground")
        return cls(mask, trace_contour(mask))


def shape_context(points: Points) -> np.ndarray:
    """Normalized 5 x 12 log-polar histograms (flattened to 60 bins), one row per point."""
    n = len(points)
    distance = cdist(points, points)
    off_diagonal = ~np.eye(n, dtype=bool)
    mean_distance = distance[off_diagonal].mean() if n > 1 else 1.0
    radius = distance / (mean_distance if mean_distance > 0 else 1.0)

    edges = np.logspace(math.log10(R_INNER), math.log10(R_OUTER), RADIAL_BINS + 1)
    radial = np.clip(np.searchsorted(edges, radius, side="right") - 1, 0, None)

    delta = points[None, :, :] - points[:, None, :]
    theta = np.mod(np.arctan2(delta[..., 1], delta[..., 0]), 2 * np.pi)
    angular = np.minimum((theta / (2 * np.pi / ANGULAR_BINS)).astype(int), ANGULAR_BINS - 1)

    valid = off_diagonal & (radius < R_OUTER)
    rows, cols = np.nonzero(valid)
    bins = radial[rows, cols] * ANGULAR_BINS + angular[rows, cols]
    histogram = np.zeros((n, RADIAL_BINS * ANGULAR_BINS))
    np.add.at(histogram, (rows, bins), 1.0)
    return histogram / max(n - 1, 1)


def chi2_cost(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """Pairwise chi-squared cost between two sets of histograms."""
    a = h1[:, None, :]
    b = h2[None, :, :]
    total = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(total > 0, (a - b) ** 2 / total, 0.0)
    return 0.5 * terms.sum(axis=2)


@dataclass(frozen=True)
class ContourCorrespondence:
    source: Points
    target: Points
    cost: float

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.source, self.target))


def silhouette_correspondences(a: Silhouette, b: Silhouette, samples: int = 100) -> ContourCorrespondence:
    """One-to-one contour correspondences minimizing the total chi-squared shape-context cost."""
    for name, silhouette in (("a", a), ("b", b)):
        if len(silhouette.contour) < samples:
            raise DegenerateContour(
                f"contour of silhouette {name} has {len(silhouette.contour)} points, fewer than {samples}"
            )
    points_a = resample_contour(a.contour, samples)
    points_b = resample_contour(b.contour, samples)
    cost = chi2_cost(shape_context(points_a), shape_context(points_b))
    rows, cols = linear_sum_assignment(cost)
    return ContourCorrespondence(points_a[rows], points_b[cols], float(cost[rows, cols].sum()))


@dataclass(frozen=True)
class ExemplarWarpBank:
    warps: tuple[tuple[TpsWarp, WarpEnergy], ...]
    percentile_lo: float = 0.0
    percentile_hi: float = 100.0

    def __len__(self) -> int:
        return len(self.warps)

    def to_json(self) -> dict[str, Any]:
        return {
            "percentile_lo": self.percentile_lo,
            "percentile_hi": self.percentile_hi,
            "warps": [
                {"warp": warp.to_json(), "bending": energy.bending, "affine": energy.affine}
                for warp, energy in self.warps
            ],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "ExemplarWarpBank":
        warps = tuple(
            (TpsWarp.from_json(item["warp"]), WarpEnergy(float(item["bending"]), float(item["affine"])))
            for item in data["warps"]
        )
        return cls(warps, float(data["percentile_lo"]), float(data["percentile_hi"]))


def percentile_band(energies: Sequence[float], lo: float, hi: float) -> np.ndarray:
    """Indices of the energies whose stable-sorted rank falls in [lo, hi) percent of the count."""
    values = np.asarray(energies, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    start = int(round(lo / 100.0 * len(values)))
    stop = int(round(hi / 100.0 * len(values)))
    return np.sort(order[start:stop])


def mine_exemplar_bank(
    pairs: Sequence[tuple[Silhouette, Silhouette]],
    lo: float = 50.0,
    hi: float = 90.0,
    k: int = 10,
    samples: int = 100,
    iterations: int = 500,
    bending_weight: float = 1e-3,
    min_pairs: int = 10,
) -> ExemplarWarpBank:
    """Shape-context warps for every pair, regularized on a k x k grid and filtered to the [lo, hi] energy band."""
    if len(pairs) < min_pairs:
        raise EmptyBank(f"need at least {min_pairs} silhouette pairs to mine a bank, got {len(pairs)}")
    system = build_system(regular_grid(k))
    candidates: list[tuple[TpsWarp, WarpEnergy]] = []
    for index, (a, b) in enumerate(pairs):
        try:
            match = silhouette_correspondences(a, b, samples)
            source = to_normalized(match.source, a.width, a.height)
            target = to_normalized(match.target, b.width, b.height)
            fit = fit_grid_to_correspondences(source, target, k=k, iterations=iterations, bending_weight=bending_weight)
            warp = fit.grid.warp()
        except (SingularSystem, DegenerateContour) as exc:
            logger.warning("skipping silhouette pair %d: %s", index, exc)
            continue
        candidates.append((warp, warp_energy(warp, system)))

    keep = percentile_band([energy.mean_energy for _, energy in candidates], lo, hi)
    logger.info("mined %d warps, kept %d in the [%g, %g] percentile band", len(candidates), len(keep), lo, hi)
    return ExemplarWarpBank(tuple(candidates[i] for i in keep), lo, hi)


def random_affine_bank(
    count: int,
    rng: np.random.Generator,
    k: int = 10,
    max_rotation: float = 0.35,
    scale_range: tuple[float, float] = (0.85, 1.15),
    max_shear: float = 0.15,
    max_shift: float = 0.1,
) -> ExemplarWarpBank:
    """Bank of purely affine grid warps, the baseline family of artificial transformations."""
    lattice = regular_grid(k)
    system = build_system(lattice)
    warps = []
    while len(warps) < count:
        angle = rng.uniform(-max_rotation, max_rotation)
        rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        scale = np.diag(rng.uniform(*scale_range, size=2))
        shear = np.array([[1.0, rng.uniform(-max_shear, max_shear)], [0.0, 1.0]])
        shift = rng.uniform(-max_shift, max_shift, size=2)
        target = lattice @ (rotation @ scale @ shear).T + shift
        if np.any(np.abs(target) > DEFAULT_BOUND):
            continue
        warp = ControlGrid.deformed(k, target).warp()
        warps.append((warp, warp_energy(warp, system)))
    return ExemplarWarpBank(tuple(warps))


def random_smooth_grid(k: int, amplitude: float, rng: np.random.Generator, coarse: int = 3) -> ControlGrid:
    """A k x k grid displaced by a low-frequency random field (a coarse TPS resampled on the lattice)."""
    coarse_lattice = regular_grid(coarse)
    displaced = coarse_lattice + rng.normal(0.0, amplitude, coarse_lattice.shape)
    target = apply_warp(fit_warp(coarse_lattice, displaced), regular_grid(k))
    return ControlGrid.deformed(k, np.clip(target, -DEFAULT_BOUND, DEFAULT_BOUND))


def stratified_foreground_sample(mask: np.ndarray, n: int, rng: np.random.Generator) -> Points:
    """
    n foreground pixels: the foreground bounding box is cut into ceil(sqrt(n))^2 cells,
    one pixel is drawn from each non-empty cell and the remainder uniformly.
    """
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise DegenerateContour("cannot sample an empty foreground")
    cells = math.ceil(math.sqrt(n))
    x0, y0 = xs.min(), ys.min()
    span_x, span_y = xs.max() + 1 - x0, ys.max() + 1 - y0
    cell_id = ((ys - y0) * cells // span_y) * cells + (xs - x0) * cells // span_x

    occupied = np.unique(cell_id)
    if len(occupied) > n:
        occupied = np.sort(rng.choice(occupied, size=n, replace=False))
    chosen = [int(rng.choice(np.flatnonzero(cell_id == cell))) for cell in occupied]

    remaining = n - len(chosen)
    if remaining > 0:
        pool = np.setdiff1d(np.arange(len(xs)), chosen)
        replace = len(pool) < remaining
        pool = np.arange(len(xs)) if replace else pool
        chosen.extend(int(i) for i in rng.choice(pool, size=remaining, replace=replace))
    index = np.asarray(chosen)
    return np.column_stack([xs[index], ys[index]]).astype(np.float64)


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    original_id: str
    warped_image: np.ndarray
    warped_mask: np.ndarray
    source_points: Points
    target_points: Points
    applied_warp: TpsWarp
    chromatic_params: np.ndarray
    warp_index: int

    @property
    def correspondences(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.source_points, self.target_points))


def generate_pair(
    image: np.ndarray,
    mask: Silhouette | np.ndarray,
    bank: ExemplarWarpBank,
    n: int = 100,
    chromatic: bool = True,
    rng_seed: int = 0,
    original_id: str = "",
) -> SyntheticPair:
    """Warp `image` with a bank warp drawn uniformly (with replacement) and record n exact correspondences."""
    if len(bank) == 0:
        raise EmptyBank("exemplar bank is empty")
    if n < 1:
        raise ValueError("n must be at least 1")
    foreground = mask.mask if isinstance(mask, Silhouette) else np.asarray(mask, dtype=bool)
    rng = np.random.default_rng(rng_seed)
    height, width = image.shape[:2]

    index = int(rng.integers(len(bank)))
    warp = bank.warps[index][0]
    backward = invert_warp(warp)
    warped = warp_raster(image, backward)
    warped_fg = warp_mask(foreground, backward)

    source = stratified_foreground_sample(foreground, n, rng)
    target = to_pixels(apply_warp(warp, to_normalized(source, width, height)), width, height)

    channels = 1 if warped.ndim == 2 else warped.shape[2]
    if chromatic:
        params = np.column_stack([rng.uniform(0.8, 1.2, channels), rng.uniform(-0.1, 0.1, channels)])
        warped = np.clip(warped * params[:, 0].astype(np.float32) + params[:, 1].astype(np.float32), 0.0, 1.0)
    else:
        params = np.column_stack([np.ones(channels), np.zeros(channels)])
    return SyntheticPair(original_id, warped.astype(np.float32), warped_fg, source, target, warp, params, index)
