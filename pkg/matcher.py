"""
Match scoring with an appearance term and a symmetric TPS spatial prior.

For a point u in image A and a candidate v in image B

    score(u, v) = exp(-d_f / sigma_f) + lambda * exp(-d_w / sigma_w)

where d_f is the descriptor distance and d_w the symmetric warp distance
computed in pixels. Each A point keeps its best candidate; matches are ranked
by the ratio between the best competitor at least min_second_nn_px away from
that candidate and the best score, smallest first.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Annotated, Any, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import cdist

from artifacts import read_csv, write_csv
from config import PipelineConfig
from descriptors import DescriptorSet, KeypointSet, appearance_distances
from errors import DatasetError, DimensionMismatch, UnattainablePrecision
from tps import TpsWarp, apply_warp, fit_grid_to_correspondences, fit_warp, to_normalized, to_pixels

logger = logging.getLogger(__name__)

ImageSize = tuple[int, int]

MATCH_CSV_COLUMNS = ("a_idx", "b_idx", "a_x", "a_y", "b_x", "b_y", "score", "ratio", "flags")
FLAG_NO_COMPETITOR = "no_competitor"


class MatchParams(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    sigma_f: Annotated[float, Field(description="Appearance bandwidth.", gt=0)] = 1.75
    sigma_w: Annotated[float, Field(description="Spatial bandwidth in pixels.", gt=0)] = 18.0
    lam: Annotated[float, Field(alias="lambda", description="Weight of the spatial term.", ge=0)] = 0.3
    min_second_nn_px: Annotated[float, Field(description="Competitor exclusion radius in pixels.", ge=0)] = 10.0
    precision_threshold: Annotated[float, Field(description="Target precision of the ratio cutoff.", ge=0, le=1)] = 0.85

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "MatchParams":
        return cls(
            sigma_f=config.sigma_f,
            sigma_w=config.sigma_w,
            lam=config.lam,
            min_second_nn_px=config.min_second_nn_px,
            precision_threshold=config.precision,
        )

    @property
    def max_score(self) -> float:
        return 1.0 + self.lam


@dataclass(frozen=True)
class Match:
    a_idx: int
    b_idx: int
    a_xy: tuple[float, float]
    b_xy: tuple[float, float]
    score: float
    ratio: float
    no_competitor: bool = False


@dataclass(frozen=True, eq=False)
class MatchSet:
    pairs: tuple[Match, ...]
    params: MatchParams
    warp_ab: TpsWarp | None = None
    warp_ba: TpsWarp | None = None
    image_a: str = ""
    image_b: str = ""
    ranked_by: str = "ratio"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([m.ratio for m in self.pairs], dtype=np.float64)

    @property
    def scores(self) -> np.ndarray:
        return np.array([m.score for m in self.pairs], dtype=np.float64)

    def head(self, count: int) -> "MatchSet":
        return replace(self, pairs=self.pairs[:count])


def _to_frame(points: np.ndarray, warp: TpsWarp, size_from: ImageSize | None, size_to: ImageSize | None) -> np.ndarray:
    if size_from is None or size_to is None:
        return apply_warp(warp, points)
    return to_pixels(apply_warp(warp, to_normalized(points, *size_from)), *size_to)


def warp_distances(
    points_a: npt.ArrayLike,
    points_b: npt.ArrayLike,
    warp_ab: TpsWarp,
    warp_ba: TpsWarp,
    size_a: ImageSize | None = None,
    size_b: ImageSize | None = None,
) -> np.ndarray:
    """
    (M_a, M_b) matrix of 0.5 * (|u - T_ab(v)| + |v - T_ba(u)|).

    T_ab takes B coordinates into A's frame and T_ba the reverse. With image
    sizes (width, height) the warps act on normalized coordinates and the
    distances are in pixels; without them points are fed to the warps as is.
    """
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    b_in_a = _to_frame(b, warp_ab, size_b, size_a)
    a_in_b = _to_frame(a, warp_ba, size_a, size_b)
    return 0.5 * (cdist(a, b_in_a) + cdist(a_in_b, b))


def warp_distance(
    u: npt.ArrayLike,
    v: npt.ArrayLike,
    warp_ab: TpsWarp,
    warp_ba: TpsWarp,
    size_a: ImageSize | None = None,
    size_b: ImageSize | None = None,
) -> float:
    return float(warp_distances([u], [v], warp_ab, warp_ba, size_a, size_b)[0, 0])


def match_score(d_f: npt.ArrayLike, d_w: npt.ArrayLike, params: MatchParams) -> np.ndarray | float:
    """exp(-d_f / sigma_f) + lambda * exp(-d_w / sigma_w); works elementwise on arrays."""
    score = np.exp(-np.asarray(d_f, dtype=np.float64) / params.sigma_f)
    if params.lam != 0:
        score = score + params.lam * np.exp(-np.asarray(d_w, dtype=np.float64) / params.sigma_w)
    return float(score) if np.ndim(score) == 0 else score


def score_matrix(
    desc_a: DescriptorSet,
    desc_b: DescriptorSet,
    params: MatchParams,
    warp_ab: TpsWarp | None = None,
    warp_ba: TpsWarp | None = None,
    size_a: ImageSize | None = None,
    size_b: ImageSize | None = None,
) -> np.ndarray:
    d_f = appearance_distances(desc_a, desc_b)
    if warp_ab is None or warp_ba is None or params.lam == 0:
        return np.exp(-d_f / params.sigma_f)
    d_w = warp_distances(desc_a.keypoints.points, desc_b.keypoints.points, warp_ab, warp_ba, size_a, size_b)
    return match_score(d_f, d_w, params)


def rank_matches(
    scores: np.ndarray,
    points_a: np.ndarray,
    points_b: np.ndarray,
    min_second_nn_px: float,
) -> list[Match]:
    """Best candidate per A point and its ratio, sorted ascending by ratio (stable)."""
    matches = []
    competitor_distance = cdist(points_b, points_b)
    for i, row in enumerate(scores):
        best = int(np.argmax(row))
        eligible = competitor_distance[best] >= min_second_nn_px
        eligible[best] = False
        if not eligible.any():
            ratio, isolated = 0.0, True
        else:
            second = float(row[eligible].max())
            ratio = second / float(row[best]) if row[best] > 0 else 1.0
            isolated = False
        matches.append(
            Match(
                i,
                best,
                (float(points_a[i, 0]), float(points_a[i, 1])),
                (float(points_b[best, 0]), float(points_b[best, 1])),
                float(row[best]),
                ratio,
                isolated,
            )
        )
    matches.sort(key=lambda m: m.ratio)
    return matches


def match_images(
    desc_a: DescriptorSet,
    desc_b: DescriptorSet,
    warp_ab: TpsWarp | None,
    warp_ba: TpsWarp | None,
    params: MatchParams,
    size_a: ImageSize | None = None,
    size_b: ImageSize | None = None,
) -> MatchSet:
    """Match every keypoint of A to B; the spatial term is dropped when either warp is missing."""
    if desc_a.dimension != desc_b.dimension:
        raise DimensionMismatch(f"descriptor dimensions differ: {desc_a.dimension} vs {desc_b.dimension}")
    image_a, image_b = desc_a.keypoints.image_id, desc_b.keypoints.image_id
    if len(desc_a.keypoints) == 0 or len(desc_b.keypoints) == 0:
        return MatchSet((), params, warp_ab, warp_ba, image_a, image_b)

    scores = score_matrix(desc_a, desc_b, params, warp_ab, warp_ba, size_a, size_b)
    pairs = rank_matches(scores, desc_a.keypoints.points, desc_b.keypoints.points, params.min_second_nn_px)
    return MatchSet(tuple(pairs), params, warp_ab, warp_ba, image_a, image_b)


def precision_curve(correct: Sequence[bool]) -> np.ndarray:
    hits = np.cumsum(np.asarray(correct, dtype=np.float64))
    return hits / np.arange(1, len(hits) + 1)


def threshold_at_precision(matches: MatchSet, correct: Sequence[bool], target: float | None = None) -> float:
    """
    Ratio at which the ranked precision first falls below `target`.

    `correct` labels each ranked match. Once precision has reached the target,
    the first rank where it drops under again ends the kept prefix; the cutoff
    is interpolated between the ratios on either side of that drop. Later
    recoveries above the target are ignored. If precision never drops back,
    every match is kept.
    """
    target = matches.params.precision_threshold if target is None else target
    if len(correct) != len(matches):
        raise DimensionMismatch(f"{len(matches)} matches but {len(correct)} labels")
    if len(matches) == 0:
        raise UnattainablePrecision("no matches to calibrate on")
    precision = precision_curve(correct)
    reached = np.flatnonzero(precision >= target)
    if len(reached) == 0:
        raise UnattainablePrecision(f"precision never reaches {target:.2f} (max {precision.max():.3f})")

    ratios = matches.ratios
    below = np.flatnonzero(precision[reached[0] :] < target)
    if len(below) == 0:
        return float(ratios[-1])
    drop = int(reached[0] + below[0])
    fraction = (precision[drop - 1] - target) / (precision[drop - 1] - precision[drop])
    return float(ratios[drop - 1] + fraction * (ratios[drop] - ratios[drop - 1]))


def apply_cutoff(matches: MatchSet, cutoff: float) -> MatchSet:
    return replace(matches, pairs=tuple(m for m in matches.pairs if m.ratio <= cutoff))


def supervised_prior(
    parts_a: KeypointSet, parts_b: KeypointSet, size_a: ImageSize, size_b: ImageSize
) -> tuple[TpsWarp, TpsWarp]:
    """Warps in both directions interpolating the parts visible in both images."""
    shared = sorted(parts_a.visible_names() & parts_b.visible_names())
    a = to_normalized(np.array([parts_a.point(n) for n in shared]).reshape(-1, 2), *size_a)
    b = to_normalized(np.array([parts_b.point(n) for n in shared]).reshape(-1, 2), *size_b)
    return fit_warp(b, a), fit_warp(a, b)


def fitted_prior(
    seeds: MatchSet,
    size_a: ImageSize,
    size_b: ImageSize,
    k: int = 10,
    iterations: int = 2000,
    bending_weight: float = 1e-3,
) -> tuple[TpsWarp, TpsWarp]:
    """Fit k x k grids in both directions to seed matches (usually the most distinctive appearance matches)."""
    if len(seeds) < 3:
        raise DimensionMismatch(f"need at least 3 seed matches, got {len(seeds)}")
    a = to_normalized(np.array([m.a_xy for m in seeds.pairs]), *size_a)
    b = to_normalized(np.array([m.b_xy for m in seeds.pairs]), *size_b)
    ab = fit_grid_to_correspondences(b, a, k=k, iterations=iterations, bending_weight=bending_weight)
    ba = fit_grid_to_correspondences(a, b, k=k, iterations=iterations, bending_weight=bending_weight)
    return ab.grid.warp(), ba.grid.warp()


def write_match_csv(path: Path, matches: MatchSet) -> Path:
    rows = (
        (
            m.a_idx,
            m.b_idx,
            m.a_xy[0],
            m.a_xy[1],
            m.b_xy[0],
            m.b_xy[1],
            m.score,
            m.ratio,
            FLAG_NO_COMPETITOR if m.no_competitor else "",
        )
        for m in matches.pairs
    )
    return write_csv(path, MATCH_CSV_COLUMNS, rows)


def read_match_csv(path: Path, params: MatchParams | None = None, image_a: str = "", image_b: str = "") -> MatchSet:
    """
    Load a match CSV, ours or an external method's.

    External files may carry a `cost` column instead of `ratio`; matches are
    then ranked by ascending cost and `ranked_by` records the column used.
    """
    rows = read_csv(path)
    if not rows:
        return MatchSet((), params or MatchParams(), image_a=image_a, image_b=image_b)
    columns = rows[0].keys()
    rank_column = "ratio" if "ratio" in columns else "cost" if "cost" in columns else None
    required = {"a_x", "a_y", "b_x", "b_y"}
    if rank_column is None or not required <= set(columns):
        raise DatasetError(f"{path}: match CSV needs a_x, a_y, b_x, b_y and a ratio or cost column")

    pairs = []
    for index, row in enumerate(rows):
        pairs.append(
            Match(
                int(row.get("a_idx") or index),
                int(row.get("b_idx") or index),
                (float(row["a_x"]), float(row["a_y"])),
                (float(row["b_x"]), float(row["b_y"])),
                float(row.get("score") or math.nan),
                float(row[rank_column]),
                FLAG_NO_COMPETITOR in (row.get("flags") or ""),
            )
        )
    pairs.sort(key=lambda m: m.ratio)
    return MatchSet(tuple(pairs), params or MatchParams(), image_a=image_a, image_b=image_b, ranked_by=rank_column)


def summarize(matches: MatchSet) -> dict[str, Any]:
    return {
        "image_a": matches.image_a,
        "image_b": matches.image_b,
        "n_matches": len(matches),
        "ranked_by": matches.ranked_by,
        "spatial_prior": matches.warp_ab is not None and matches.params.lam > 0,
    }
