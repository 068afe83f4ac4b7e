"""
Pipeline configuration.

Every tunable of the toolkit lives on one frozen PipelineConfig. Values are
resolved in this order, later sources winning:

- built-in defaults (the published hyperparameters)
- a TOML file passed with --config
- WARPMATCH_<FIELD> environment variables, loaded from .env when present
- repeated --set key=value flags

The resolved config is echoed as JSON next to every output.
"""

import hashlib
import os
import tomllib
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Mapping, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import DatasetError

ENV_PREFIX = "WARPMATCH_"


class SubsetHeuristic(str, Enum):
    KEYWORD_GROUP = "keyword_group"
    NEIGHBOR_GROUPS = "neighbor_groups"
    EXPLICIT_LIST = "explicit_list"


class WarpMode(str, Enum):
    """Where the spatial prior of the matcher comes from."""

    APPEARANCE = "appearance"
    SUPERVISED = "supervised"
    FITTED = "fitted"
    GRID = "grid"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid", use_enum_values=False)

    seed: Annotated[int, Field(description="Master seed; per-stage seeds are derived from it.", ge=0)] = 0
    jobs: Annotated[int, Field(description="Worker threads for independent pairs/images.", ge=1)] = 1
    image_side: Annotated[
        int | None, Field(description="Resize so the shortest side has this many pixels (off when unset).", ge=16)
    ] = None

    # tps
    k_grid: Annotated[int, Field(description="Control grid side length K.", ge=2)] = 10
    bound: Annotated[float, Field(description="Allowed overshoot of deformed grid coordinates.", gt=0)] = 1.5
    condition_cap: Annotated[float, Field(description="Largest accepted condition number of L.", gt=1)] = 1e12
    grid_fit_iterations: Annotated[int, Field(description="Gradient steps when fitting a grid.", ge=1)] = 2000
    grid_fit_bending_weight: Annotated[
        float, Field(description="Bending-energy penalty used when fitting grids to noisy correspondences.", ge=0)
    ] = 1e-3

    # exemplar
    n_points: Annotated[int, Field(description="Correspondences sampled per artificial pair.", ge=1)] = 100
    m_copies: Annotated[int, Field(description="Artificial copies generated per image.", ge=1)] = 9
    percentile_lo: Annotated[float, Field(description="Lower energy percentile kept in the bank.", ge=0, le=100)] = 50
    percentile_hi: Annotated[float, Field(description="Upper energy percentile kept in the bank.", ge=0, le=100)] = 90
    shape_context_samples: Annotated[int, Field(description="Contour points per silhouette.", ge=3)] = 100
    chromatic: Annotated[bool, Field(description="Apply per-channel chromatic jitter to artificial pairs.")] = True

    # descriptors / posegraph
    stride: Annotated[int, Field(description="Foreground keypoint lattice stride in pixels.", ge=1)] = 8
    pose_graph_k: Annotated[int, Field(description="Neighbours per node in the pose graph.", ge=1)] = 5
    hop_limit_eval: Annotated[int, Field(description="Test pairs are at most this many hops apart.", ge=1)] = 3
    hop_limit_reconstruct: Annotated[
        int, Field(description="Reconstruction pairs are strictly fewer hops apart than this.", ge=2)
    ] = 4

    # matcher
    sigma_f: Annotated[float, Field(description="Appearance bandwidth of the match score.", gt=0)] = 1.75
    sigma_w: Annotated[float, Field(description="Spatial bandwidth of the match score (pixels).", gt=0)] = 18.0
    lam: Annotated[float, Field(alias="lambda", description="Weight of the spatial term.", ge=0)] = 0.3
    min_second_nn_px: Annotated[
        float, Field(description="Second nearest neighbour must be at least this far from the best match.", ge=0)
    ] = 10.0
    precision: Annotated[float, Field(description="Target precision for the ratio cutoff.", gt=0, le=1)] = 0.85
    ratio_cutoff: Annotated[
        float | None, Field(description="Fixed ratio cutoff; calibrated on artificial pairs when unset.", gt=0)
    ] = None
    warp_mode: Annotated[WarpMode, Field(description="Source of the spatial prior.")] = WarpMode.FITTED
    seed_matches: Annotated[int, Field(description="Seed matches used to fit a grid in fitted mode.", ge=3)] = 30

    # eval
    alpha: Annotated[float, Field(description="PCK radius as a fraction of the mean image diagonal.", gt=0)] = 0.05
    max_bary_dist: Annotated[float, Field(description="Pseudo ground truth acceptance radius.", gt=0)] = 0.1
    min_shared_parts: Annotated[int, Field(description="Test pairs need this many mutually visible parts.", ge=3)] = 7
    energy_percentile: Annotated[
        float, Field(description="Test pairs above this bending-energy percentile are dropped.", ge=0, le=100)
    ] = 90

    # propagate
    min_pair_matches: Annotated[int, Field(description="Pairs with fewer surviving matches are ignored.", ge=0)] = 50
    path_cost_max: Annotated[float, Field(description="Longest accepted propagation path cost.", ge=0)] = 0.4
    min_image_matches: Annotated[int, Field(description="Images with fewer track points are pruned.", ge=0)] = 30
    subset_heuristic: Annotated[SubsetHeuristic, Field(description="How reconstruction images are chosen.")] = (
        SubsetHeuristic.KEYWORD_GROUP
    )
    subset_keyword: Annotated[str | None, Field(description="Keyword for the keyword_group heuristic.")] = None
    group_adjacency: Annotated[str | None, Field(description="Group-similarity JSON for neighbor_groups.")] = None
    explicit_images: Annotated[tuple[str, ...], Field(description="Image ids for explicit_list.")] = ()

    # reconstruct
    visibility_frac: Annotated[float, Field(description="Minimum fraction of frames observing a track.", gt=0, le=1)] = 0.10
    factorization_max_iters: Annotated[int, Field(description="Alternation iterations.", ge=1)] = 1000
    factorization_tol: Annotated[float, Field(description="Stop when the residual changes less than this.", gt=0)] = 1e-12

    @model_validator(mode="after")
    def _check_percentiles(self) -> "PipelineConfig":
        if self.percentile_lo > self.percentile_hi:
            raise ValueError("percentile_lo must not exceed percentile_hi")
        return self

    def to_json_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


def _parse_value(raw: str) -> Any:
    """Interpret a flag or environment value as a TOML scalar, falling back to the raw string."""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def _field_keys() -> dict[str, str]:
    keys = {}
    for name, info in PipelineConfig.model_fields.items():
        keys[name] = name
        if info.alias:
            keys[info.alias] = name
    return keys


def load_config(
    path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Resolve a PipelineConfig from defaults, a TOML file, the environment and key=value overrides."""
    keys = _field_keys()
    values: dict[str, Any] = {}

    if path is not None:
        try:
            with open(path, "rb") as handle:
                data = tomllib.load(handle)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise DatasetError(f"cannot read config {path}: {exc}") from exc
        for key, value in data.items():
            if key not in keys:
                raise DatasetError(f"unknown config key '{key}' in {path}")
            values[keys[key]] = value

    if environ is None:
        load_dotenv()
        environ = os.environ
    for key, name in keys.items():
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            values[name] = _parse_value(raw)

    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or key.strip() not in keys:
            raise DatasetError(f"bad override '{item}', expected key=value with a known key")
        values[keys[key.strip()]] = _parse_value(raw.strip())

    try:
        return PipelineConfig.model_validate(values)
    except ValidationError as exc:
        raise DatasetError(f"invalid configuration: {exc}") from exc


def derive_seed(master: int, stage: str, item: str = "") -> int:
    """Stable per-stage seed: BLAKE2b of (master, stage, item) folded to 63 bits."""
    digest = hashlib.blake2b(f"{master}:{stage}:{item}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1
