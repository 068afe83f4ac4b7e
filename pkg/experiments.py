"""
Seeded synthetic experiments and the bundled toy dataset.

- prior_vs_appearance: matching with the true warp as spatial prior against
  appearance alone, on foregrounds covered by a repeated texture.
- affine_vs_exemplar: spatial priors retrieved from an affine-only bank
  against priors retrieved from a bank mined from the silhouettes of a
  synthetic deformable category, scored by PCK at the calibrated precision
  cutoff.
- make_toy: a textured ellipsoid rendered orthographically under a yaw sweep,
  written as a manifest with part annotations and a config for `reconstruct`.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from artifacts import write_bytes, write_json, write_jsonl, write_text
from config import PipelineConfig, derive_seed
from dataset import Sample
from errors import UnattainablePrecision, WarpMatchError
from evaluation import label_matches, pck
from exemplar import ExemplarWarpBank, Silhouette, generate_pair, mine_exemplar_bank, random_affine_bank
from imaging import encode_png, warp_mask
from matcher import Match, MatchParams, MatchSet, match_images, threshold_at_precision, apply_cutoff
from pipeline import describe, smooth_bank, synthetic_ground_truth, true_prior, warped_sample
from tps import (
    DEFAULT_BOUND,
    ControlGrid,
    TpsWarp,
    apply_warp,
    build_system,
    fit_warp,
    invert_warp,
    regular_grid,
    to_normalized,
    to_pixels,
    warp_energy,
)

logger = logging.getLogger(__name__)

TEXTURE_PERIOD = 16


def ellipse_mask(width: int, height: int, fill: float = 0.7) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2, (height - 1) / 2
    rx, ry = fill * width / 2, fill * height / 2
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def textured_image(
    width: int, height: int, rng: np.random.Generator, period: int = TEXTURE_PERIOD, mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """RGB image whose foreground (an ellipse by default) tiles one random period x period patch; the background is flat gray."""
    tile = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (period, period, 3)), (1.0, 1.0, 0), mode="wrap")
    tile = (tile - tile.min()) / max(float(np.ptp(tile)), 1e-12)
    reps = (math.ceil(height / period), math.ceil(width / period), 1)
    image = np.tile(tile, reps)[:height, :width].astype(np.float32)
    mask = ellipse_mask(width, height) if mask is None else np.asarray(mask, dtype=bool)
    image[~mask] = 0.5
    return image, mask


def _synthetic_pair(
    config: PipelineConfig, bank: ExemplarWarpBank, seed: int, size: int, mask: np.ndarray | None = None
) -> tuple[Sample, Any]:
    rng = np.random.default_rng(seed)
    image, mask = textured_image(size, size, rng, mask=mask)
    sample = Sample(f"synthetic-{seed}", "", image, Silhouette.from_mask(mask), None)
    pair = generate_pair(image, sample.silhouette, bank, config.n_points, config.chromatic, seed, sample.image_id)
    return sample, pair


def prior_vs_appearance(n_pairs: int = 200, seed: int = 0, config: PipelineConfig | None = None, size: int = 96) -> dict[str, Any]:
    """Mean PCK@alpha with the true warp prior and with lambda = 0 on the same artificial pairs."""
    config = config or PipelineConfig()
    bank = smooth_bank(config.model_copy(update={"seed": derive_seed(seed, "prior-vs-appearance-bank")}))
    params = MatchParams.from_config(config)
    appearance_params = params.model_copy(update={"lam": 0.0})

    with_prior, without_prior = [], []
    for index in range(n_pairs):
        pair_seed = derive_seed(seed, "prior-vs-appearance", str(index))
        try:
            sample, pair = _synthetic_pair(config, bank, pair_seed, size)
            other = warped_sample(pair)
            desc_a, desc_b = describe(sample, config), describe(other, config)
        except WarpMatchError as exc:
            logger.warning("synthetic pair %d skipped: %s", index, exc)
            continue
        gt = synthetic_ground_truth(desc_a.keypoints.points, pair.applied_warp, sample.size)
        sizes = (sample.size, other.size)
        warp_ab, warp_ba = true_prior(pair)
        prior = match_images(desc_a, desc_b, warp_ab, warp_ba, params, sample.size, other.size)
        plain = match_images(desc_a, desc_b, None, None, appearance_params)
        with_prior.append(pck(prior, gt, config.alpha, sizes))
        without_prior.append(pck(plain, gt, config.alpha, sizes))

    result = {
        "pairs": len(with_prior),
        "alpha": config.alpha,
        "pck_prior": float(np.mean(with_prior)) if with_prior else 0.0,
        "pck_appearance": float(np.mean(without_prior)) if without_prior else 0.0,
    }
    result["margin"] = result["pck_prior"] - result["pck_appearance"]
    return result


def blob_mask(width: int, height: int) -> np.ndarray:
    """Asymmetric silhouette: an elliptical body joined by a round head at its upper right."""
    ys, xs = np.mgrid[0:height, 0:width]
    body = ((xs - 0.45 * width) / (0.3 * width)) ** 2 + ((ys - 0.58 * height) / (0.2 * height)) ** 2 <= 1.0
    head = (xs - 0.68 * width) ** 2 + (ys - 0.36 * height) ** 2 <= (0.13 * min(width, height)) ** 2
    return body | head


@dataclass(frozen=True)
class DeformationFamily:
    """
    Shape variation of one synthetic category. Each mode is a displacement of
    the coarse lattice with its affine part projected out and unit RMS length;
    an instance combines the modes with N(0, amplitude^2) weights.
    """

    modes: np.ndarray
    amplitude: float
    coarse: int = 3

    @classmethod
    def random(cls, rng: np.random.Generator, n_modes: int = 2, amplitude: float = 0.1, coarse: int = 3) -> "DeformationFamily":
        lattice = regular_grid(coarse)
        basis = np.column_stack([np.ones(len(lattice)), lattice])
        modes = []
        for _ in range(n_modes):
            field = rng.normal(size=lattice.shape)
            field -= basis @ np.linalg.lstsq(basis, field, rcond=None)[0]
            modes.append(field / math.sqrt(float(np.mean(np.sum(field * field, axis=1)))))
        return cls(np.array(modes), amplitude, coarse)

    def sample(self, rng: np.random.Generator, k: int) -> ControlGrid:
        lattice = regular_grid(self.coarse)
        weights = rng.normal(0.0, self.amplitude, len(self.modes))
        displaced = lattice + np.tensordot(weights, self.modes, axes=1)
        target = apply_warp(fit_warp(lattice, displaced), regular_grid(k))
        return ControlGrid.deformed(k, np.clip(target, -DEFAULT_BOUND, DEFAULT_BOUND))

    def bank(self, count: int, rng: np.random.Generator, k: int) -> ExemplarWarpBank:
        system = build_system(regular_grid(k))
        warps = []
        for _ in range(count):
            warp = self.sample(rng, k).warp()
            warps.append((warp, warp_energy(warp, system)))
        return ExemplarWarpBank(tuple(warps))


def mine_category_bank(
    family: DeformationFamily,
    count: int,
    seed: int,
    config: PipelineConfig,
    size: int,
    percentile_lo: float = 0.0,
    percentile_hi: float = 100.0,
) -> ExemplarWarpBank:
    """
    Exemplar bank mined from silhouettes alone: `count` category instances are
    rendered as masks and each is paired with the canonical silhouette.
    """
    rng = np.random.default_rng(seed)
    canonical = Silhouette.from_mask(blob_mask(size, size))
    pairs = []
    for _ in range(count):
        grid = family.sample(rng, config.k_grid)
        instance = warp_mask(canonical.mask, invert_warp(grid.warp()))
        pairs.append((canonical, Silhouette.from_mask(instance)))
    return mine_exemplar_bank(
        pairs,
        percentile_lo,
        percentile_hi,
        k=config.k_grid,
        samples=config.shape_context_samples,
        iterations=config.grid_fit_iterations,
        bending_weight=config.grid_fit_bending_weight,
        min_pairs=1,
    )


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def retrieve_bank_warp(bank: ExemplarWarpBank, mask_a: np.ndarray, mask_b: np.ndarray) -> TpsWarp:
    """Bank warp (A to B, normalized coordinates) that carries silhouette A closest to silhouette B by IoU."""
    overlaps = [silhouette_iou(warp_mask(mask_a, invert_warp(warp)), mask_b) for warp, _ in bank.warps]
    return bank.warps[int(np.argmax(overlaps))][0]


@dataclass(frozen=True)
class BankScore:
    name: str
    size: int
    ratio_cutoff: float | None
    pck_at_precision: float
    prior_error_px: float

    def to_json(self) -> dict[str, Any]:
        return {
            "warps": self.size,
            "ratio_cutoff": self.ratio_cutoff,
            "pck_at_precision": self.pck_at_precision,
            "prior_error_px": self.prior_error_px,
        }


def _score_bank(
    name: str,
    bank: ExemplarWarpBank,
    test_set: list[tuple[Sample, Sample, Any, Any, Any]],
    config: PipelineConfig,
) -> BankScore:
    params = MatchParams.from_config(config)
    evaluated = []
    errors = []
    labeled: list[tuple[Match, bool]] = []
    for sample, other, desc_a, desc_b, pair in test_set:
        warp = retrieve_bank_warp(bank, sample.mask, other.mask)
        matches = match_images(desc_a, desc_b, invert_warp(warp), warp, params, sample.size, other.size)
        gt = synthetic_ground_truth(desc_a.keypoints.points, pair.applied_warp, sample.size)
        predicted = to_pixels(apply_warp(warp, to_normalized(gt.source, *sample.size)), *other.size)
        errors.append(float(np.mean(np.linalg.norm(predicted - gt.target, axis=1))))
        sizes = (sample.size, other.size)
        evaluated.append((matches, gt, sizes))
        labels = label_matches(matches, gt, config.alpha, sizes)
        labeled.extend((m, bool(label == 1)) for m, label in zip(matches.pairs, labels))

    prior_error = float(np.mean(errors)) if errors else 0.0
    labeled.sort(key=lambda item: item[0].ratio)
    combined = MatchSet(tuple(m for m, _ in labeled), params)
    try:
        cutoff = threshold_at_precision(combined, [c for _, c in labeled], config.precision)
    except UnattainablePrecision as exc:
        logger.warning("%s bank: %s", name, exc)
        return BankScore(name, len(bank), None, 0.0, prior_error)
    scores = [pck(apply_cutoff(m, cutoff), gt, config.alpha, sizes) for m, gt, sizes in evaluated]
    return BankScore(name, len(bank), cutoff, float(np.mean(scores)) if scores else 0.0, prior_error)


def affine_vs_exemplar(
    n_pairs: int = 50,
    seed: int = 0,
    config: PipelineConfig | None = None,
    bank_size: int = 40,
    size: int = 96,
) -> dict[str, Any]:
    """
    PCK at the precision cutoff when the spatial prior is retrieved from an
    affine-only bank or from an exemplar bank mined from category silhouettes.

    A random deformation family stands in for the object category. The
    exemplar bank is mined by shape-context matching of instance silhouettes,
    never seeing the family itself; test pairs are fresh family instances over
    a repeated texture. Both banks are searched the same way, by silhouette
    overlap, and scored on the same pairs.
    """
    config = config or PipelineConfig()
    family = DeformationFamily.random(np.random.default_rng(derive_seed(seed, "ablation-family")))
    exemplar = mine_category_bank(family, bank_size, derive_seed(seed, "ablation-mining"), config, size)
    affine = random_affine_bank(bank_size, np.random.default_rng(derive_seed(seed, "ablation-affine-bank")), config.k_grid)
    test_bank = family.bank(n_pairs, np.random.default_rng(derive_seed(seed, "ablation-test-bank")), config.k_grid)

    test_set = []
    for index in range(n_pairs):
        pair_seed = derive_seed(seed, "ablation", str(index))
        single = ExemplarWarpBank((test_bank.warps[index],))
        try:
            sample, pair = _synthetic_pair(config, single, pair_seed, size, blob_mask(size, size))
            other = warped_sample(pair)
            test_set.append((sample, other, describe(sample, config), describe(other, config), pair))
        except WarpMatchError as exc:
            logger.warning("synthetic pair %d skipped: %s", index, exc)

    results = [_score_bank(name, bank, test_set, config) for name, bank in (("affine", affine), ("exemplar", exemplar))]
    for r in results:
        logger.info("%s bank: %d warps, prior error %.2f px", r.name, r.size, r.prior_error_px)
    return {
        "pairs": len(test_set),
        "alpha": config.alpha,
        "precision": config.precision,
        "banks": {r.name: r.to_json() for r in results},
        "exemplar_better": results[1].pck_at_precision > results[0].pck_at_precision,
    }


# ---------------------------------------------------------------------------
# toy dataset

TOY_SIZE = 128
TOY_VIEWS = 10
TOY_AXES = (40.0, 50.0, 30.0)
TOY_PARTS = 15


def _rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    about_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    about_x = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return about_x @ about_y


def _ellipsoid(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = TOY_AXES
    points = np.stack([a * np.sin(v) * np.cos(u), b * np.cos(v), c * np.sin(v) * np.sin(u)], axis=-1)
    normals = points / np.array([a * a, b * b, c * c])
    return points, normals


def _surface_texture(u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth periodic RGB texture over the (u, v) parametrization."""
    color = np.full(u.shape + (3,), 0.5)
    for channel in range(3):
        for _ in range(6):
            fu, fv = int(rng.integers(1, 7)), float(rng.uniform(1.0, 6.0))
            phase = rng.uniform(0.0, 2 * math.pi, 2)
            color[..., channel] += 0.08 * np.sin(fu * u + phase[0]) * np.cos(fv * v + phase[1])
    return np.clip(color, 0.0, 1.0)


def render_view(yaw: float, pitch: float, texture_seed: int, size: int = TOY_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Orthographic z-buffered splat of the textured ellipsoid; returns (RGB image, mask)."""
    u, v = np.meshgrid(np.linspace(0, 2 * math.pi, 720, endpoint=False), np.linspace(0.01, math.pi - 0.01, 360))
    points, _ = _ellipsoid(u.ravel(), v.ravel())
    colors = _surface_texture(u.ravel(), v.ravel(), np.random.default_rng(texture_seed))
    rotated = points @ _rotation(yaw, pitch).T

    center = (size - 1) / 2
    px = np.rint(center + rotated[:, 0]).astype(int)
    py = np.rint(center - rotated[:, 1]).astype(int)
    inside = (px >= 0) & (px < size) & (py >= 0) & (py < size)
    px, py, depth, colors = px[inside], py[inside], rotated[inside, 2], colors[inside]

    # nearest surface point wins each pixel
    order = np.argsort(-depth, kind="stable")
    linear = py[order] * size + px[order]
    _, first = np.unique(linear, return_index=True)
    chosen = order[first]

    image = np.full((size, size, 3), 0.15, dtype=np.float32)
    covered = np.zeros((size, size), dtype=bool)
    image[py[chosen], px[chosen]] = colors[chosen]
    covered[py[chosen], px[chosen]] = True

    mask = ndimage.binary_fill_holes(ndimage.binary_closing(covered, iterations=2))
    holes = mask & ~covered
    if holes.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
        image[holes] = image[iy[holes], ix[holes]]
    return image, mask


def toy_parts(yaw: float, pitch: float, size: int = TOY_SIZE) -> dict[str, tuple[float, float, bool]]:
    """Fixed surface landmarks projected into a view; visible when their normal faces the camera."""
    index = np.arange(TOY_PARTS)
    u = 2 * math.pi * ((index * 0.382) % 1.0)
    v = math.pi * (0.2 + 0.6 * ((index * 0.618) % 1.0))
    points, normals = _ellipsoid(u, v)
    rotation = _rotation(yaw, pitch)
    rotated, facing = points @ rotation.T, normals @ rotation.T
    center = (size - 1) / 2
    return {
        f"part{i:02d}": (float(center + rotated[i, 0]), float(center - rotated[i, 1]), bool(facing[i, 2] > 0))
        for i in range(TOY_PARTS)
    }


def toy_views(views: int = TOY_VIEWS) -> list[tuple[float, float]]:
    yaws = np.linspace(-math.radians(35), math.radians(35), views)
    return [(float(yaw), math.radians(8.0) * (1 if i % 2 else -1)) for i, yaw in enumerate(yaws)]


TOY_CONFIG = """\
# Thresholds lowered for 128 x 128 renders with few keypoints per image.
seed = {seed}
subset_heuristic = "keyword_group"
subset_keyword = "toy"
warp_mode = "fitted"
grid_fit_iterations = 300
seed_matches = 20
pose_graph_k = 3
ratio_cutoff = 0.98
min_pair_matches = 10
min_image_matches = 10
"""


def make_toy(out_dir: Path, seed: int = 0, views: int = TOY_VIEWS) -> Path:
    """Write the toy ellipsoid dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    texture_seed = derive_seed(seed, "toy-texture")
    records = []
    truth = []
    for index, (yaw, pitch) in enumerate(toy_views(views)):
        image_id = f"toy{index:02d}"
        image, mask = render_view(yaw, pitch, texture_seed)
        write_bytes(out_dir / "images" / f"{image_id}.png", encode_png(image))
        write_bytes(out_dir / "masks" / f"{image_id}.png", encode_png(mask))
        records.append(
            {
                "image_id": image_id,
                "image_path": f"images/{image_id}.png",
                "mask_path": f"masks/{image_id}.png",
                "group_label": "toy_a" if index < views // 2 else "toy_b",
                "parts": {name: list(value) for name, value in toy_parts(yaw, pitch).items()},
            }
        )
        truth.append({"image_id": image_id, "yaw": yaw, "pitch": pitch})
    manifest = write_jsonl(out_dir / "manifest.jsonl", records)
    write_json(out_dir / "views.json", truth)
    write_text(out_dir / "config.toml", TOY_CONFIG.format(seed=seed))
    logger.info("toy dataset: %d views in %s", views, out_dir)
    return manifest

