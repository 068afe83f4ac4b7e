"""
Stages shared by the subcommands: loading, pose graph, exemplar bank,
artificial pairs, matching with the configured warp prior, ratio-cutoff
calibration, evaluation and the full reconstruction chain.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence, TypeVar

import anyio
import numpy as np

from artifacts import read_json, write_bytes, write_json, write_jsonl, write_ply
from config import PipelineConfig, SubsetHeuristic, WarpMode, derive_seed
from dataset import DatasetManifest, Sample
from descriptors import DescriptorSet, extract, sample_foreground_grid
from errors import (
    DegenerateTriangulation,
    EmptyBank,
    StageError,
    UnattainablePrecision,
    UnknownHeuristicInput,
    WarpMatchError,
)
from evaluation import (
    DEFAULT_ALPHAS,
    GroundTruthMatches,
    Provenance,
    annotated_ground_truth,
    evaluation_summary,
    expand_pseudo_gt,
    label_matches,
    pck,
    pck_at_precision,
    pr_curve,
)
from exemplar import (
    ExemplarWarpBank,
    Silhouette,
    SyntheticPair,
    generate_pair,
    mine_exemplar_bank,
    random_smooth_grid,
)
from imaging import encode_png
from matcher import (
    ImageSize,
    Match,
    MatchParams,
    MatchSet,
    fitted_prior,
    match_images,
    read_match_csv,
    summarize,
    supervised_prior,
    threshold_at_precision,
    write_match_csv,
)
from posegraph import PoseGraph, build_pose_graph, mask_global_descriptor, pairs_within_hops
from propagate import build_keypoint_graph, load_group_adjacency, propagate_tracks, prune_images, select_subset
from reconstruct import build_measurement_matrix, factorize_rigid, xy_snap
from tps import ControlGrid, TpsWarp, apply_warp, build_system, invert_warp, regular_grid, to_normalized, to_pixels, warp_energy

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

FALLBACK_BANK_SIZE = 20
FALLBACK_AMPLITUDE = 0.06


def run_parallel(func: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Apply func to every item in up to `jobs` worker threads; results keep the input order."""
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    async def run() -> list[R]:
        limiter = anyio.CapacityLimiter(jobs)
        results: list[Any] = [None] * len(items)

        async def worker(index: int, item: T) -> None:
            results[index] = await anyio.to_thread.run_sync(func, item, limiter=limiter)

        async with anyio.create_task_group() as tg:
            for index, item in enumerate(items):
                tg.start_soon(worker, index, item)
        return results

    try:
        return anyio.run(run)
    except BaseExceptionGroup as group:
        raise group.exceptions[0] from None


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except WarpMatchError as exc:
        raise StageError.wrap(name, exc) from exc


def pair_name(a: str, b: str) -> str:
    return f"{a}__{b}"


# ---------------------------------------------------------------------------
# loading, pose graph and exemplar bank


def load_samples(manifest: DatasetManifest, image_ids: Sequence[str], config: PipelineConfig) -> dict[str, Sample]:
    loaded = run_parallel(lambda image_id: manifest.load(image_id, config.image_side), list(image_ids), config.jobs)
    return {sample.image_id: sample for sample in loaded}


def pose_graph_for(samples: Mapping[str, Sample], config: PipelineConfig) -> PoseGraph:
    return build_pose_graph({i: mask_global_descriptor(s.mask) for i, s in samples.items()}, config.pose_graph_k)


def mine_bank(samples: Mapping[str, Sample], graph: PoseGraph, config: PipelineConfig) -> ExemplarWarpBank:
    """Exemplar warps between the silhouettes of every pair within hop_limit_eval hops."""
    pairs = pairs_within_hops(graph, config.hop_limit_eval)
    silhouettes = [(samples[a].silhouette, samples[b].silhouette) for a, b in pairs]
    return mine_exemplar_bank(
        silhouettes,
        config.percentile_lo,
        config.percentile_hi,
        k=config.k_grid,
        samples=config.shape_context_samples,
        iterations=config.grid_fit_iterations,
        bending_weight=config.grid_fit_bending_weight,
    )


def smooth_bank(config: PipelineConfig, count: int = FALLBACK_BANK_SIZE, amplitude: float = FALLBACK_AMPLITUDE) -> ExemplarWarpBank:
    """Random low-frequency grid warps, used when too few silhouette pairs exist to mine a bank."""
    rng = np.random.default_rng(derive_seed(config.seed, "smooth-bank"))
    system = build_system(regular_grid(config.k_grid))
    warps = []
    for _ in range(count):
        warp = random_smooth_grid(config.k_grid, amplitude, rng).warp()
        warps.append((warp, warp_energy(warp, system)))
    return ExemplarWarpBank(tuple(warps))


def bank_or_fallback(samples: Mapping[str, Sample], graph: PoseGraph, config: PipelineConfig) -> ExemplarWarpBank:
    try:
        bank = mine_bank(samples, graph, config)
    except EmptyBank as exc:
        logger.warning("%s; using random smooth warps instead", exc)
        return smooth_bank(config)
    if len(bank) == 0:
        logger.warning("mined bank is empty; using random smooth warps instead")
        return smooth_bank(config)
    return bank


# ---------------------------------------------------------------------------
# artificial pairs


def generate_artificial_pairs(
    samples: Mapping[str, Sample],
    bank: ExemplarWarpBank,
    config: PipelineConfig,
    out_dir: Path,
) -> list[dict[str, Any]]:
    """m_copies warped versions of every image, written as PNGs plus a pairs.jsonl manifest."""
    tasks = [(image_id, copy) for image_id in samples for copy in range(config.m_copies)]

    def make(task: tuple[str, int]) -> dict[str, Any]:
        image_id, copy = task
        sample = samples[image_id]
        seed = derive_seed(config.seed, "generate", f"{image_id}/{copy}")
        pair = generate_pair(sample.image, sample.silhouette, bank, config.n_points, config.chromatic, seed, image_id)
        name = f"{image_id}_{copy:02d}"
        write_bytes(out_dir / "images" / f"{name}.png", encode_png(pair.warped_image))
        write_bytes(out_dir / "masks" / f"{name}.png", encode_png(pair.warped_mask))
        return {
            "pair_id": name,
            "original_id": image_id,
            "warped_image": f"images/{name}.png",
            "warped_mask": f"masks/{name}.png",
            "warp_index": pair.warp_index,
            "seed": seed,
            "chromatic": pair.chromatic_params.tolist(),
            "correspondences": np.hstack([pair.source_points, pair.target_points]).tolist(),
        }

    records = run_parallel(make, tasks, config.jobs)
    write_json(out_dir / "bank.json", bank.to_json())
    write_jsonl(out_dir / "pairs.jsonl", records)
    return records


def warped_sample(pair: SyntheticPair, group_label: str = "") -> Sample:
    return Sample(
        f"{pair.original_id}~warped",
        group_label,
        pair.warped_image,
        Silhouette.from_mask(pair.warped_mask),
        None,
    )


def synthetic_ground_truth(points: np.ndarray, warp: TpsWarp, size: ImageSize) -> GroundTruthMatches:
    """Exact targets of pixel points under a warp acting on normalized coordinates of one image size."""
    target = to_pixels(apply_warp(warp, to_normalized(points, *size)), *size)
    return GroundTruthMatches(points, target, Provenance.SYNTHETIC)


def true_prior(pair: SyntheticPair) -> tuple[TpsWarp, TpsWarp]:
    """(warp_ab, warp_ba) of an artificial pair: B back to A, and the applied A to B warp."""
    return invert_warp(pair.applied_warp), pair.applied_warp


# ---------------------------------------------------------------------------
# matching


def describe(sample: Sample, config: PipelineConfig) -> DescriptorSet:
    keypoints = sample_foreground_grid(sample.mask, config.stride, sample.image_id)
    return extract(sample.image, keypoints)


def describe_all(samples: Mapping[str, Sample], config: PipelineConfig) -> dict[str, DescriptorSet]:
    ids = list(samples)
    return dict(zip(ids, run_parallel(lambda i: describe(samples[i], config), ids, config.jobs)))


def match_described(
    desc_a: DescriptorSet,
    desc_b: DescriptorSet,
    sample_a: Sample,
    sample_b: Sample,
    config: PipelineConfig,
    mode: WarpMode | None = None,
    grid: ControlGrid | None = None,
    prior: tuple[TpsWarp, TpsWarp] | None = None,
) -> MatchSet:
    """
    Match A to B with the warp prior of `mode`.

    appearance drops the spatial term; supervised interpolates the shared
    annotated parts (or uses `prior` when given, e.g. the true warp of an
    artificial pair); fitted fits grids to the most distinctive appearance
    matches; grid uses an imported ControlGrid taking B into A.
    """
    mode = WarpMode(mode or config.warp_mode)
    params = MatchParams.from_config(config)
    if mode is WarpMode.APPEARANCE:
        return match_images(desc_a, desc_b, None, None, params)

    if mode is WarpMode.SUPERVISED:
        if prior is None:
            if sample_a.parts is None or sample_b.parts is None:
                raise UnknownHeuristicInput("supervised warps need part annotations on both images")
            prior = supervised_prior(sample_a.parts, sample_b.parts, sample_a.size, sample_b.size)
        warp_ab, warp_ba = prior
    elif mode is WarpMode.GRID:
        if grid is None:
            raise UnknownHeuristicInput("grid mode needs an imported control grid")
        warp_ab = grid.warp(config.condition_cap)
        warp_ba = invert_warp(warp_ab, config.condition_cap)
    else:
        seeds = match_images(desc_a, desc_b, None, None, params).head(config.seed_matches)
        warp_ab, warp_ba = fitted_prior(
            seeds,
            sample_a.size,
            sample_b.size,
            k=config.k_grid,
            iterations=config.grid_fit_iterations,
            bending_weight=config.grid_fit_bending_weight,
        )
    return match_images(desc_a, desc_b, warp_ab, warp_ba, params, sample_a.size, sample_b.size)


def match_pairs(
    pairs: Sequence[tuple[str, str]],
    samples: Mapping[str, Sample],
    descriptors: Mapping[str, DescriptorSet],
    config: PipelineConfig,
    mode: WarpMode | None = None,
    grids: Mapping[tuple[str, str], ControlGrid] | None = None,
) -> list[MatchSet | None]:
    """Match every pair; a failing pair is logged and yields None."""

    def run(pair: tuple[str, str]) -> MatchSet | None:
        a, b = pair
        try:
            return match_described(
                descriptors[a], descriptors[b], samples[a], samples[b], config, mode, (grids or {}).get(pair)
            )
        except WarpMatchError as exc:
            logger.warning("pair %s/%s failed: %s", a, b, exc)
            return None

    return run_parallel(run, list(pairs), config.jobs)


def write_match_outputs(
    pairs: Sequence[tuple[str, str]], results: Sequence[MatchSet | None], config: PipelineConfig, out_dir: Path
) -> dict[str, Any]:
    entries = []
    for (a, b), matches in zip(pairs, results):
        entry: dict[str, Any] = {"image_a": a, "image_b": b}
        if matches is None:
            entry["error"] = "failed"
        else:
            csv_name = f"matches/{pair_name(a, b)}.csv"
            write_match_csv(out_dir / csv_name, matches)
            entry.update(summarize(matches), csv=csv_name)
        entries.append(entry)
    summary = {"mode": WarpMode(config.warp_mode).value, "pairs": entries}
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "config.json", config.to_json_dict())
    return summary


# ---------------------------------------------------------------------------
# ratio cutoff calibration


def calibrate_ratio_cutoff(
    samples: Mapping[str, Sample],
    descriptors: Mapping[str, DescriptorSet],
    bank: ExemplarWarpBank,
    config: PipelineConfig,
) -> float | None:
    """
    Ratio cutoff at the configured precision, measured on one artificial pair
    per image matched with the same mode and parameters. None when that
    precision is never reached.
    """
    ids = sorted(samples)

    def run(image_id: str) -> list[tuple[Match, bool]]:
        sample = samples[image_id]
        seed = derive_seed(config.seed, "calibrate", image_id)
        try:
            pair = generate_pair(sample.image, sample.silhouette, bank, config.n_points, config.chromatic, seed, image_id)
            other = warped_sample(pair)
            desc_b = describe(other, config)
            mode = WarpMode(config.warp_mode)
            if mode is WarpMode.GRID:
                mode = WarpMode.FITTED
            matches = match_described(
                descriptors[image_id], desc_b, sample, other, config, mode, prior=true_prior(pair)
            )
        except WarpMatchError as exc:
            logger.warning("calibration pair for %s failed: %s", image_id, exc)
            return []
        gt = synthetic_ground_truth(descriptors[image_id].keypoints.points, pair.applied_warp, sample.size)
        labels = label_matches(matches, gt, config.alpha, (sample.size, sample.size))
        return [(m, bool(label == 1)) for m, label in zip(matches.pairs, labels)]

    labeled = [item for chunk in run_parallel(run, ids, config.jobs) for item in chunk]
    labeled.sort(key=lambda item: item[0].ratio)
    combined = MatchSet(tuple(m for m, _ in labeled), MatchParams.from_config(config))
    try:
        cutoff = threshold_at_precision(combined, [c for _, c in labeled], config.precision)
    except UnattainablePrecision as exc:
        logger.warning("ratio calibration: %s; keeping every match", exc)
        return None
    logger.info("ratio cutoff %.4f at precision %.2f from %d artificial matches", cutoff, config.precision, len(labeled))
    return cutoff


# ---------------------------------------------------------------------------
# evaluation


def ground_truth_for(sample_a: Sample, sample_b: Sample, matches: MatchSet, config: PipelineConfig) -> GroundTruthMatches:
    """
    Pseudo ground truth on both dense lattices, plus annotated parts whose
    source point was actually matched.
    """
    if sample_a.parts is None or sample_b.parts is None:
        raise UnknownHeuristicInput(f"{sample_a.image_id}/{sample_b.image_id}: evaluation needs part annotations")
    dense_a = sample_foreground_grid(sample_a.mask, config.stride, sample_a.image_id)
    dense_b = sample_foreground_grid(sample_b.mask, config.stride, sample_b.image_id)
    annotated = annotated_ground_truth(sample_a.parts, sample_b.parts)
    matched = {m.a_xy for m in matches.pairs}
    keep = [i for i, p in enumerate(annotated.source) if (float(p[0]), float(p[1])) in matched]
    annotated = GroundTruthMatches(annotated.source[keep], annotated.target[keep], Provenance.ANNOTATED)
    try:
        pseudo = expand_pseudo_gt(sample_a.parts, sample_b.parts, dense_a, dense_b, config.max_bary_dist)
    except DegenerateTriangulation as exc:
        logger.warning("no pseudo ground truth for %s/%s: %s", sample_a.image_id, sample_b.image_id, exc)
        return annotated
    return GroundTruthMatches.merge(pseudo, annotated)


def evaluate_pairs(
    entries: Sequence[tuple[MatchSet, GroundTruthMatches, tuple[ImageSize, ImageSize]]],
    config: PipelineConfig,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    require_precision: bool = False,
) -> dict[str, Any]:
    """Per-pair metrics, their means, a PCK sweep and the ratio cutoff at the configured precision."""
    per_pair = []
    labeled: list[tuple[Match, bool]] = []
    for matches, gt, sizes in entries:
        summary = evaluation_summary(matches, gt, sizes, config.alpha)
        summary["pr_curve"] = list(pr_curve(matches, gt, config.alpha, sizes).points)
        per_pair.append(summary)
        labels = label_matches(matches, gt, config.alpha, sizes)
        labeled.extend((m, bool(label == 1)) for m, label in zip(matches.pairs, labels))

    sweep = [
        (float(alpha), float(np.mean([pck(m, gt, alpha, sizes) for m, gt, sizes in entries])) if entries else 0.0)
        for alpha in alphas
    ]
    labeled.sort(key=lambda item: item[0].ratio)
    cutoff = None
    if labeled:
        combined = MatchSet(tuple(m for m, _ in labeled), MatchParams.from_config(config))
        try:
            cutoff = threshold_at_precision(combined, [c for _, c in labeled], config.precision)
        except UnattainablePrecision:
            if require_precision:
                raise
            logger.warning("precision %.2f is not reached on these matches", config.precision)

    pck_cut = None
    if cutoff is not None and entries:
        pck_cut = float(np.mean([pck_at_precision(m, gt, config.alpha, sizes, cutoff) for m, gt, sizes in entries]))
    return {
        "pairs": per_pair,
        "mean_ap": float(np.mean([p["ap"] for p in per_pair])) if per_pair else 0.0,
        "mean_pck@0.05": float(np.mean([p["pck@0.05"] for p in per_pair])) if per_pair else 0.0,
        "mean_pck@0.10": float(np.mean([p["pck@0.10"] for p in per_pair])) if per_pair else 0.0,
        "pck_sweep": sweep,
        "ratio_cutoff": cutoff,
        "pck_at_precision": pck_cut,
    }


def load_match_directory(path: Path, params: MatchParams) -> list[MatchSet]:
    summary = read_json(path / "summary.json")
    out = []
    for entry in summary["pairs"]:
        if "csv" not in entry:
            continue
        out.append(read_match_csv(path / entry["csv"], params, entry["image_a"], entry["image_b"]))
    return out


# ---------------------------------------------------------------------------
# reconstruction


@dataclass(frozen=True)
class ReconstructionResult:
    points: np.ndarray
    track_ids: tuple[int, ...]
    frame_ids: tuple[str, ...]
    residual: float
    degenerate_rank: bool


def reconstruction_subset(manifest: DatasetManifest, target: str, config: PipelineConfig) -> list[str]:
    groups = manifest.groups()
    adjacency = load_group_adjacency(Path(config.group_adjacency)) if config.group_adjacency else None
    keyword = config.subset_keyword
    if keyword is None and config.subset_heuristic is SubsetHeuristic.KEYWORD_GROUP:
        keyword = groups[target] or None
    ids = select_subset(groups, target, config.subset_heuristic, keyword, adjacency, config.explicit_images)
    return [target] + [i for i in ids if i != target]


def reconstruct_target(manifest: DatasetManifest, target: str, config: PipelineConfig, out_dir: Path) -> ReconstructionResult:
    """Subset, pairwise matching, calibration, propagation, pruning, factorization and xy-snapping for one target."""
    write_json(out_dir / "config.json", config.to_json_dict())
    with stage("subset"):
        manifest.record(target)
        ids = reconstruction_subset(manifest, target, config)
        write_json(out_dir / "subset.json", ids)
    with stage("load"):
        samples = load_samples(manifest, ids, config)
    with stage("posegraph"):
        if len(samples) < 2:
            raise StageError("posegraph", "insufficient views: the subset holds only the target")
        graph = pose_graph_for(samples, config)
        pairs = pairs_within_hops(graph, config.hop_limit_reconstruct - 1)
        write_json(out_dir / "posegraph.json", graph.to_json())
    with stage("match"):
        descriptors = describe_all(samples, config)
        results = match_pairs(pairs, samples, descriptors, config)
        write_match_outputs(pairs, results, config, out_dir)
        matchsets = [m for m in results if m is not None]
    with stage("calibrate"):
        cutoff = config.ratio_cutoff
        if cutoff is None:
            bank = bank_or_fallback(samples, graph, config)
            cutoff = calibrate_ratio_cutoff(samples, descriptors, bank, config)
        write_json(out_dir / "cutoff.json", {"ratio_cutoff": cutoff, "precision": config.precision})
    with stage("propagate"):
        keypoint_graph = build_keypoint_graph(matchsets, target, config.min_pair_matches, cutoff)
        tracks = propagate_tracks(keypoint_graph, config.path_cost_max)
    with stage("prune"):
        tracks = prune_images(tracks, config.min_image_matches)
        write_json(out_dir / "tracks.json", tracks.to_json())
        if len(tracks.images()) < 2:
            raise StageError("prune", "insufficient views: no image keeps enough track points")
    with stage("measure"):
        measurement = build_measurement_matrix(tracks, config.visibility_frac)
        write_json(
            out_dir / "measurement.json",
            {
                "frame_ids": list(measurement.frame_ids),
                "track_ids": list(measurement.track_ids),
                "raw": measurement.raw,
                "mask": measurement.mask.astype(int),
                "offsets": measurement.offsets,
            },
        )
    with stage("factorize"):
        recon = factorize_rigid(measurement, config.factorization_max_iters, config.factorization_tol)
        write_json(out_dir / "reconstruction.json", recon.to_json())
    with stage("snap"):
        points = xy_snap(recon, measurement)
    write_ply(out_dir / "points.ply", points, measurement.track_ids)
    write_json(out_dir / "points.json", {"track_ids": list(measurement.track_ids), "points": points})
    return ReconstructionResult(
        points, measurement.track_ids, measurement.frame_ids, recon.residual, recon.degenerate_rank
    )
