"""
warpmatch command line.

Subcommands:
- generate      artificial pairs from an exemplar warp bank
- fitgrid       fit a control grid to correspondences
- match         pairwise matches with the configured warp prior
- eval          PCK / precision-recall of match CSVs
- propagate     multi-image tracks from match CSVs
- reconstruct   the full single-view reconstruction chain for one target
- posegraph     the kNN pose graph and its pair lists
- experiment    seeded synthetic experiments
- make-toy      write the toy ellipsoid dataset

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from artifacts import read_csv, read_json, write_csv, write_json
from config import PipelineConfig, WarpMode, load_config
from dataset import load_manifest
from errors import DatasetError, WarpMatchError
from evaluation import DEFAULT_ALPHAS, read_ground_truth_csv
from experiments import affine_vs_exemplar, make_toy, prior_vs_appearance
from matcher import MatchParams, read_match_csv
from pipeline import (
    bank_or_fallback,
    describe_all,
    evaluate_pairs,
    generate_artificial_pairs,
    ground_truth_for,
    load_match_directory,
    load_samples,
    match_pairs,
    pose_graph_for,
    reconstruct_target,
    write_match_outputs,
)
from posegraph import pairs_within_hops
from propagate import build_keypoint_graph, propagate_tracks, prune_images
from tps import ControlGrid, fit_grid_to_correspondences, to_normalized

logger = logging.getLogger("warpmatch")


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def banner(title: str, **details: object) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)
    for key, value in details.items():
        print(f"{key}: {value}")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.set)
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    return load_config(args.config, overrides)


def read_pair_list(path: Path) -> list[tuple[str, str]]:
    """Whitespace-separated image id pairs, one per line; '#' starts a comment."""
    pairs = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise DatasetError(f"{path}:{number}: expected two image ids")
        pairs.append((fields[0], fields[1]))
    return pairs


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    banner("GENERATE: artificial pairs", manifest=args.manifest, out=args.out, copies=config.m_copies)
    samples = load_samples(manifest, manifest.image_ids, config)
    graph = pose_graph_for(samples, config)
    bank = bank_or_fallback(samples, graph, config)
    records = generate_artificial_pairs(samples, bank, config, args.out)
    write_json(args.out / "config.json", config.to_json_dict())
    print(f"bank warps: {len(bank)}")
    print(f"pairs written: {len(records)}")
    return 0


def _load_correspondences(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".csv":
        rows = read_csv(path)
        return np.array([[float(r["a_x"]), float(r["a_y"]), float(r["b_x"]), float(r["b_y"])] for r in rows]).reshape(-1, 4)
    data = read_json(path)
    if isinstance(data, dict):
        data = data["correspondences"]
    return np.asarray(data, dtype=np.float64).reshape(-1, 4)


def cmd_fitgrid(args: argparse.Namespace, config: PipelineConfig) -> int:
    banner("FITGRID: control grid from correspondences", input=args.correspondences, k=config.k_grid)
    pairs = _load_correspondences(args.correspondences)
    source = to_normalized(pairs[:, :2], *args.size_a)
    target = to_normalized(pairs[:, 2:], *args.size_b)
    fit = fit_grid_to_correspondences(
        source,
        target,
        k=config.k_grid,
        iterations=config.grid_fit_iterations,
        bending_weight=config.grid_fit_bending_weight,
        bound=config.bound,
        condition_cap=config.condition_cap,
    )
    write_json(args.out, fit.grid.to_json())
    print(f"objective: {fit.history[0]:.6g} -> {fit.final_mse:.6g} in {len(fit.history) - 1} steps")
    print(f"grid written to {args.out}")
    return 0


def cmd_match(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    if args.mode is not None:
        config = config.model_copy(update={"warp_mode": WarpMode(args.mode)})
    banner("MATCH: pairwise matches", manifest=args.manifest, out=args.out, mode=config.warp_mode.value)

    if args.pairs is not None:
        pairs = read_pair_list(args.pairs)
        ids = sorted({i for pair in pairs for i in pair})
    else:
        ids = manifest.image_ids
        pairs = []
    samples = load_samples(manifest, ids, config)
    if args.pairs is None and len(samples) >= 2:
        pairs = pairs_within_hops(pose_graph_for(samples, config), config.hop_limit_eval)

    grids = {}
    if args.grids is not None:
        for a, b in pairs:
            path = args.grids / f"{a}__{b}.json"
            if path.is_file():
                grids[(a, b)] = ControlGrid.from_json(read_json(path), config.bound)

    descriptors = describe_all(samples, config)
    results = match_pairs(pairs, samples, descriptors, config, grids=grids)
    summary = write_match_outputs(pairs, results, config, args.out)
    failed = sum(1 for entry in summary["pairs"] if "error" in entry)
    print(f"pairs matched: {len(pairs) - failed} of {len(pairs)}")
    return 0


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    banner("EVAL: PCK and precision-recall", matches=args.matches, out=args.out, alpha=config.alpha)
    params = MatchParams.from_config(config)
    entries = []
    if args.matches.is_dir():
        if args.manifest is None:
            raise DatasetError("evaluating a match directory needs --manifest")
        manifest = load_manifest(args.manifest)
        match_sets = load_match_directory(args.matches, params)
        ids = sorted({i for m in match_sets for i in (m.image_a, m.image_b)})
        samples = load_samples(manifest, ids, config)
        for matches in match_sets:
            a, b = samples[matches.image_a], samples[matches.image_b]
            entries.append((matches, ground_truth_for(a, b, matches, config), (a.size, b.size)))
    else:
        if args.gt is None or args.size_a is None or args.size_b is None:
            raise DatasetError("evaluating a single CSV needs --gt, --size-a and --size-b")
        matches = read_match_csv(args.matches, params)
        entries.append((matches, read_ground_truth_csv(args.gt), (tuple(args.size_a), tuple(args.size_b))))

    metrics = evaluate_pairs(entries, config, DEFAULT_ALPHAS, args.require_precision)
    write_json(args.out / "metrics.json", metrics)
    write_json(args.out / "config.json", config.to_json_dict())
    if args.alpha_sweep:
        write_csv(args.out / "pck_sweep.csv", ("alpha", "value"), metrics["pck_sweep"])
    print(f"pairs: {len(entries)}")
    print(f"mean AP: {metrics['mean_ap']:.4f}")
    print(f"mean PCK@0.05: {metrics['mean_pck@0.05']:.4f}")
    return 0


def cmd_propagate(args: argparse.Namespace, config: PipelineConfig) -> int:
    banner("PROPAGATE: tracks from pairwise matches", matches=args.matches, target=args.target, out=args.out)
    match_sets = load_match_directory(args.matches, MatchParams.from_config(config))
    graph = build_keypoint_graph(match_sets, args.target, config.min_pair_matches, config.ratio_cutoff)
    tracks = prune_images(propagate_tracks(graph, config.path_cost_max), config.min_image_matches)
    write_json(args.out / "tracks.json", tracks.to_json())
    write_json(args.out / "config.json", config.to_json_dict())
    print(f"tracks: {len(tracks)} over {len(tracks.images())} images")
    return 0


def cmd_reconstruct(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    banner("RECONSTRUCT: single-view point cloud", manifest=args.manifest, target=args.target, out=args.out)
    result = reconstruct_target(manifest, args.target, config, args.out)
    print(f"frames: {len(result.frame_ids)}")
    print(f"points: {len(result.track_ids)}")
    print(f"residual: {result.residual:.4f} px")
    if result.degenerate_rank:
        print("warning: measurement matrix is rank deficient")
    return 0


def cmd_posegraph(args: argparse.Namespace, config: PipelineConfig) -> int:
    manifest = load_manifest(args.manifest)
    banner("POSEGRAPH: kNN graph over silhouettes", manifest=args.manifest, out=args.out, k=config.pose_graph_k)
    samples = load_samples(manifest, manifest.image_ids, config)
    graph = pose_graph_for(samples, config)
    write_json(args.out / "graph.json", graph.to_json())
    write_json(args.out / "pairs_eval.json", pairs_within_hops(graph, config.hop_limit_eval))
    write_json(args.out / "pairs_reconstruct.json", pairs_within_hops(graph, config.hop_limit_reconstruct - 1))
    write_json(args.out / "config.json", config.to_json_dict())
    print(f"nodes: {graph.graph.number_of_nodes()}, edges: {graph.graph.number_of_edges()}")
    return 0


def cmd_experiment(args: argparse.Namespace, config: PipelineConfig) -> int:
    banner(f"EXPERIMENT: {args.name}", pairs=args.pairs, seed=config.seed)
    if args.name == "prior-vs-appearance":
        result = prior_vs_appearance(args.pairs, config.seed, config)
        print(f"PCK@{config.alpha} with prior: {result['pck_prior']:.4f}")
        print(f"PCK@{config.alpha} appearance only: {result['pck_appearance']:.4f}")
    else:
        result = affine_vs_exemplar(args.pairs, config.seed, config)
        for name, scores in result["banks"].items():
            print(f"{name}: PCK at precision {scores['pck_at_precision']:.4f}, prior error {scores['prior_error_px']:.2f} px")
    if args.out is not None:
        write_json(args.out, {"experiment": args.name, "config": config.to_json_dict(), **result})
    return 0


def cmd_make_toy(args: argparse.Namespace, config: PipelineConfig) -> int:
    banner("MAKE-TOY: textured ellipsoid under a yaw sweep", out=args.out, seed=config.seed)
    manifest = make_toy(args.out, config.seed)
    print(f"manifest: {manifest}")
    print(f"config: {args.out / 'config.toml'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="warpmatch", description="Exemplar-warp matching and single-view reconstruction.")
    parser.add_argument("--config", type=Path, help="TOML configuration file.")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override a config value.")
    parser.add_argument("--jobs", type=int, help="Worker threads for independent pairs and images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("generate", help="Mine an exemplar bank and write artificial pairs.")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("fitgrid", help="Fit a control grid to correspondences (JSON or CSV).")
    p.add_argument("--correspondences", type=Path, required=True)
    p.add_argument("--size-a", type=int, nargs=2, metavar=("W", "H"), required=True, help="Source image size in pixels.")
    p.add_argument("--size-b", type=int, nargs=2, metavar=("W", "H"), required=True, help="Target image size in pixels.")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_fitgrid)

    p = sub.add_parser("match", help="Match image pairs.")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pairs", type=Path, help="Pair list; defaults to pose-graph pairs within hop_limit_eval.")
    p.add_argument("--mode", choices=[m.value for m in WarpMode])
    p.add_argument("--grids", type=Path, help="Directory of <a>__<b>.json control grids for grid mode.")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("eval", help="Score match CSVs.")
    p.add_argument("--matches", type=Path, required=True, help="Match directory (summary.json) or a single CSV.")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--gt", type=Path, help="Ground-truth CSV for a single match CSV.")
    p.add_argument("--size-a", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--size-b", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--alpha-sweep", action="store_true", help="Also write pck_sweep.csv.")
    p.add_argument("--require-precision", action="store_true", help="Fail when the target precision is unreachable.")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("propagate", help="Tracks from a match directory.")
    p.add_argument("--matches", type=Path, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_propagate)

    p = sub.add_parser("reconstruct", help="Reconstruct one target image.")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("posegraph", help="Build the pose graph.")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_posegraph)

    p = sub.add_parser("experiment", help="Run a synthetic experiment.")
    p.add_argument("name", choices=["prior-vs-appearance", "affine-vs-exemplar"])
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--out", type=Path, help="Result JSON.")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("make-toy", help="Write the toy ellipsoid dataset.")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_make_toy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = resolve_config(args)
        return args.handler(args, config)
    except WarpMatchError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
