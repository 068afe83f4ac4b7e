"""
Multi-image tracks by shortest paths over a keypoint graph.

Nodes are (image_id, keypoint index); every surviving pairwise match adds an
edge of cost 1 - score / (1 + lambda). From each keypoint of the target image
the cheapest reachable keypoint of every other image joins its track when the
summed path cost stays within the threshold.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import networkx as nx

from artifacts import read_json
from config import SubsetHeuristic
from errors import DatasetError, UnknownHeuristicInput, UnknownTarget
from matcher import MatchSet, apply_cutoff

logger = logging.getLogger(__name__)

Node = tuple[str, int]


@dataclass(frozen=True, eq=False)
class KeypointGraph:
    graph: nx.Graph
    target_image: str

    @classmethod
    def from_edges(
        cls,
        target_image: str,
        edges: Iterable[tuple[Node, Node, float]],
        positions: Mapping[Node, tuple[float, float]] | None = None,
    ) -> "KeypointGraph":
        graph = nx.Graph(name="keypoint graph")
        for a, b, weight in edges:
            _add_edge(graph, a, b, weight)
        for node, xy in (positions or {}).items():
            graph.add_node(node, xy=xy)
        return cls(graph, target_image)

    @property
    def images(self) -> set[str]:
        return {image for image, _ in self.graph.nodes}


def _add_edge(graph: nx.Graph, a: Node, b: Node, weight: float) -> None:
    weight = min(max(float(weight), 0.0), 1.0)
    if graph.has_edge(a, b) and graph.edges[a, b]["weight"] <= weight:
        return
    graph.add_edge(a, b, weight=weight)


def build_keypoint_graph(
    pairwise: Sequence[MatchSet],
    target_image: str,
    min_matches: int = 50,
    precision_cutoffs: float | Mapping[tuple[str, str], float] | None = None,
) -> KeypointGraph:
    """
    Keypoint graph from thresholded pairwise matches.

    precision_cutoffs, when given, is a ratio cutoff applied to every pair (a
    float) or per (image_a, image_b); otherwise the match sets are taken as
    already thresholded. Pairs left with fewer than min_matches matches add no
    edges. Parallel edges keep the cheaper weight.
    """
    graph = nx.Graph(name="keypoint graph")
    used = 0
    for matches in pairwise:
        if precision_cutoffs is not None:
            cutoff = (
                precision_cutoffs
                if isinstance(precision_cutoffs, (int, float))
                else precision_cutoffs.get((matches.image_a, matches.image_b))
            )
            if cutoff is not None:
                matches = apply_cutoff(matches, cutoff)
        if len(matches) < min_matches:
            logger.debug("pair %s/%s: %d matches < %d, ignored", matches.image_a, matches.image_b, len(matches), min_matches)
            continue
        used += 1
        top = matches.params.max_score
        for m in matches.pairs:
            a, b = (matches.image_a, m.a_idx), (matches.image_b, m.b_idx)
            _add_edge(graph, a, b, 1.0 - m.score / top)
            graph.nodes[a]["xy"] = m.a_xy
            graph.nodes[b]["xy"] = m.b_xy
    logger.info(
        "keypoint graph: %d of %d pairs used, %d nodes, %d edges",
        used,
        len(pairwise),
        graph.number_of_nodes(),
        graph.number_of_edges(),
    )
    return KeypointGraph(graph, target_image)


@dataclass
class TrackSet:
    target_image: str
    tracks: dict[int, dict[str, tuple[float, float]]] = field(default_factory=dict)
    path_costs: dict[int, dict[str, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tracks)

    def images(self) -> list[str]:
        """Image ids in first-seen order, target first."""
        seen = {self.target_image: None} if self.tracks else {}
        for track in self.tracks.values():
            for image in track:
                seen.setdefault(image, None)
        return list(seen)

    def counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for track in self.tracks.values():
            for image in track:
                counts[image] = counts.get(image, 0) + 1
        return counts

    def to_json(self) -> dict[str, Any]:
        return {
            str(track_id): {
                image: [xy[0], xy[1], self.path_costs[track_id][image]] for image, xy in sorted(track.items())
            }
            for track_id, track in sorted(self.tracks.items())
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any], target_image: str) -> "TrackSet":
        tracks = TrackSet(target_image)
        for track_id, points in data.items():
            tracks.tracks[int(track_id)] = {image: (float(v[0]), float(v[1])) for image, v in points.items()}
            tracks.path_costs[int(track_id)] = {image: float(v[2]) for image, v in points.items()}
        return tracks


def propagate_tracks(g: KeypointGraph, max_path_cost: float = 0.4) -> TrackSet:
    """Cheapest keypoint per other image within max_path_cost of each target keypoint (ties to the lowest index)."""
    target_nodes = sorted(node for node in g.graph.nodes if node[0] == g.target_image)
    if not target_nodes:
        raise UnknownTarget(g.target_image)

    tracks = TrackSet(g.target_image)
    for node in target_nodes:
        lengths = nx.single_source_dijkstra_path_length(g.graph, node, cutoff=max_path_cost, weight="weight")
        best: dict[str, tuple[float, int]] = {}
        for (image, index), cost in lengths.items():
            if image == g.target_image:
                continue
            if image not in best or (cost, index) < best[image]:
                best[image] = (cost, index)

        track_id = node[1]
        xy = g.graph.nodes[node].get("xy", (float("nan"), float("nan")))
        tracks.tracks[track_id] = {g.target_image: xy}
        tracks.path_costs[track_id] = {g.target_image: 0.0}
        for image in sorted(best):
            cost, index = best[image]
            tracks.tracks[track_id][image] = g.graph.nodes[(image, index)].get("xy", (float("nan"), float("nan")))
            tracks.path_costs[track_id][image] = float(cost)
    return tracks


def prune_images(tracks: TrackSet, min_matches_per_image: int = 30) -> TrackSet:
    """Drop every non-target image contributing fewer than min_matches_per_image track points."""
    counts = tracks.counts()
    dropped = {image for image, count in counts.items() if count < min_matches_per_image and image != tracks.target_image}
    if dropped:
        logger.info("pruned %d images with < %d track points", len(dropped), min_matches_per_image)
    pruned = TrackSet(tracks.target_image)
    for track_id, track in tracks.tracks.items():
        pruned.tracks[track_id] = {i: xy for i, xy in track.items() if i not in dropped}
        pruned.path_costs[track_id] = {i: c for i, c in tracks.path_costs[track_id].items() if i not in dropped}
    return pruned


def load_group_adjacency(path: Path) -> dict[str, list[str]]:
    """Group-similarity file: JSON object mapping a group label to the labels adjacent to it."""
    try:
        data = read_json(path)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read group adjacency {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: group adjacency must be a JSON object")
    return {str(k): [str(v) for v in values] for k, values in data.items()}


def select_subset(
    groups: Mapping[str, str],
    target_image: str,
    heuristic: SubsetHeuristic,
    keyword: str | None = None,
    group_adjacency: Mapping[str, Sequence[str]] | None = None,
    explicit: Sequence[str] = (),
) -> list[str]:
    """
    Image ids to reconstruct from, in manifest order.

    groups maps image id to group label. keyword_group keeps labels containing
    the keyword; neighbor_groups keeps the target's group and the groups
    adjacent to it; explicit_list returns `explicit` as given.
    """
    heuristic = SubsetHeuristic(heuristic)
    if heuristic is SubsetHeuristic.EXPLICIT_LIST:
        if not explicit:
            raise UnknownHeuristicInput("explicit_list needs a list of image ids")
        return list(explicit)

    if heuristic is SubsetHeuristic.KEYWORD_GROUP:
        if not keyword:
            raise UnknownHeuristicInput("keyword_group needs a keyword")
        selected = [image for image, label in groups.items() if keyword in label]
        if not selected:
            logger.warning("keyword %r matches no group", keyword)
        return selected

    if group_adjacency is None:
        raise UnknownHeuristicInput("neighbor_groups needs a group adjacency file")
    if target_image not in groups:
        raise UnknownTarget(target_image)
    home = groups[target_image]
    wanted = {home, *group_adjacency.get(home, ())}
    wanted |= {group for group, adjacent in group_adjacency.items() if home in adjacent}
    return [image for image, label in groups.items() if label in wanted]
