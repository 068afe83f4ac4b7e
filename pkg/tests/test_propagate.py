import json

import networkx as nx
import numpy as np
import pytest

from config import SubsetHeuristic
from errors import UnknownHeuristicInput, UnknownTarget
from matcher import Match, MatchParams, MatchSet
from propagate import (
    KeypointGraph,
    TrackSet,
    build_keypoint_graph,
    load_group_adjacency,
    propagate_tracks,
    prune_images,
    select_subset,
)


def match_set(image_a: str, image_b: str, count: int, score: float = 1.0) -> MatchSet:
    pairs = tuple(Match(i, i, (float(i), 0.0), (float(i), 1.0), score, 0.1) for i in range(count))
    return MatchSet(pairs, MatchParams(), image_a=image_a, image_b=image_b)


def test_pairs_below_the_match_floor_add_no_edges():
    g = build_keypoint_graph([match_set("t", "b", 49)], "t", min_matches=50)
    assert g.graph.number_of_edges() == 0
    g = build_keypoint_graph([match_set("t", "b", 50)], "t", min_matches=50)
    assert g.graph.number_of_edges() == 50


def test_perfect_match_costs_nothing():
    g = build_keypoint_graph([match_set("t", "b", 3, score=1.3)], "t", min_matches=1)
    assert g.graph.edges[("t", 0), ("b", 0)]["weight"] == pytest.approx(0.0)
    assert g.graph.nodes[("b", 2)]["xy"] == (2.0, 1.0)


def test_empty_input_gives_empty_graph():
    g = build_keypoint_graph([], "t")
    assert g.graph.number_of_nodes() == 0
    with pytest.raises(UnknownTarget):
        propagate_tracks(g)


def test_cutoff_is_applied_before_the_match_floor():
    matches = match_set("t", "b", 60)
    g = build_keypoint_graph([matches], "t", min_matches=50, precision_cutoffs=0.05)
    assert g.graph.number_of_edges() == 0


def test_path_cost_threshold():
    g = KeypointGraph.from_edges("t", [(("t", 0), ("b", 0), 0.1), (("t", 1), ("c", 0), 0.5)])
    tracks = propagate_tracks(g, max_path_cost=0.4)
    assert tracks.path_costs[0] == {"t": 0.0, "b": pytest.approx(0.1)}
    assert "c" not in tracks.tracks[1]


def test_two_hop_path_beats_a_worse_direct_edge():
    g = KeypointGraph.from_edges(
        "t",
        [
            (("t", 0), ("b", 0), 0.38),
            (("t", 0), ("c", 0), 0.15),
            (("c", 0), ("b", 1), 0.2),
        ],
        positions={("b", 1): (7.0, 8.0), ("t", 0): (1.0, 2.0)},
    )
    tracks = propagate_tracks(g)
    assert tracks.path_costs[0]["b"] == pytest.approx(0.35)
    assert tracks.tracks[0]["b"] == (7.0, 8.0)
    assert tracks.tracks[0]["t"] == (1.0, 2.0)


def test_costs_agree_with_enumerating_every_path(rng):
    for _ in range(5):
        nodes = [(image, k) for image in "twxy" for k in range(3)]
        edges = []
        for i in range(len(nodes)):
            for j in range(i + 1, len(nodes)):
                if nodes[i][0] != nodes[j][0] and rng.uniform() < 0.3:
                    edges.append((nodes[i], nodes[j], float(rng.uniform(0.0, 0.3))))
        g = KeypointGraph.from_edges("t", edges)
        if not any(node[0] == "t" for node in g.graph.nodes):
            continue
        tracks = propagate_tracks(g, max_path_cost=0.4)

        for source in (n for n in g.graph.nodes if n[0] == "t"):
            best: dict[str, float] = {}
            for node in g.graph.nodes:
                if node[0] == "t":
                    continue
                for path in nx.all_simple_paths(g.graph, source, node):
                    cost = sum(g.graph.edges[u, v]["weight"] for u, v in zip(path, path[1:]))
                    best[node[0]] = min(best.get(node[0], np.inf), cost)
            expected = {image: cost for image, cost in best.items() if cost <= 0.4}
            found = {image: cost for image, cost in tracks.path_costs[source[1]].items() if image != "t"}
            assert found.keys() == expected.keys()
            for image, cost in expected.items():
                assert found[image] == pytest.approx(cost)


def test_raising_the_threshold_only_adds_points(rng):
    nodes = [(image, k) for image in "tabc" for k in range(4)]
    edges = [
        (nodes[i], nodes[j], float(rng.uniform(0.0, 0.5)))
        for i in range(len(nodes))
        for j in range(i + 1, len(nodes))
        if nodes[i][0] != nodes[j][0] and rng.uniform() < 0.25
    ]
    edges += [(("t", k), ("a", k), 0.45) for k in range(4)]
    g = KeypointGraph.from_edges("t", edges)
    tight, loose = propagate_tracks(g, 0.2), propagate_tracks(g, 0.4)
    for track_id, track in tight.tracks.items():
        assert set(track) <= set(loose.tracks[track_id])


def _tracks_with_counts(counts: dict[str, int], size: int = 40) -> TrackSet:
    tracks = TrackSet("t")
    for k in range(size):
        tracks.tracks[k] = {"t": (float(k), 0.0)}
        tracks.path_costs[k] = {"t": 0.0}
        for image, count in counts.items():
            if k < count:
                tracks.tracks[k][image] = (float(k), 1.0)
                tracks.path_costs[k][image] = 0.1
    return tracks


def test_prune_images_boundary():
    pruned = prune_images(_tracks_with_counts({"few": 29, "enough": 30}), 30)
    assert pruned.images() == ["t", "enough"]
    assert pruned.counts()["t"] == 40
    assert len(prune_images(TrackSet("t"))) == 0


def test_track_json_round_trip():
    tracks = _tracks_with_counts({"b": 2}, size=3)
    restored = TrackSet.from_json(json.loads(json.dumps(tracks.to_json())), "t")
    assert restored.tracks == tracks.tracks
    assert restored.path_costs == tracks.path_costs


GROUPS = {"a1": "warbler_A", "a2": "warbler_A", "b1": "warbler_B", "s1": "sparrow_A", "g1": "gull"}


def test_keyword_subset():
    assert select_subset(GROUPS, "a1", SubsetHeuristic.KEYWORD_GROUP, keyword="warbler") == ["a1", "a2", "b1"]
    assert select_subset(GROUPS, "a1", SubsetHeuristic.KEYWORD_GROUP, keyword="heron") == []
    with pytest.raises(UnknownHeuristicInput):
        select_subset(GROUPS, "a1", SubsetHeuristic.KEYWORD_GROUP)


def test_explicit_subset_is_passed_through():
    assert select_subset(GROUPS, "a1", SubsetHeuristic.EXPLICIT_LIST, explicit=["g1", "a1"]) == ["g1", "a1"]
    with pytest.raises(UnknownHeuristicInput):
        select_subset(GROUPS, "a1", SubsetHeuristic.EXPLICIT_LIST)


def test_neighbor_groups_subset(tmp_path):
    path = tmp_path / "adjacency.json"
    path.write_text(json.dumps({"sparrow_A": ["warbler_A"]}))
    adjacency = load_group_adjacency(path)
    assert select_subset(GROUPS, "a1", SubsetHeuristic.NEIGHBOR_GROUPS, group_adjacency=adjacency) == ["a1", "a2", "s1"]
    assert select_subset(GROUPS, "s1", "neighbor_groups", group_adjacency=adjacency) == ["a1", "a2", "s1"]
    with pytest.raises(UnknownHeuristicInput):
        select_subset(GROUPS, "a1", SubsetHeuristic.NEIGHBOR_GROUPS)
