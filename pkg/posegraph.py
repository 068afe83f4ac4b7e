"""
k-nearest-neighbour pose graph over images.

Nodes are image ids, edges join each image to its k nearest neighbours by
cosine distance of a global descriptor (union of the directed choices). Hop
counts on this graph decide which image pairs are close enough in pose to be
matched, mined for exemplar warps or evaluated.
"""

import logging
from dataclasses import dataclass
from typing import Any, Mapping

import networkx as nx
import numpy as np
import numpy.typing as npt
from scipy import ndimage

from errors import DimensionMismatch, UnknownNode

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class PoseGraph:
    graph: nx.Graph
    k: int

    @property
    def node_ids(self) -> list[str]:
        return list(self.graph.nodes)

    def weight(self, a: str, b: str) -> float:
        return float(self.graph.edges[a, b]["weight"])

    def neighbors(self, node: str) -> list[str]:
        if node not in self.graph:
            raise UnknownNode(node)
        return sorted(self.graph.neighbors(node))

    def to_json(self) -> dict[str, Any]:
        edges = sorted((min(a, b), max(a, b), float(w)) for a, b, w in self.graph.edges(data="weight"))
        return {"nodes": self.node_ids, "edges": [list(edge) for edge in edges], "k": self.k}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "PoseGraph":
        graph = nx.Graph(name="pose graph")
        graph.add_nodes_from(data["nodes"])
        graph.add_weighted_edges_from((a, b, float(w)) for a, b, w in data["edges"])
        return cls(graph, int(data["k"]))


def mask_global_descriptor(mask: npt.ArrayLike, size: int = 32, sigma: float = 1.0) -> np.ndarray:
    """Foreground mask downsampled to size x size, blurred, flattened and unit-normalized."""
    mask = np.asarray(mask, dtype=np.float64)
    small = ndimage.zoom(mask, (size / mask.shape[0], size / mask.shape[1]), order=1)[:size, :size]
    vector = ndimage.gaussian_filter(small, sigma).ravel()
    norm = np.linalg.norm(vector)
    if norm == 0:
        return np.full(vector.shape, 1.0 / np.sqrt(vector.size))
    return vector / norm


def build_pose_graph(global_descriptors: Mapping[str, npt.ArrayLike], k: int = 5) -> PoseGraph:
    """
    Connect every image to its k nearest neighbours by cosine distance.

    Neighbours tied with the k-th distance are all kept, so the graph does not
    depend on input order.
    """
    ids = list(global_descriptors)
    if len(ids) < 2:
        raise ValueError(f"a pose graph needs at least 2 images, got {len(ids)}")
    if k < 1:
        raise ValueError("k must be at least 1")
    vectors = [np.asarray(global_descriptors[i], dtype=np.float64).ravel() for i in ids]
    dims = {v.shape[0] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"global descriptors have mixed dimensions {sorted(dims)}")
    matrix = np.vstack(vectors)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("global descriptors must be nonzero")
    matrix = matrix / norms

    distance = np.clip(1.0 - matrix @ matrix.T, 0.0, 2.0)
    np.fill_diagonal(distance, np.inf)

    graph = nx.Graph(name="pose graph")
    graph.add_nodes_from(ids)
    kth = min(k, len(ids) - 1) - 1
    for i, row in enumerate(distance):
        cutoff = np.sort(row)[kth] + TIE_TOLERANCE
        for j in np.flatnonzero(row <= cutoff):
            graph.add_edge(ids[i], ids[j], weight=float(distance[i, j]))
    logger.info("pose graph: %d nodes, %d edges (k=%d)", graph.number_of_nodes(), graph.number_of_edges(), k)
    return PoseGraph(graph, k)


def hop_distance(g: PoseGraph, a: str, b: str) -> int | None:
    """Unweighted hop count between two images, None when they are in different components."""
    for node in (a, b):
        if node not in g.graph:
            raise UnknownNode(node)
    try:
        return nx.shortest_path_length(g.graph, a, b)
    except nx.NetworkXNoPath:
        return None


def pairs_within_hops(g: PoseGraph, max_hops: int) -> list[tuple[str, str]]:
    """Unordered image pairs at most max_hops apart, each once, in lexicographic order."""
    if max_hops < 1:
        raise ValueError("max_hops must be at least 1")
    pairs = set()
    for source, lengths in nx.all_pairs_shortest_path_length(g.graph, cutoff=max_hops):
        for target in lengths:
            if source < target:
                pairs.add((source, target))
    return sorted(pairs)
