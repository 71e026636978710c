"""Problem decomposition.

Additive: DBSCAN splits the samples into clusters whose densities are fitted
separately and summed with sample-fraction weights.
Multiplicative: the skeleton of the PC algorithm (partial-correlation tests with
Fisher's z) splits the variables into independent blocks whose densities multiply.
"""
import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import stats
from sklearn.cluster import DBSCAN
from sklearn.neighbors import NearestNeighbors

from .errors import PartitionError, SingularConditioning, TooFewSamples, WeightMismatch
from .expr import Expression, Node, Op, binary, const, evaluate_batch, reindex, to_string

logger = logging.getLogger(__name__)

NOISE = -1
R_CLAMP = 1.0 - 1e-12


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray
    k: int
    weights: np.ndarray

    @property
    def noise_count(self) -> int:
        return int(np.sum(self.labels == NOISE))

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def dbscan(samples, eps: float, min_pts: int) -> ClusterLabels:
    """Euclidean DBSCAN. Neighbourhood counts include the point itself.

    Clusters are numbered in order of their first core point; a border point
    reachable from several clusters keeps the lowest id.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be positive and min_pts at least 1")
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="euclidean", algorithm="auto").fit_predict(samples)
    labels = labels.astype(int)
    k = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    n = labels.shape[0]
    weights = np.array([np.sum(labels == c) / n for c in range(k)], dtype=float)
    logger.info("DBSCAN found %d clusters, %d noise points", k, int(np.sum(labels == NOISE)))
    return ClusterLabels(labels, k, weights)


# --------------------------------------------------------------------------- structure learning

class Independence(str, Enum):
    INDEPENDENT = "independent"
    DEPENDENT = "dependent"


def partial_correlation(data, i: int, j: int, conditioning: Sequence[int] = ()) -> float:
    """Correlation of columns i and j after regressing out the conditioning columns."""
    data = np.asarray(data, dtype=float)
    conditioning = list(conditioning)
    if i == j or i in conditioning or j in conditioning:
        raise ValueError("i, j must differ and lie outside the conditioning set")
    n = data.shape[0]
    if n <= len(conditioning) + 3:
        raise TooFewSamples(f"{n} samples are too few for a conditioning set of size {len(conditioning)}")
    x = data[:, i]
    y = data[:, j]
    if conditioning:
        design = np.column_stack([np.ones(n), data[:, conditioning]])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise SingularConditioning(f"conditioning columns {conditioning} are rank deficient")
        x = x - design @ np.linalg.lstsq(design, x, rcond=None)[0]
        y = y - design @ np.linalg.lstsq(design, y, rcond=None)[0]
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(x, y) / denom, -1.0, 1.0))


def ci_test(r: float, n: int, card_s: int, alpha: float = 0.05) -> Independence:
    """Fisher-z test of zero partial correlation at two-sided level alpha."""
    dof = n - card_s - 3
    if dof <= 0:
        raise TooFewSamples(f"n - |S| - 3 = {dof} must be positive")
    r = float(np.clip(r, -R_CLAMP, R_CLAMP))
    z = 0.5 * np.log((1.0 + r) / (1.0 - r))
    statistic = np.sqrt(dof) * abs(z)
    threshold = stats.norm.ppf(1.0 - alpha / 2.0)
    return Independence.INDEPENDENT if statistic < threshold else Independence.DEPENDENT


@dataclass(frozen=True, eq=False)
class DependencyGraph:
    graph: nx.Graph
    components: Tuple[Tuple[int, ...], ...]  # 1-based variable indices
    separating_sets: Dict[FrozenSet[int], Tuple[int, ...]]

    @property
    def d(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted(tuple(sorted(e)) for e in self.graph.edges())

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "edges": [[a, b] for a, b in self.edges],
            "components": [list(c) for c in self.components],
        }


def pc_skeleton(data, alpha: float = 0.05, max_cond: Optional[int] = None) -> DependencyGraph:
    """Skeleton phase of the PC algorithm; no edges are oriented.

    Adjacency sets are frozen at the start of every level so the result does not
    depend on the order edges are visited in. Conditioning sets are enumerated in
    lexicographic order.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    if d < 2:
        raise ValueError("structure learning needs at least two variables")
    max_cond = d - 2 if max_cond is None or max_cond < 0 else int(max_cond)

    graph = nx.complete_graph(range(1, d + 1))
    separating: Dict[FrozenSet[int], Tuple[int, ...]] = {}
    for level in range(max_cond + 1):
        adjacency = {v: sorted(graph.neighbors(v)) for v in graph.nodes}
        if all(len(adj) - 1 < level for adj in adjacency.values()):
            break
        for i, j in itertools.combinations(range(1, d + 1), 2):
            if not graph.has_edge(i, j):
                continue
            removed = False
            for source, target in ((i, j), (j, i)):
                candidates = [v for v in adjacency[source] if v != target]
                if len(candidates) < level:
                    continue
                for subset in itertools.combinations(candidates, level):
                    r = partial_correlation(data, source - 1, target - 1, [v - 1 for v in subset])
                    if ci_test(r, n, level, alpha) is Independence.INDEPENDENT:
                        graph.remove_edge(i, j)
                        separating[frozenset((i, j))] = subset
                        removed = True
                        break
                if removed:
                    break
        logger.debug("PC level %d: %d edges remain", level, graph.number_of_edges())

    components = tuple(
        sorted((tuple(sorted(c)) for c in nx.connected_components(graph)), key=lambda c: c[0])
    )
    logger.info("structure learning found %d component(s): %s", len(components), components)
    return DependencyGraph(graph, components, separating)


# --------------------------------------------------------------------------- recombination

Density = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class MixtureDensity:
    """g(x) = sum_i w_i e_i(x)."""

    parts: Tuple[Tuple[float, Expression], ...]

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        total = np.zeros(points.shape[0])
        for weight, e in self.parts:
            total = total + weight * evaluate_batch(e, points)
        return total

    @property
    def expression(self) -> Expression:
        root: Optional[Node] = None
        for weight, e in self.parts:
            term = binary(Op.MUL, const(weight), e.root)
            root = term if root is None else binary(Op.ADD, root, term)
        return Expression(root, self.parts[0][1].var_count)

    def __str__(self) -> str:
        return to_string(self.expression)


@dataclass(frozen=True, eq=False)
class ProductDensity:
    """g(x) = prod_i e_i(x restricted to block i)."""

    parts: Tuple[Tuple[Tuple[int, ...], Expression], ...]
    d: int

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        total = np.ones(points.shape[0])
        for block, e in self.parts:
            total = total * evaluate_batch(e, points[:, [v - 1 for v in block]])
        return total

    @property
    def expression(self) -> Expression:
        root: Optional[Node] = None
        for block, e in self.parts:
            term = reindex(e, block, self.d).root
            root = term if root is None else binary(Op.MUL, root, term)
        return Expression(root, self.d)

    def __str__(self) -> str:
        return to_string(self.expression)


def recombine_additive(parts: Sequence[Tuple[float, Expression]]) -> MixtureDensity:
    if not parts:
        raise WeightMismatch("no parts to combine")
    weights = np.array([w for w, _ in parts], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise WeightMismatch(f"weights must be non-negative and sum to 1, got {weights.tolist()}")
    if len({e.var_count for _, e in parts}) != 1:
        raise WeightMismatch("all parts must share the same dimensionality")
    return MixtureDensity(tuple((float(w), e) for w, e in parts))


def recombine_multiplicative(parts: Sequence[Tuple[Sequence[int], Expression]]) -> ProductDensity:
    blocks = [tuple(int(v) for v in block) for block, _ in parts]
    flat = [v for block in blocks for v in block]
    d = len(flat)
    if sorted(flat) != list(range(1, d + 1)):
        raise PartitionError(f"blocks {blocks} do not partition x1..x{d}")
    for block, (_, e) in zip(blocks, parts):
        if e.var_count != len(block):
            raise PartitionError(f"expression over {e.var_count} variables given for block {block}")
    return ProductDensity(tuple((block, e) for block, (_, e) in zip(blocks, parts)), d)


def renormalize_weights(weights: Sequence[float]) -> List[float]:
    """Cluster weights exclude noise mass; rescale them to sum to 1 for recombination."""
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if total <= 0:
        raise WeightMismatch("cluster weights sum to zero")
    return (weights / total).tolist()


def assign_to_clusters(samples, clusters: ClusterLabels, points) -> np.ndarray:
    """Label new points with the cluster of their nearest clustered sample."""
    samples = np.asarray(samples, dtype=float)
    points = np.asarray(points, dtype=float)
    clustered = np.flatnonzero(clusters.labels != NOISE)
    if clustered.size == 0 or points.shape[0] == 0:
        return np.full(points.shape[0], NOISE, dtype=int)
    index = NearestNeighbors(n_neighbors=1).fit(samples[clustered])
    _, nearest = index.kneighbors(points)
    return clusters.labels[clustered[nearest[:, 0]]]
