"""
Construction of the WSI hypergraph of a bag of tiles

The incidence structure is stored sparsely (the list of members of every hyperedge);
the dense incidence matrix H is only materialized for tests and small bags.
"""
import dataclasses
from enum import IntEnum
from functools import cached_property
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

# Project Imports
from hgmamba.common.errors import DimensionError, StructuralError, UsageError
from hgmamba.common.utils import assert_debug, check_tensor

MAX_DENSE_NODES = 4096
SIMILARITY_BLOCK_ROWS = 512


class EdgeKind(IntEnum):
    RULE = 0
    SIM = 1


# ----------------------------------------------------------------------------------------------------------------------
@dataclasses.dataclass
class TileBag:
    """
    A slide: the grid coordinates of N tiles, their feature matrix [N, d] and the slide label

    Row i of `features` belongs to the tile at `coords[i]`
    """
    id: str
    coords: np.ndarray
    features: np.ndarray
    label: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DimensionError(f"A bag needs a feature matrix [N>=1, d>=1], got {self.features.shape}")
        check_tensor(self.coords, [self.features.shape[0], 2])
        if np.unique(self.coords, axis=0).shape[0] != self.coords.shape[0]:
            raise StructuralError(f"Bag {self.id}: tile coordinates are not unique")

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ----------------------------------------------------------------------------------------------------------------------
@dataclasses.dataclass
class Incidence:
    """
    The hyperedges of a hypergraph over `n_nodes` nodes

    `hyperedges[e]` holds the member nodes of e, `kinds[e]` its EdgeKind and `weights[e]` the
    diagonal entry of W_e
    """
    n_nodes: int
    hyperedges: List[np.ndarray]
    kinds: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.hyperedges = [np.asarray(edge, dtype=np.int64) for edge in self.hyperedges]
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.hyperedges) == self.kinds.shape[0] == self.weights.shape[0]):
            raise StructuralError("hyperedges, kinds and weights must have the same length")

    @staticmethod
    def empty(n_nodes: int) -> "Incidence":
        return Incidence(n_nodes, [], np.zeros(0, dtype=np.int8), np.zeros(0))

    @property
    def n_edges(self) -> int:
        return len(self.hyperedges)

    @property
    def nnz(self) -> int:
        return int(sum(edge.shape[0] for edge in self.hyperedges))

    def validate(self, top_k: Optional[int] = None):
        """Checks the invariants of the incidence structure, raises a StructuralError on violation"""
        for e, edge in enumerate(self.hyperedges):
            if edge.shape[0] < 2 or np.unique(edge).shape[0] != edge.shape[0]:
                raise StructuralError(f"Hyperedge {e} needs at least 2 distinct members, got {edge.tolist()}")
            if np.any(edge < 0) or np.any(edge >= self.n_nodes):
                raise StructuralError(f"Hyperedge {e} has members out of [0, {self.n_nodes})")
            if self.kinds[e] == EdgeKind.RULE and edge.shape[0] != 2:
                raise StructuralError(f"Rule hyperedge {e} has {edge.shape[0]} members")
            if self.kinds[e] == EdgeKind.SIM and top_k is not None and edge.shape[0] > top_k + 1:
                raise StructuralError(f"Similarity hyperedge {e} has more than {top_k + 1} members")
        if np.any(self.weights <= 0.0):
            raise StructuralError("Hyperedge weights must be positive")

    def member_indices(self):
        """Returns the (node, edge) index pairs of the non zero entries of H"""
        if self.n_edges == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        nodes = np.concatenate(self.hyperedges)
        edges = np.repeat(np.arange(self.n_edges), [edge.shape[0] for edge in self.hyperedges])
        return nodes, edges

    def sparse(self) -> sp.csr_matrix:
        """The incidence matrix H [N, E] as a CSR matrix"""
        nodes, edges = self.member_indices()
        return sp.csr_matrix((np.ones(nodes.shape[0]), (nodes, edges)), shape=(self.n_nodes, self.n_edges))

    def dense(self) -> np.ndarray:
        return self.sparse().toarray()

    def select(self, mask: np.ndarray) -> "Incidence":
        """Returns the incidence restricted to the hyperedges selected by the boolean `mask`"""
        indices = np.flatnonzero(mask)
        return Incidence(self.n_nodes, [self.hyperedges[e] for e in indices], self.kinds[indices],
                         self.weights[indices])


# ----------------------------------------------------------------------------------------------------------------------
@dataclasses.dataclass
class Hypergraph:
    """An incidence structure with its node degrees d(v) = Σ_e w(e) h(v, e) and edge degrees δ(e) = |e|"""
    incidence: Incidence
    node_degrees: np.ndarray
    edge_degrees: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.incidence.n_nodes

    @property
    def n_edges(self) -> int:
        return self.incidence.n_edges

    @property
    def isolated(self) -> np.ndarray:
        """Boolean mask of the nodes which belong to no hyperedge"""
        return self.node_degrees <= 0.0

    @cached_property
    def inv_sqrt_node_degrees(self) -> np.ndarray:
        """D_v^{-1/2}, with 0 for isolated nodes"""
        inv = np.zeros_like(self.node_degrees)
        connected = ~self.isolated
        inv[connected] = 1.0 / np.sqrt(self.node_degrees[connected])
        return inv

    @cached_property
    def incidence_matrix(self) -> sp.csr_matrix:
        return self.incidence.sparse()

    @cached_property
    def incidence_matrix_t(self) -> sp.csr_matrix:
        return self.incidence_matrix.T.tocsr()

    @cached_property
    def node_edges(self) -> List[np.ndarray]:
        """For every node, the indices of its incident hyperedges (in increasing order)"""
        csr = self.incidence_matrix
        return [csr.indices[csr.indptr[v]:csr.indptr[v + 1]] for v in range(self.n_nodes)]

    @cached_property
    def neighbors(self) -> List[np.ndarray]:
        """For every node, the sorted distinct nodes sharing at least one hyperedge with it"""
        result = []
        for v in range(self.n_nodes):
            edges = self.node_edges[v]
            if edges.shape[0] == 0:
                result.append(np.zeros(0, dtype=np.int64))
                continue
            members = np.unique(np.concatenate([self.incidence.hyperedges[e] for e in edges]))
            result.append(members[members != v])
        return result

    def shares_edge(self, u: int, v: int) -> bool:
        return bool(np.intersect1d(self.node_edges[u], self.node_edges[v]).shape[0] > 0)


# ----------------------------------------------------------------------------------------------------------------------
# Rule based adjacency
def build_rule_adjacency(bag: TileBag) -> Incidence:
    """
    One 2-member hyperedge per pair of 4-neighbor tiles

    Edges are ordered by a row-major scan of the tiles: first all the right edges, then all the down
    edges. Each edge lists its members in increasing node order.
    """
    coords = bag.coords
    index = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}
    scan_order = np.lexsort((coords[:, 1], coords[:, 0]))

    edges = []
    for offset in ((0, 1), (1, 0)):
        for i in scan_order:
            r, c = int(coords[i, 0]), int(coords[i, 1])
            j = index.get((r + offset[0], c + offset[1]))
            if j is not None:
                edges.append(np.array(sorted((int(i), j)), dtype=np.int64))
    n_edges = len(edges)
    return Incidence(bag.n_tiles, edges, np.full(n_edges, EdgeKind.RULE, dtype=np.int8), np.ones(n_edges))


# ----------------------------------------------------------------------------------------------------------------------
# Similarity based adjacency
def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """x·y / (|x| |y|), or -inf if one of the vectors has a zero norm"""
    norm_x = np.linalg.norm(x)
    norm_y = np.linalg.norm(y)
    if norm_x == 0.0 or norm_y == 0.0:
        return -np.inf
    return float(np.dot(x, y) / (norm_x * norm_y))


def _normalized_rows(features: np.ndarray):
    norms = np.linalg.norm(features, axis=1)
    valid = norms > 0.0
    normalized = np.zeros_like(features)
    normalized[valid] = features[valid] / norms[valid, None]
    return normalized, valid


def build_similarity_hyperedges(bag: TileBag, k: int) -> Incidence:
    """
    One hyperedge per tile i with a non-zero feature vector: {i} ∪ its min(k, N_valid - 1) most
    cosine-similar tiles, with N_valid the number of non-zero tiles

    Zero-norm tiles have no cosine similarity: they get no similarity hyperedge and are never chosen
    as neighbors, so the incidence may hold fewer than N hyperedges (none when N_valid < 2).
    Ties are broken by the lower node index.
    The similarity matrix is computed by blocks of rows, it is never materialized entirely.
    """
    assert_debug(k >= 1, "The number of similar neighbors must be at least 1")
    n = bag.n_tiles
    normalized, valid = _normalized_rows(bag.features)
    k_eff = min(k, int(valid.sum()) - 1)
    if k_eff < 1:
        return Incidence.empty(n)

    edges = []
    for start in range(0, n, SIMILARITY_BLOCK_ROWS):
        stop = min(n, start + SIMILARITY_BLOCK_ROWS)
        # Negated similarities: the valid candidates ascending, then +inf (zero norm and the anchor itself)
        negated = -(normalized[start:stop] @ normalized.T)
        negated[:, ~valid] = np.inf
        rows = np.arange(stop - start)
        negated[rows, rows + start] = np.inf
        ranking = np.argsort(negated, axis=1, kind="stable")[:, :k_eff]
        for row in np.flatnonzero(valid[start:stop]):
            edges.append(np.concatenate([[start + row], ranking[row]]).astype(np.int64))
    return Incidence(n, edges, np.full(len(edges), EdgeKind.SIM, dtype=np.int8), np.ones(len(edges)))


# ----------------------------------------------------------------------------------------------------------------------
def unify(rule: Incidence, sim: Incidence) -> Incidence:
    """H = [H_rule, H_sim], without deduplication"""
    if rule.n_nodes != sim.n_nodes:
        raise StructuralError(f"Cannot unify incidences over {rule.n_nodes} and {sim.n_nodes} nodes")
    return Incidence(rule.n_nodes,
                     list(rule.hyperedges) + list(sim.hyperedges),
                     np.concatenate([rule.kinds, sim.kinds]),
                     np.concatenate([rule.weights, sim.weights]))


def compute_degrees(incidence: Incidence) -> Hypergraph:
    """
    Node degrees d(v) = Σ_e w(e) h(v, e) and edge degrees δ(e) = |e|

    Isolated nodes get a degree of 0, the normalization then treats them as pass-through nodes
    """
    nodes, edges = incidence.member_indices()
    node_degrees = np.bincount(nodes, weights=incidence.weights[edges], minlength=incidence.n_nodes) \
        if nodes.shape[0] > 0 else np.zeros(incidence.n_nodes)
    edge_degrees = np.array([edge.shape[0] for edge in incidence.hyperedges], dtype=np.float64)
    return Hypergraph(incidence, node_degrees.astype(np.float64), edge_degrees)


def restrict(hg: Hypergraph, kinds: Sequence[EdgeKind]) -> Hypergraph:
    """The sub-hypergraph made of the hyperedges of the given kinds, with recomputed degrees"""
    mask = np.isin(hg.incidence.kinds, np.asarray([int(kind) for kind in kinds], dtype=np.int8))
    return compute_degrees(hg.incidence.select(mask))


def reweight(incidence: Incidence, weights: np.ndarray) -> Hypergraph:
    """The same incidence with new hyperedge weights W_e, with recomputed degrees"""
    check_tensor(weights, [incidence.n_edges])
    if np.any(weights <= 0.0):
        raise StructuralError("Hyperedge weights must be positive")
    return compute_degrees(dataclasses.replace(incidence, weights=np.asarray(weights, dtype=np.float64)))


def build_hypergraph(bag: TileBag, top_k: int, mode: str = "hypergraph") -> Incidence:
    """
    Builds the incidence structure of a bag for a construction mode:
        - `hypergraph`: rule based edges followed by similarity hyperedges
        - `rule_only`: rule based edges only (pairwise graph)
        - `sim_only`: similarity hyperedges only
    """
    assert_debug(mode in ("hypergraph", "rule_only", "sim_only"), f"Unknown graph mode `{mode}`")
    if mode == "rule_only":
        return build_rule_adjacency(bag)
    if mode == "sim_only":
        return build_similarity_hyperedges(bag, top_k)
    return unify(build_rule_adjacency(bag), build_similarity_hyperedges(bag, top_k))


# ----------------------------------------------------------------------------------------------------------------------
# Propagation operator Θ = D_v^{-1/2} H W_e D_e^{-1} Hᵀ D_v^{-1/2}
def propagation_matrix(hg: Hypergraph) -> np.ndarray:
    """The dense propagation operator Θ [N, N] (only for small hypergraphs)"""
    if hg.n_nodes > MAX_DENSE_NODES:
        raise UsageError(f"Refusing to materialize Θ for {hg.n_nodes} > {MAX_DENSE_NODES} nodes")
    h = hg.incidence.dense()
    edge_scale = np.zeros(hg.n_edges)
    if hg.n_edges > 0:
        edge_scale = hg.incidence.weights / hg.edge_degrees
    dv = hg.inv_sqrt_node_degrees
    return (dv[:, None] * h * edge_scale[None, :]) @ (h.T * dv[None, :])


def apply_propagation(hg: Hypergraph, y: np.ndarray) -> np.ndarray:
    """Θ·Y computed with two sparse passes (node → hyperedge mean, hyperedge → node)"""
    check_tensor(y, [hg.n_nodes, -1])
    if hg.n_edges == 0:
        return np.zeros_like(y)
    dv = hg.inv_sqrt_node_degrees[:, None]
    edge_means = (hg.incidence_matrix_t @ (dv * y)) / hg.edge_degrees[:, None]
    return dv * (hg.incidence_matrix @ (hg.incidence.weights[:, None] * edge_means))
