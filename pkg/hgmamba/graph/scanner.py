"""
Hypergraph scanning & flattening

Converts a hypergraph into M ordered node sequences (H-DFS and H-ARW traversals), padded to N,
with the node → (sequence, position) membership index used by the token aggregation.
"""
import dataclasses
import math
from typing import List, Optional, Tuple

import numpy as np

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import StructuralError
from hgmamba.common.numkit import make_rng
from hgmamba.common.utils import assert_debug
from hgmamba.graph.hypergraph import Hypergraph

PADDING = -1
SCAN_STRATEGIES = ("both", "hdfs", "harw", "random")


@dataclasses.dataclass
class ScanSequence:
    """
    A node order of length N: a valid prefix followed by padding (`order` = -1, `valid` = False)

    For H-DFS sequences, `parents[p]` is the node whose expansion pushed the node at position p
    (-1 for the roots) and `restarts` lists the positions where a new root was drawn.
    """
    order: np.ndarray
    valid: np.ndarray
    strategy: str
    parents: Optional[np.ndarray] = None
    restarts: List[int] = dataclasses.field(default_factory=list)

    @property
    def length(self) -> int:
        return int(self.valid.sum())

    @property
    def nodes(self) -> np.ndarray:
        """The valid prefix of the order"""
        return self.order[:self.length]

    def validate(self):
        n_valid = self.length
        if n_valid < 1:
            raise StructuralError("A scan sequence needs at least one valid token")
        if not np.all(self.valid[:n_valid]) or np.any(self.valid[n_valid:]):
            raise StructuralError("Padding must be a contiguous suffix")
        if np.any(self.order[n_valid:] != PADDING):
            raise StructuralError("Padding positions must hold -1")
        if np.unique(self.nodes).shape[0] != n_valid:
            raise StructuralError("A node appears twice in the valid prefix of a sequence")


def _padded(nodes: List[int], n_nodes: int, strategy: str, parents: Optional[List[int]] = None,
             restarts: Optional[List[int]] = None) -> ScanSequence:
    order = np.full(n_nodes, PADDING, dtype=np.int64)
    order[:len(nodes)] = nodes
    valid = np.zeros(n_nodes, dtype=bool)
    valid[:len(nodes)] = True
    parent_array = None
    if parents is not None:
        parent_array = np.full(n_nodes, PADDING, dtype=np.int64)
        parent_array[:len(parents)] = parents
    return ScanSequence(order, valid, strategy, parent_array, list(restarts or []))


# ----------------------------------------------------------------------------------------------------------------------
def h_dfs(hg: Hypergraph, rng: np.random.Generator, root: Optional[int] = None) -> ScanSequence:
    """
    Hypergraph depth-first search

    Expanding a node pushes all the unvisited members of its incident hyperedges in a shuffled order.
    When the stack empties before every node is visited, the traversal restarts from a random unvisited
    node, so the sequence always covers the N nodes.
    """
    n = hg.n_nodes
    assert_debug(n >= 1)
    visited = np.zeros(n, dtype=bool)
    order, parents, restarts = [], [], []
    current_root = int(rng.integers(n)) if root is None else int(root)
    while True:
        restarts.append(len(order))
        stack = [(current_root, PADDING)]
        while stack:
            node, parent = stack.pop()
            if visited[node]:
                continue
            visited[node] = True
            order.append(node)
            parents.append(parent)
            neighbors = hg.neighbors[node]
            candidates = neighbors[~visited[neighbors]]
            if candidates.shape[0] > 0:
                stack.extend((int(u), node) for u in rng.permutation(candidates))
        if len(order) == n:
            break
        remaining = np.flatnonzero(~visited)
        current_root = int(remaining[rng.integers(remaining.shape[0])])
    return _padded(order, n, "hdfs", parents, restarts)


def h_arw(hg: Hypergraph, rng: np.random.Generator, t_len: int, root: Optional[int] = None) -> ScanSequence:
    """
    Hypergraph acyclic random walk of at most `t_len` nodes

    The walk moves to a uniformly drawn unvisited node sharing a hyperedge with the current node,
    and stops at `t_len` nodes or when no such node exists. The rest of the sequence is padding.
    """
    n = hg.n_nodes
    assert_debug(1 <= t_len <= n, f"The walk length {t_len} must be in [1, {n}]")
    visited = np.zeros(n, dtype=bool)
    current = int(rng.integers(n)) if root is None else int(root)
    visited[current] = True
    walk = [current]
    while len(walk) < t_len:
        neighbors = hg.neighbors[current]
        candidates = neighbors[~visited[neighbors]]
        if candidates.shape[0] == 0:
            break
        current = int(candidates[rng.integers(candidates.shape[0])])
        visited[current] = True
        walk.append(current)
    return _padded(walk, n, "harw")


def random_scan(hg: Hypergraph, rng: np.random.Generator) -> ScanSequence:
    """Uniform node shuffle, the structure-free baseline of the scanning ablation"""
    return _padded(rng.permutation(hg.n_nodes).tolist(), hg.n_nodes, "random")


def walk_length(n_nodes: int, t_ratio: float) -> int:
    """T = ceil(t_ratio · N), clamped to [1, N]"""
    assert_debug(0.0 < t_ratio <= 1.0, f"t_ratio={t_ratio} must lie in (0, 1]")
    # Rounding protects products such as 0.7 * 10 = 7.000000000000001
    return int(min(n_nodes, max(1, math.ceil(round(t_ratio * n_nodes, 9)))))


# ----------------------------------------------------------------------------------------------------------------------
@dataclasses.dataclass
class ScanSet:
    """
    M scan sequences, and for every node t the list of (sequence m, position p) where t is a valid token
    """
    sequences: List[ScanSequence]
    membership: List[List[Tuple[int, int]]]

    @property
    def n_nodes(self) -> int:
        return len(self.membership)

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(entries) for entries in self.membership], dtype=np.int64)

    @property
    def total_tokens(self) -> int:
        return int(sum(sequence.length for sequence in self.sequences))

    def validate(self):
        for sequence in self.sequences:
            sequence.validate()
        if build_membership(self.sequences, self.n_nodes) != self.membership:
            raise StructuralError("The membership index is inconsistent with the sequences")


def build_membership(sequences: List[ScanSequence], n_nodes: int) -> List[List[Tuple[int, int]]]:
    membership = [[] for _ in range(n_nodes)]
    for m, sequence in enumerate(sequences):
        for p, node in enumerate(sequence.nodes):
            membership[int(node)].append((m, p))
    return membership


def strategy_split(m: int, strategy: str = "both") -> List[str]:
    """The traversal strategy of each of the M sequences: ceil(M/2) H-DFS then floor(M/2) H-ARW for `both`"""
    assert_debug(m >= 1, "At least one scan sequence is required")
    assert_debug(strategy in SCAN_STRATEGIES, f"Unknown scan strategy `{strategy}`")
    if strategy == "both":
        n_dfs = (m + 1) // 2
        return ["hdfs"] * n_dfs + ["harw"] * (m - n_dfs)
    return [strategy] * m


def build_scan_set(hg: Hypergraph, m: int, rng: np.random.Generator, t_ratio: float = 0.7,
                   strategy: str = "both") -> ScanSet:
    """Generates M sequences, each with its own sub-seed drawn from `rng`, and their membership index"""
    strategies = strategy_split(m, strategy)
    sub_seeds = rng.integers(0, np.iinfo(np.int64).max, size=len(strategies))
    t_len = walk_length(hg.n_nodes, t_ratio)

    sequences = []
    for name, seed in zip(strategies, sub_seeds):
        sequence_rng = make_rng(int(seed))
        if name == "hdfs":
            sequences.append(h_dfs(hg, sequence_rng))
        elif name == "harw":
            sequences.append(h_arw(hg, sequence_rng, t_len))
        else:
            sequences.append(random_scan(hg, sequence_rng))
    scan_set = ScanSet(sequences, build_membership(sequences, hg.n_nodes))
    flops.record("scan_generation", flops.scan_generation_flops(scan_set.total_tokens))
    return scan_set
