"""
Hypergraph convolution X' = σ(D_v^{-1/2} H W_e D_e^{-1} Hᵀ D_v^{-1/2} X W)

The propagation is applied with two sparse passes (node → hyperedge mean, hyperedge → node),
Θ is never materialized.
"""
import dataclasses
from typing import Optional, Tuple

import numpy as np

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import DimensionError, NumericalError, UsageError
from hgmamba.common.numkit import ParamGroup, fan_uniform, matmul, relu
from hgmamba.common.utils import assert_debug, check_tensor
from hgmamba.graph.hypergraph import EdgeKind, Hypergraph, restrict, reweight

GRAPH_MODES = ("hypergraph", "rule_only", "sim_only")
MODE_KINDS = {
    "hypergraph": (EdgeKind.RULE, EdgeKind.SIM),
    "rule_only": (EdgeKind.RULE,),
    "sim_only": (EdgeKind.SIM,),
}


@dataclasses.dataclass
class HGConvParams(ParamGroup):
    """W^{(l-1)} [d_in, d_out] and the diagonal of W_e, one positive weight per hyperedge"""
    weight: np.ndarray
    edge_weights: np.ndarray


@dataclasses.dataclass
class HGConvCache:
    structure: Hypergraph
    edge_selection: np.ndarray
    n_edges: int
    x: np.ndarray
    weight: np.ndarray
    pre_activation: np.ndarray
    edge_means: np.ndarray


def init_hgconv_weight(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return fan_uniform(rng, d_in, d_out)


def _select_structure(hg: Hypergraph, edge_weights: np.ndarray, mode: str) -> Tuple[Hypergraph, np.ndarray]:
    """The hyperedges used by `mode`, weighted by `edge_weights`, with degrees recomputed when needed"""
    assert_debug(mode in GRAPH_MODES, f"Unknown graph mode `{mode}`")
    kinds = np.asarray([int(kind) for kind in MODE_KINDS[mode]], dtype=np.int8)
    mask = np.isin(hg.incidence.kinds, kinds)
    selection = np.flatnonzero(mask)
    if np.array_equal(edge_weights, hg.incidence.weights):
        if selection.shape[0] == hg.n_edges:
            return hg, selection
        return restrict(hg, MODE_KINDS[mode]), selection
    return reweight(hg.incidence.select(mask), edge_weights[selection]), selection


def hgconv_forward(hg: Hypergraph, x: np.ndarray, p: HGConvParams,
                   mode: str = "hypergraph") -> Tuple[np.ndarray, HGConvCache]:
    """
    Applies the hypergraph convolution to the node features `x` [N, d_in]

    In `rule_only` mode (resp. `sim_only`) only the rule (resp. similarity) hyperedges are used,
    and the node degrees are computed over these hyperedges.
    Isolated nodes have a zero row in Θ, they pass their own features through: σ(x_v W).

    Returns the output [N, d_out] and the cache for `hgconv_backward`
    """
    check_tensor(x, [hg.n_nodes, -1])
    if x.shape[1] != p.weight.shape[0]:
        raise DimensionError(f"Features of dimension {x.shape[1]} for a weight of shape {p.weight.shape}")
    check_tensor(p.edge_weights, [hg.n_edges])
    if np.any(np.isnan(x)):
        raise NumericalError("NaN in the input of the hypergraph convolution")

    structure, selection = _select_structure(hg, p.edge_weights, mode)
    y = matmul(x, p.weight)
    dv = structure.inv_sqrt_node_degrees[:, None]
    if structure.n_edges > 0:
        edge_means = (structure.incidence_matrix_t @ (dv * y)) / structure.edge_degrees[:, None]
        pre = dv * (structure.incidence_matrix @ (structure.incidence.weights[:, None] * edge_means))
    else:
        edge_means = np.zeros((0, y.shape[1]))
        pre = np.zeros_like(y)
    isolated = structure.isolated
    pre[isolated] = y[isolated]

    flops.record("hgconv", flops.hgconv_flops(hg.n_nodes, structure.n_edges, structure.incidence.nnz,
                                              x.shape[1], p.weight.shape[1]))
    cache = HGConvCache(structure, selection, hg.n_edges, x, p.weight, pre, edge_means)
    return relu(pre), cache


def hgconv_backward(cache: Optional[HGConvCache], grad_out: np.ndarray) -> Tuple[np.ndarray, HGConvParams]:
    """
    Gradients of the hypergraph convolution with respect to x, W and the hyperedge weights

    The node degrees are treated as constants (they depend on the hyperedge weights, but are only
    refreshed between optimizer steps). Hyperedges unused by the forward mode get a zero gradient.
    """
    if cache is None:
        raise UsageError("hgconv_backward requires the cache of a forward pass")
    check_tensor(grad_out, list(cache.pre_activation.shape))
    structure = cache.structure
    grad_pre = grad_out * (cache.pre_activation > 0.0)

    dv = structure.inv_sqrt_node_degrees[:, None]
    grad_edge_weights = np.zeros(cache.n_edges)
    if structure.n_edges > 0:
        # Θ is symmetric
        scattered = structure.incidence_matrix_t @ (dv * grad_pre)
        grad_edge_weights[cache.edge_selection] = (scattered * cache.edge_means).sum(axis=1)
        edge_grads = structure.incidence.weights[:, None] * scattered / structure.edge_degrees[:, None]
        grad_y = dv * (structure.incidence_matrix @ edge_grads)
    else:
        grad_y = np.zeros_like(grad_pre)
    isolated = structure.isolated
    grad_y[isolated] += grad_pre[isolated]

    grad_weight = cache.x.T @ grad_y
    grad_x = grad_y @ cache.weight.T
    return grad_x, HGConvParams(grad_weight, grad_edge_weights)
