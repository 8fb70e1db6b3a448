"""
Analytic FLOPs and memory accounting of the HGMamba network, and of a self-attention comparator

The FLOPs use the counting rules of `hgmamba.common.flops`, which the kernels record at run time:
for the structure of an actual bag the analytic count equals the instrumented counters exactly.
"""
import dataclasses
import math
from collections import OrderedDict
from typing import Dict, List

import numpy as np

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import UsageError
from hgmamba.common.numkit import make_rng
from hgmamba.graph.hypergraph import TileBag
from hgmamba.graph.scanner import build_scan_set, strategy_split, walk_length
from hgmamba.models.hgmamba import ModelConfig, ModelParams, build_structure, model_forward, validate_model_config

FLOAT_BYTES = 8


@dataclasses.dataclass
class StructureStats:
    """
    The structure quantities the cost of a forward pass depends on

    `sequence_lengths[l]` lists the valid lengths of the scan sequences of layer l.
    """
    n_nodes: int
    n_edges: int
    nnz: int
    sequence_lengths: List[List[int]]

    @staticmethod
    def from_bag(bag: TileBag, cfg: ModelConfig, rng: np.random.Generator) -> "StructureStats":
        """The exact structure of a forward pass of `bag`, drawing the scan sets from `rng` like `model_forward`"""
        hg = build_structure(bag, cfg)
        lengths = []
        if cfg.use_ssm:
            for _ in range(cfg.n_layers):
                scan = build_scan_set(hg, cfg.m_sequences, rng, cfg.t_ratio, cfg.scan_strategy)
                lengths.append([sequence.length for sequence in scan.sequences])
        return StructureStats(hg.n_nodes, hg.n_edges, hg.incidence.nnz, lengths)

    @staticmethod
    def estimate(n: int, cfg: ModelConfig) -> "StructureStats":
        """
        Estimated structure of a bag of N tiles with non-zero features on a grid: 2N rule edges, N similarity
        hyperedges of K+1 members, full length H-DFS (and random) sequences and H-ARW walks of their full length T
        """
        if n < 1:
            raise UsageError("The cost model needs at least one tile")
        k_eff = min(cfg.top_k, n - 1)
        n_rule = 2 * n if cfg.mode != "sim_only" else 0
        n_sim = n if (cfg.mode != "rule_only" and n > 1) else 0
        nnz = 2 * n_rule + (k_eff + 1) * n_sim
        t_len = walk_length(n, cfg.t_ratio)
        per_layer = [t_len if strategy == "harw" else n for strategy in strategy_split(cfg.m_sequences,
                                                                                        cfg.scan_strategy)]
        lengths = [list(per_layer) for _ in range(cfg.n_layers)] if cfg.use_ssm else []
        return StructureStats(n, n_rule + n_sim, nnz, lengths)


@dataclasses.dataclass
class CostReport:
    config: Dict[str, object]
    n_nodes: int
    components: Dict[str, int]
    parameter_bytes: int
    activation_bytes: int
    attention_flops: int
    attention_activation_bytes: int

    @property
    def total_flops(self) -> int:
        return int(sum(self.components.values()))

    @property
    def attention_ratio(self) -> float:
        """FLOPs of the attention comparator over the FLOPs of the HGMamba network"""
        return self.attention_flops / self.total_flops


# ----------------------------------------------------------------------------------------------------------------------
def parameter_count(cfg: ModelConfig) -> int:
    """Number of learnable scalars of the network"""
    d, s, w = cfg.d, cfg.d_state, cfg.conv_width
    ssm = 3 * d * s + 2 * s + 4 * d + d * w
    bissm = 2 * ssm + d * d + d + 6 * d
    count = 0
    d_in = cfg.in_dim
    for _ in range(cfg.n_layers):
        count += (d_in * d + 2 if cfg.use_hgconv else 0) + bissm
        d_in = d
    h = cfg.attention_hidden
    return count + 2 * d_in * h + h + d_in * cfg.n_classes + cfg.n_classes


def activation_floats(cfg: ModelConfig, stats: StructureStats) -> int:
    """
    Floats held at the end of a forward pass that keeps its caches for the backward pass:
    the bag features, for every layer the convolution caches and for every sequence its padded input and
    output and the per token caches of the branches (including the d × d_state state history), then
    the pooling caches of the head
    """
    n, d, s = stats.n_nodes, cfg.d, cfg.d_state
    n_branches = 2 if cfg.bidirectional else 1
    total = n * cfg.in_dim
    for layer in range(cfg.n_layers):
        if cfg.use_hgconv:
            total += 2 * n * d + stats.n_edges * d
        if not cfg.use_ssm:
            continue
        for length in stats.sequence_lengths[layer]:
            branch = length * (5 * d + 2 * s + d * s + 1)
            total += 2 * n * d + n_branches * branch + length * (2 * d + 1)
        total += n * d
    d_last = cfg.d if cfg.n_layers > 0 else cfg.in_dim
    if cfg.pooling == "abmil":
        total += 2 * n * cfg.attention_hidden + n
    return total + d_last


def attention_cost(n: int, d: int, n_layers: int) -> int:
    """L·(8Nd² + 4N²d): QKV and output projections, score and value products"""
    if min(n, d, n_layers) < 1:
        raise UsageError(f"attention_cost needs N, d, L ≥ 1 (got {n}, {d}, {n_layers})")
    return flops.attention_flops(n, d, n_layers)


def attention_activation_floats(n: int, d: int, n_layers: int) -> int:
    """Q, K, V, output and the N × N score matrix of every layer"""
    return n_layers * (4 * n * d + n * n)


def cost_model(cfg: ModelConfig, stats: StructureStats) -> CostReport:
    """FLOPs per component, parameter and activation bytes of a forward pass over a structure"""
    validate_model_config(cfg)
    n, d = stats.n_nodes, cfg.d
    n_branches = 2 if cfg.bidirectional else 1
    n_terms = n_branches + (1 if cfg.residual_variant == "input" else 0)
    components = OrderedDict((component, 0) for component in flops.COMPONENTS)

    d_in = cfg.in_dim
    for layer in range(cfg.n_layers):
        if cfg.use_hgconv:
            components["hgconv"] += flops.hgconv_flops(n, stats.n_edges, stats.nnz, d_in, d)
        d_in = d
        if not cfg.use_ssm:
            continue
        lengths = stats.sequence_lengths[layer]
        components["scan_generation"] += flops.scan_generation_flops(sum(lengths))
        for length in lengths:
            components["conv1d"] += n_branches * flops.conv1d_flops(length, d, cfg.conv_width)
            components["selective_scan"] += n_branches * flops.selective_scan_flops(length, d, cfg.d_state)
            components["merge_norm"] += n_branches * flops.layer_norm_flops(length, d) \
                + flops.merge_flops(length, d, n_terms)
        components["aggregation"] += flops.aggregation_flops(sum(lengths), n, d)

    if cfg.pooling == "abmil":
        components["mil_head"] = flops.abmil_flops(n, d_in, cfg.attention_hidden, cfg.n_classes)
    else:
        components["mil_head"] = flops.mean_pool_flops(n, d_in, cfg.n_classes)

    n_layers = max(cfg.n_layers, 1)
    return CostReport(config=dataclasses.asdict(cfg),
                      n_nodes=n,
                      components=dict(components),
                      parameter_bytes=FLOAT_BYTES * parameter_count(cfg),
                      activation_bytes=FLOAT_BYTES * activation_floats(cfg, stats),
                      attention_flops=attention_cost(n, d, n_layers),
                      attention_activation_bytes=FLOAT_BYTES * attention_activation_floats(n, d, n_layers))


def bench(n_list: List[int], cfg: ModelConfig) -> List[CostReport]:
    """Cost reports over estimated grid structures, one per number of tiles"""
    return [cost_model(cfg, StructureStats.estimate(n, cfg)) for n in n_list]


def instrumented_flops(bag: TileBag, cfg: ModelConfig, params: ModelParams, seed: int) -> Dict[str, int]:
    """FLOPs recorded by the kernels during one forward pass (scan sets drawn from `seed`)"""
    with flops.count_flops() as counter:
        model_forward(bag, cfg, params, make_rng(seed))
    return {component: int(counter[component]) for component in flops.COMPONENTS}


def growth_ratio(costs: List[int]) -> List[float]:
    """Ratios cost(N_{i+1}) / cost(N_i) of consecutive entries"""
    return [b / a for a, b in zip(costs[:-1], costs[1:])] if costs else []


def format_bytes(n_bytes: int) -> str:
    return f"{n_bytes / math.pow(1024, 3):.4f} GiB"
