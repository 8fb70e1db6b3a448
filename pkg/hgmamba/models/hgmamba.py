"""
The HGMamba network: L stacked HGMamba blocks followed by the MIL head
"""
import dataclasses
from typing import List, Optional, Tuple

import numpy as np

# Hydra and OmegaConf
from hydra.conf import dataclass

# Project Imports
from hgmamba.common.errors import ConfigError, DimensionError
from hgmamba.common.numkit import ParamGroup, make_rng
from hgmamba.graph.hypergraph import Hypergraph, TileBag, build_hypergraph, compute_degrees
from hgmamba.graph.scanner import SCAN_STRATEGIES, ScanSet, build_scan_set
from hgmamba.models.bissm import RESIDUAL_VARIANTS
from hgmamba.models.block import BlockCache, BlockOptions, BlockParams, block_backward, hgmamba_block_forward, \
    init_block
from hgmamba.models.hgconv import GRAPH_MODES
from hgmamba.models.milhead import (POOLINGS, ABMILParams, PoolCache, abmil_pool, classify, classify_backward,
                                    cross_entropy, init_abmil, mean_pool, pool_backward)


@dataclass
class ModelConfig:
    """The configuration of the HGMamba network"""
    in_dim: int = 32  # Dimension of the tile features
    d: int = 32  # Width of the blocks
    n_layers: int = 2
    d_state: int = 16
    m_sequences: int = 8
    top_k: int = 3
    t_ratio: float = 0.7  # H-ARW length T = ceil(t_ratio · N)
    conv_width: int = 4
    mode: str = "hypergraph"  # hypergraph | rule_only | sim_only
    n_classes: int = 2
    residual_variant: str = "input"  # input | branches
    scan_strategy: str = "both"  # both | hdfs | harw | random
    bidirectional: bool = True
    use_ssm: bool = True
    use_hgconv: bool = True  # False replaces the hypergraph convolution by the identity
    pooling: str = "abmil"  # abmil | mean
    attention_hidden: int = 128


def validate_model_config(cfg: ModelConfig):
    """Raises a ConfigError for any out of range field"""
    for name in ("in_dim", "d", "d_state", "m_sequences", "top_k", "conv_width", "attention_hidden"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"model.{name}={getattr(cfg, name)} must be ≥ 1")
    if cfg.n_layers < 0:
        raise ConfigError(f"model.n_layers={cfg.n_layers} must be ≥ 0")
    if cfg.n_classes < 2:
        raise ConfigError(f"model.n_classes={cfg.n_classes} must be ≥ 2")
    if not (0.0 < cfg.t_ratio <= 1.0):
        raise ConfigError(f"model.t_ratio={cfg.t_ratio} must lie in (0, 1]")
    for name, allowed in (("mode", GRAPH_MODES), ("residual_variant", RESIDUAL_VARIANTS),
                          ("scan_strategy", SCAN_STRATEGIES), ("pooling", POOLINGS)):
        if getattr(cfg, name) not in allowed:
            raise ConfigError(f"model.{name}={getattr(cfg, name)} is not one of {allowed}")
    if not cfg.use_hgconv:
        if not cfg.use_ssm:
            raise ConfigError("model.use_hgconv and model.use_ssm cannot both be false")
        if cfg.n_layers > 0 and cfg.in_dim != cfg.d:
            raise ConfigError(f"model.use_hgconv=false keeps the feature width: in_dim={cfg.in_dim} must equal "
                              f"d={cfg.d}")


def block_options(cfg: ModelConfig) -> BlockOptions:
    return BlockOptions(cfg.mode, cfg.residual_variant, cfg.bidirectional, cfg.use_ssm, cfg.use_hgconv)


@dataclasses.dataclass
class ModelParams(ParamGroup):
    blocks: List[BlockParams]
    head: ABMILParams

    def clamp_edge_weights(self):
        for block in self.blocks:
            block.clamp_edge_weights()


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    validate_model_config(cfg)
    rng = make_rng(seed)
    blocks = []
    d_in = cfg.in_dim
    for _ in range(cfg.n_layers):
        blocks.append(init_block(rng, d_in, cfg.d, cfg.d_state, cfg.conv_width, cfg.use_hgconv))
        d_in = cfg.d
    head = init_abmil(rng, d_in, cfg.n_classes, cfg.attention_hidden)
    return ModelParams(blocks, head)


def build_structure(bag: TileBag, cfg: ModelConfig) -> Hypergraph:
    """The hypergraph of a bag for the construction mode of the model (unit hyperedge weights)"""
    return compute_degrees(build_hypergraph(bag, cfg.top_k, cfg.mode))


@dataclasses.dataclass
class ModelCache:
    blocks: List[BlockCache]
    scans: List[Optional[ScanSet]]
    pool: PoolCache
    bag_embedding: np.ndarray
    params: ModelParams


def model_forward(bag: TileBag, cfg: ModelConfig, params: ModelParams, rng: np.random.Generator,
                  hypergraph: Optional[Hypergraph] = None) -> Tuple[np.ndarray, np.ndarray, ModelCache]:
    """
    Builds the hypergraph of the bag (unless given), runs every block with a fresh scan set drawn
    from `rng`, pools the node embeddings and classifies the bag.

    Returns the logits [C], the attention over the tiles [N] and the cache for `model_backward`
    """
    expected_dim = params.blocks[0].in_dim if params.blocks else params.head.cls_weight.shape[0]
    if bag.dim != expected_dim:
        raise DimensionError(f"Bag `{bag.id}` has features of dimension {bag.dim}, the model expects {expected_dim}")
    hg = build_structure(bag, cfg) if hypergraph is None else hypergraph
    options = block_options(cfg)

    x = bag.features
    block_caches, scans = [], []
    for block in params.blocks:
        scan = build_scan_set(hg, cfg.m_sequences, rng, cfg.t_ratio, cfg.scan_strategy) if cfg.use_ssm else None
        x, block_cache = hgmamba_block_forward(hg, x, block, scan, options)
        block_caches.append(block_cache)
        scans.append(scan)

    if cfg.pooling == "abmil":
        bag_embedding, attention, pool_cache = abmil_pool(x, params.head)
    else:
        bag_embedding, attention, pool_cache = mean_pool(x)
    logits = classify(bag_embedding, params.head)
    return logits, attention, ModelCache(block_caches, scans, pool_cache, bag_embedding, params)


def model_backward(cache: ModelCache, grad_logits: np.ndarray) -> ModelParams:
    """Gradients of the logits (weighted by `grad_logits`) for every parameter group"""
    grad_bag, head_grads = classify_backward(cache.bag_embedding, grad_logits, cache.params.head)
    grad_x, pool_grads = pool_backward(cache.pool, grad_bag, cache.params.head)
    head_grads.add_(pool_grads)

    block_grads = []
    for block_cache in reversed(cache.blocks):
        grad_x, grads = block_backward(block_cache, grad_x)
        block_grads.append(grads)
    return ModelParams(block_grads[::-1], head_grads)


def loss_and_gradients(bag: TileBag, cfg: ModelConfig, params: ModelParams, rng: np.random.Generator,
                       hypergraph: Optional[Hypergraph] = None) -> Tuple[float, np.ndarray, ModelParams]:
    """Cross-entropy of the bag and its gradient for every parameter"""
    logits, _, cache = model_forward(bag, cfg, params, rng, hypergraph)
    loss, grad_logits = cross_entropy(logits, bag.label)
    return loss, logits, model_backward(cache, grad_logits)
