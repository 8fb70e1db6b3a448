"""
HGMamba block: message passing, scanning & flattening, Bi-SSM and token aggregation
"""
import dataclasses
from typing import List, Optional, Tuple

import numpy as np

# Project Imports
from hgmamba.common.errors import DimensionError, UsageError
from hgmamba.common.numkit import ParamGroup
from hgmamba.graph.hypergraph import EdgeKind, Hypergraph
from hgmamba.graph.scanner import ScanSet
from hgmamba.models.bissm import (BiSSMCache, BiSSMParams, aggregate_backward, aggregate_tokens, bi_ssm_backward,
                                  bi_ssm_forward, init_bi_ssm)
from hgmamba.models.hgconv import HGConvCache, HGConvParams, hgconv_backward, hgconv_forward, init_hgconv_weight

N_EDGE_KINDS = len(EdgeKind)
MIN_EDGE_WEIGHT = 1.e-3


@dataclasses.dataclass
class BlockOptions:
    mode: str = "hypergraph"
    residual_variant: str = "input"
    bidirectional: bool = True
    use_ssm: bool = True
    use_hgconv: bool = True


@dataclasses.dataclass
class BlockParams(ParamGroup):
    """
    The hypergraph convolution weight, one hyperedge weight per edge kind, and the Bi-SSM

    A block without convolution holds None for `weight` and `kind_weights` (absent from `named_arrays`).
    """
    weight: Optional[np.ndarray]
    kind_weights: Optional[np.ndarray]
    bissm: BiSSMParams

    @property
    def has_hgconv(self) -> bool:
        return self.weight is not None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0] if self.has_hgconv else self.bissm.merge_weight.shape[0]

    def hgconv_params(self, hg: Hypergraph) -> HGConvParams:
        if not self.has_hgconv:
            raise UsageError("The block has no hypergraph convolution")
        return HGConvParams(self.weight, self.kind_weights[hg.incidence.kinds.astype(np.int64)])

    def clamp_edge_weights(self):
        if self.has_hgconv:
            np.maximum(self.kind_weights, MIN_EDGE_WEIGHT, out=self.kind_weights)


def init_block(rng: np.random.Generator, d_in: int, d: int, d_state: int, conv_width: int,
               use_hgconv: bool = True) -> BlockParams:
    if not use_hgconv:
        if d_in != d:
            raise DimensionError(f"A block without convolution keeps its width, got d_in={d_in} and d={d}")
        return BlockParams(None, None, init_bi_ssm(rng, d, d_state, conv_width))
    return BlockParams(init_hgconv_weight(rng, d_in, d), np.ones(N_EDGE_KINDS),
                       init_bi_ssm(rng, d, d_state, conv_width))


@dataclasses.dataclass
class BlockCache:
    params: BlockParams
    kinds: np.ndarray
    hgconv: Optional[HGConvCache]
    scan: Optional[ScanSet]
    sequences: List[BiSSMCache]


def gather_sequence(x: np.ndarray, scan: ScanSet, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flattens the node features along the m-th scan sequence: (sequence [N, d], valid mask)"""
    sequence = scan.sequences[m]
    seq = np.zeros_like(x)
    seq[:sequence.length] = x[sequence.nodes]
    return seq, sequence.valid


def hgmamba_block_forward(hg: Hypergraph, x: np.ndarray, params: BlockParams, scan: Optional[ScanSet],
                          options: BlockOptions = BlockOptions()) -> Tuple[np.ndarray, BlockCache]:
    """
    x₁ = hgconv(hg, x), every scan sequence of x₁ goes through the Bi-SSM, and the tokens are averaged
    back per node (nodes without tokens keep their x₁ row).
    With `use_ssm=False` the block is the hypergraph convolution alone and `scan` may be None.
    With `use_hgconv=False` x₁ = x, and the hypergraph only enters through the scan set.
    """
    if options.use_hgconv != params.has_hgconv:
        raise UsageError(f"Block options use_hgconv={options.use_hgconv} do not match the block parameters")
    if options.use_hgconv:
        x1, hgconv_cache = hgconv_forward(hg, x, params.hgconv_params(hg), options.mode)
    else:
        x1, hgconv_cache = x, None
    cache = BlockCache(params, hg.incidence.kinds.astype(np.int64), hgconv_cache, scan, [])
    if not options.use_ssm:
        return x1, cache
    if scan is None:
        raise UsageError("The Bi-SSM path of the block requires a scan set")

    outputs = []
    for m in range(scan.n_sequences):
        seq, valid = gather_sequence(x1, scan, m)
        out, sequence_cache = bi_ssm_forward(seq, valid, params.bissm, options.residual_variant,
                                             options.bidirectional)
        outputs.append(out)
        cache.sequences.append(sequence_cache)
    return aggregate_tokens(outputs, scan, x1), cache


def block_backward(cache: Optional[BlockCache], grad_out: np.ndarray) -> Tuple[np.ndarray, BlockParams]:
    if cache is None:
        raise UsageError("block_backward requires the cache of a forward pass")
    bissm_grads = None
    if cache.sequences:
        grad_outputs, grad_x1 = aggregate_backward(cache.scan, grad_out)
        for m, (sequence, sequence_cache) in enumerate(zip(cache.scan.sequences, cache.sequences)):
            grad_seq, grads = bi_ssm_backward(sequence_cache, grad_outputs[m])
            grad_x1[sequence.nodes] += grad_seq[:sequence.length]
            bissm_grads = grads if bissm_grads is None else bissm_grads.add_(grads)
    else:
        grad_x1 = grad_out

    if bissm_grads is None:
        bissm_grads = cache.params.bissm.zeros_like()
    if cache.hgconv is None:
        return grad_x1, BlockParams(None, None, bissm_grads)

    grad_x, hgconv_grads = hgconv_backward(cache.hgconv, grad_x1)
    grad_kind_weights = np.bincount(cache.kinds, weights=hgconv_grads.edge_weights, minlength=N_EDGE_KINDS)
    return grad_x, BlockParams(hgconv_grads.weight, grad_kind_weights.astype(np.float64), bissm_grads)
