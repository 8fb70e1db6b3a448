"""
Finite difference verification of every hand written backward pass

Every check draws a random instance, contracts the output with a random tensor R (loss = Σ out ⊙ R),
and compares the analytic gradient of each input tensor with central differences.
Hyperedge weights are left out: their analytic gradient holds the node degrees constant.
"""
import dataclasses
from typing import Callable, Dict, List

import numpy as np

# Project Imports
from hgmamba.common.numkit import FD_STEP, finite_difference_gradient, make_rng, relative_error
from hgmamba.common.utils import assert_debug
from hgmamba.graph.hypergraph import TileBag, build_hypergraph, compute_degrees
from hgmamba.graph.scanner import build_scan_set
from hgmamba.models.bissm import (BiSSMParams, aggregate_backward, aggregate_tokens, bi_ssm_backward, bi_ssm_forward,
                                  conv_backward, conv_forward, init_bi_ssm, init_ssm, scan_backward, scan_forward)
from hgmamba.models.block import BlockOptions, block_backward, hgmamba_block_forward, init_block
from hgmamba.models.hgconv import HGConvParams, hgconv_backward, hgconv_forward, init_hgconv_weight
from hgmamba.models.hgmamba import ModelConfig, init_params, model_backward, model_forward
from hgmamba.models.milhead import abmil_pool, classify, classify_backward, cross_entropy, init_abmil, pool_backward

TOLERANCE = 1.e-4
CROSS_ENTROPY_TOLERANCE = 1.e-6


@dataclasses.dataclass
class GradCheckSize:
    grid: tuple
    d: int
    n_layers: int
    m_sequences: int
    d_state: int
    attention_hidden: int = 8


GRADCHECK_SIZES = {
    "tiny": GradCheckSize(grid=(2, 3), d=8, n_layers=1, m_sequences=2, d_state=4),
    "small": GradCheckSize(grid=(3, 4), d=8, n_layers=2, m_sequences=4, d_state=4),
}


@dataclasses.dataclass
class GradCheckResult:
    check: str
    tensor: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tolerance)


def compare_gradients(check: str, loss: Callable[[], float], tensors: Dict[str, np.ndarray],
                      analytic: Dict[str, np.ndarray], tolerance: float = TOLERANCE) -> List[GradCheckResult]:
    """Compares the analytic gradients with the finite differences of `loss`, which reads the tensors in place"""
    results = []
    for name, tensor in tensors.items():
        numeric = finite_difference_gradient(lambda _: loss(), tensor, FD_STEP)
        results.append(GradCheckResult(check, name, relative_error(analytic[name], numeric), tolerance))
    return results


def random_bag(rng: np.random.Generator, grid: tuple, d: int, label: int = 1) -> TileBag:
    rows, cols = grid
    r, c = np.divmod(np.arange(rows * cols), cols)
    return TileBag("gradcheck", np.stack([r, c], axis=1), rng.standard_normal((rows * cols, d)), label)


# ----------------------------------------------------------------------------------------------------------------------
# Component checks
def check_hgconv(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    bag = random_bag(rng, size.grid, size.d)
    hg = compute_degrees(build_hypergraph(bag, top_k=2))
    x = rng.standard_normal((bag.n_tiles, size.d))
    params = HGConvParams(init_hgconv_weight(rng, size.d, size.d), rng.uniform(0.5, 1.5, size=hg.n_edges))
    projection = rng.standard_normal((bag.n_tiles, size.d))

    def loss():
        return float(np.sum(hgconv_forward(hg, x, params)[0] * projection))

    _, cache = hgconv_forward(hg, x, params)
    grad_x, grads = hgconv_backward(cache, projection)
    return compare_gradients("hgconv", loss, {"x": x, "weight": params.weight},
                             {"x": grad_x, "weight": grads.weight})


def check_causal_conv(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    length = size.grid[0] * size.grid[1]
    x = rng.standard_normal((length, size.d))
    p = init_ssm(rng, size.d, size.d_state)
    projection = rng.standard_normal((length, size.d))

    def loss():
        return float(np.sum(conv_forward(x, p.conv_kernel, p.conv_bias)[0] * projection))

    _, cache = conv_forward(x, p.conv_kernel, p.conv_bias)
    grad_x, grad_kernel, grad_bias = conv_backward(cache, projection)
    return compare_gradients("causal_conv1d", loss, {"x": x, "conv_kernel": p.conv_kernel, "conv_bias": p.conv_bias},
                             {"x": grad_x, "conv_kernel": grad_kernel, "conv_bias": grad_bias})


def check_selective_scan(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    length = size.grid[0] * size.grid[1]
    x = rng.standard_normal((length, size.d))
    p = init_ssm(rng, size.d, size.d_state)
    # Larger steps than the initialization, so that the decay terms matter
    p.delta_bias[:] = rng.uniform(-1.0, 0.5, size=size.d)
    projection = rng.standard_normal((length, size.d))

    def loss():
        return float(np.sum(scan_forward(x, p)[0] * projection))

    _, cache = scan_forward(x, p)
    grad_x, grads = scan_backward(cache, projection)
    names = ["a_log", "delta_weight", "delta_bias", "b_weight", "b_bias", "c_weight", "c_bias", "d_skip"]
    tensors = {"x": x, **{name: getattr(p, name) for name in names}}
    analytic = {"x": grad_x, **{name: getattr(grads, name) for name in names}}
    return compare_gradients("selective_scan", loss, tensors, analytic)


def check_bi_ssm(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    n = size.grid[0] * size.grid[1]
    length = max(1, n - 2)
    seq = np.zeros((n, size.d))
    seq[:length] = rng.standard_normal((length, size.d))
    valid = np.arange(n) < length
    p: BiSSMParams = init_bi_ssm(rng, size.d, size.d_state)
    projection = rng.standard_normal((n, size.d))

    results = []
    for variant in ("input", "branches"):
        def loss():
            return float(np.sum(bi_ssm_forward(seq, valid, p, variant)[0] * projection))

        _, cache = bi_ssm_forward(seq, valid, p, variant)
        grad_seq, grads = bi_ssm_backward(cache, projection)
        tensors = {"seq": seq, **p.named_arrays()}
        analytic = {"seq": grad_seq, **grads.named_arrays()}
        results += compare_gradients(f"bi_ssm[{variant}]", loss, tensors, analytic)
    return results


def check_aggregation(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    bag = random_bag(rng, size.grid, size.d)
    hg = compute_degrees(build_hypergraph(bag, top_k=2))
    scan = build_scan_set(hg, size.m_sequences, rng, t_ratio=0.5, strategy="harw")
    outputs = [rng.standard_normal((bag.n_tiles, size.d)) for _ in range(scan.n_sequences)]
    fallback = rng.standard_normal((bag.n_tiles, size.d))
    projection = rng.standard_normal((bag.n_tiles, size.d))

    def loss():
        return float(np.sum(aggregate_tokens(outputs, scan, fallback) * projection))

    grad_outputs, grad_fallback = aggregate_backward(scan, projection)
    tensors = {f"outputs.{m}": output for m, output in enumerate(outputs)}
    tensors["fallback"] = fallback
    analytic = {f"outputs.{m}": grad for m, grad in enumerate(grad_outputs)}
    analytic["fallback"] = grad_fallback
    return compare_gradients("aggregate_tokens", loss, tensors, analytic)


def check_block(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    bag = random_bag(rng, size.grid, size.d)
    hg = compute_degrees(build_hypergraph(bag, top_k=2))
    scan = build_scan_set(hg, size.m_sequences, rng)
    x = bag.features.copy()
    params = init_block(rng, size.d, size.d, size.d_state, 4)
    projection = rng.standard_normal((bag.n_tiles, size.d))

    results = []
    for options in (BlockOptions(), BlockOptions(bidirectional=False, residual_variant="branches"),
                    BlockOptions(mode="rule_only", use_ssm=False)):
        def loss():
            return float(np.sum(hgmamba_block_forward(hg, x, params, scan, options)[0] * projection))

        _, cache = hgmamba_block_forward(hg, x, params, scan, options)
        grad_x, grads = block_backward(cache, projection)
        tensors = {"x": x, **{k: v for k, v in params.named_arrays().items() if k != "kind_weights"}}
        analytic = {"x": grad_x, **grads.named_arrays()}
        name = f"block[{options.mode},ssm={options.use_ssm},bidirectional={options.bidirectional}]"
        results += compare_gradients(name, loss, tensors, analytic)
    return results


def check_head(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    n = size.grid[0] * size.grid[1]
    z = rng.standard_normal((n, size.d))
    p = init_abmil(rng, size.d, 3, size.attention_hidden)
    p.cls_bias[:] = rng.standard_normal(3)
    projection = rng.standard_normal(3)

    def loss():
        bag, _, _ = abmil_pool(z, p)
        return float(np.dot(classify(bag, p), projection))

    bag, _, cache = abmil_pool(z, p)
    grad_bag, grads = classify_backward(bag, projection, p)
    grad_z, pool_grads = pool_backward(cache, grad_bag, p)
    grads.add_(pool_grads)
    return compare_gradients("abmil_head", loss, {"z": z, **p.named_arrays()}, {"z": grad_z, **grads.named_arrays()})


def check_cross_entropy(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    logits = rng.standard_normal(4) * 3.0
    label = int(rng.integers(4))

    def loss():
        return cross_entropy(logits, label)[0]

    _, grad = cross_entropy(logits, label)
    return compare_gradients("cross_entropy", loss, {"logits": logits}, {"logits": grad}, CROSS_ENTROPY_TOLERANCE)


def check_model(rng: np.random.Generator, size: GradCheckSize) -> List[GradCheckResult]:
    bag = random_bag(rng, size.grid, size.d, label=1)
    cfg = ModelConfig(in_dim=size.d, d=size.d, n_layers=size.n_layers, d_state=size.d_state,
                      m_sequences=size.m_sequences, top_k=2, attention_hidden=size.attention_hidden)
    params = init_params(cfg, seed=int(rng.integers(1 << 31)))
    scan_seed = int(rng.integers(1 << 31))

    def loss():
        logits, _, _ = model_forward(bag, cfg, params, make_rng(scan_seed))
        return cross_entropy(logits, bag.label)[0]

    logits, _, cache = model_forward(bag, cfg, params, make_rng(scan_seed))
    _, grad_logits = cross_entropy(logits, bag.label)
    grads = model_backward(cache, grad_logits).named_arrays()
    tensors = {k: v for k, v in params.named_arrays().items() if not k.endswith("kind_weights")}
    return compare_gradients("model", loss, tensors, {k: grads[k] for k in tensors})


CHECKS = [check_hgconv, check_causal_conv, check_selective_scan, check_bi_ssm, check_aggregation, check_block,
          check_head, check_cross_entropy, check_model]


def run_gradcheck(size: str = "tiny", seed: int = 0) -> List[GradCheckResult]:
    """Runs every check of the suite, returns one result per verified tensor"""
    assert_debug(size in GRADCHECK_SIZES, f"Unknown gradcheck size `{size}`, expected one of {list(GRADCHECK_SIZES)}")
    rng = make_rng(seed)
    results = []
    for check in CHECKS:
        results += check(rng, GRADCHECK_SIZES[size])
    return results
