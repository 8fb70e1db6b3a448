"""
FLOPs counting rules shared by the instrumented kernels and the analytic cost model

A multiply-add counts as 2 FLOPs. Every kernel of the toolbox records its cost with `record`,
using the functions below with its actual operand shapes, so the analytic model and the
instrumented counters agree exactly.
"""
import contextlib
from collections import Counter
from typing import Iterator, List

COMPONENTS = ("hgconv", "scan_generation", "conv1d", "selective_scan", "merge_norm", "aggregation", "mil_head")

_active_counters: List[Counter] = []


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Context manager collecting the FLOPs recorded by the kernels, per component"""
    counter = Counter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def record(component: str, flops: int):
    """Adds `flops` to every active counter"""
    for counter in _active_counters:
        counter[component] += int(flops)


# ----------------------------------------------------------------------------------------------------------------------
# Elementary rules
def matmul_flops(rows: int, inner: int, cols: int) -> int:
    return 2 * rows * inner * cols


def layer_norm_flops(rows: int, cols: int) -> int:
    # mean (1) + variance (2) + standardization (2) + affine (2)
    return 7 * rows * cols


def softmax_flops(n: int) -> int:
    return 3 * n


# ----------------------------------------------------------------------------------------------------------------------
# Kernel rules
def hgconv_flops(n_nodes: int, n_edges: int, nnz: int, d_in: int, d_out: int) -> int:
    """X W, node scaling, Hᵀ gather, edge scaling, H scatter, node scaling and ReLU"""
    return (matmul_flops(n_nodes, d_in, d_out)
            + 2 * nnz * d_out * 2
            + 3 * n_nodes * d_out
            + n_edges * d_out
            + n_edges)


def scan_generation_flops(n_tokens: int) -> int:
    return n_tokens


def conv1d_flops(length: int, d: int, width: int) -> int:
    # depthwise taps, bias, SiLU
    return 2 * length * d * width + length * d + 4 * length * d


def selective_scan_flops(length: int, d: int, d_state: int) -> int:
    delta = 2 * length * d + 3 * length * d
    projections = 2 * matmul_flops(length, d, d_state) + 2 * length * d_state
    recurrence = 8 * length * d * d_state
    skip = 2 * length * d
    return delta + projections + recurrence + skip


def merge_flops(length: int, d: int, n_terms: int) -> int:
    """Residual sum of `n_terms` sequences, linear layer and norm"""
    return (n_terms - 1) * length * d + matmul_flops(length, d, d) + length * d + layer_norm_flops(length, d)


def aggregation_flops(n_tokens: int, n_nodes: int, d: int) -> int:
    return n_tokens * d + n_nodes * d


def attention_pool_flops(n: int, d: int, hidden: int) -> int:
    """Gated scores (two projections, tanh, sigmoid, product), softmax and weighted sum"""
    return 2 * matmul_flops(n, d, hidden) + 3 * n * hidden + matmul_flops(n, hidden, 1) + softmax_flops(n) \
        + matmul_flops(1, n, d)


def classifier_flops(d: int, n_classes: int) -> int:
    return matmul_flops(1, d, n_classes) + n_classes


def abmil_flops(n: int, d: int, hidden: int, n_classes: int) -> int:
    return attention_pool_flops(n, d, hidden) + classifier_flops(d, n_classes)


def mean_pool_flops(n: int, d: int, n_classes: int) -> int:
    return n * d + d + classifier_flops(d, n_classes)


def attention_flops(n: int, d: int, n_layers: int) -> int:
    """QKV and output projections (8Nd²) plus score and value products (4N²d), per layer"""
    return n_layers * (8 * n * d * d + 4 * n * n * d)
