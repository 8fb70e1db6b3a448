"""
Bidirectional selective state space processing of scanned sequences

Each sequence goes through a causal depthwise convolution (SiLU), a selective scan with diagonal
A = -exp(a_log) (zero order hold for A, Euler for B) and a layer norm. The backward branch runs the
same operations on the reversed valid prefix, and the two branches are merged by a residual sum,
a linear layer and a layer norm. Padding rows never enter the computation and are zero in the outputs.
"""
import dataclasses
from typing import List, Optional, Tuple

import numba as nb
import numpy as np

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import DimensionError, NumericalError, StructuralError, UsageError
from hgmamba.common.numkit import (LayerNormCache, ParamGroup, fan_uniform, layer_norm, layer_norm_backward, matmul,
                                   silu, silu_grad, softplus)
from hgmamba.common.utils import assert_debug, check_tensor
from hgmamba.graph.scanner import ScanSet

RESIDUAL_VARIANTS = ("input", "branches")
DEFAULT_CONV_WIDTH = 4
DEFAULT_D_STATE = 16
INITIAL_DELTA = 0.01


# ----------------------------------------------------------------------------------------------------------------------
# Numba kernels
@nb.njit
def _conv_forward_kernel(x, kernel, bias):
    length, d = x.shape
    width = kernel.shape[1]
    out = np.zeros((length, d))
    for t in range(length):
        for c in range(d):
            acc = bias[c]
            for j in range(width):
                s = t - width + 1 + j
                if s >= 0:
                    acc += kernel[c, j] * x[s, c]
            out[t, c] = acc
    return out


@nb.njit
def _conv_backward_kernel(x, kernel, grad_pre):
    length, d = x.shape
    width = kernel.shape[1]
    grad_x = np.zeros((length, d))
    grad_kernel = np.zeros((d, width))
    grad_bias = np.zeros(d)
    for t in range(length):
        for c in range(d):
            g = grad_pre[t, c]
            grad_bias[c] += g
            for j in range(width):
                s = t - width + 1 + j
                if s >= 0:
                    grad_kernel[c, j] += g * x[s, c]
                    grad_x[s, c] += g * kernel[c, j]
    return grad_x, grad_kernel, grad_bias


@nb.njit
def _scan_forward_kernel(x, delta, a, b, c, d_skip):
    length, d = x.shape
    d_state = a.shape[1]
    y = np.zeros((length, d))
    states = np.zeros((length, d, d_state))
    for t in range(length):
        for ch in range(d):
            acc = 0.0
            for k in range(d_state):
                h_prev = states[t - 1, ch, k] if t > 0 else 0.0
                decay = np.exp(delta[t, ch] * a[ch, k])
                h = decay * h_prev + delta[t, ch] * b[t, k] * x[t, ch]
                states[t, ch, k] = h
                acc += c[t, k] * h
            y[t, ch] = acc + d_skip[ch] * x[t, ch]
    return y, states


@nb.njit
def _scan_backward_kernel(x, delta, a, b, c, d_skip, states, grad_y):
    """Reverse time adjoint: λ_t = g_t C_t + Ā_{t+1} λ_{t+1}"""
    length, d = x.shape
    d_state = a.shape[1]
    grad_x = np.zeros((length, d))
    grad_delta = np.zeros((length, d))
    grad_a = np.zeros((d, d_state))
    grad_b = np.zeros((length, d_state))
    grad_c = np.zeros((length, d_state))
    grad_d = np.zeros(d)
    carry = np.zeros((d, d_state))
    for t in range(length - 1, -1, -1):
        for ch in range(d):
            g = grad_y[t, ch]
            for k in range(d_state):
                h_prev = states[t - 1, ch, k] if t > 0 else 0.0
                decay = np.exp(delta[t, ch] * a[ch, k])
                lam = g * c[t, k] + carry[ch, k]
                grad_c[t, k] += g * states[t, ch, k]
                grad_decay = lam * h_prev
                grad_delta[t, ch] += grad_decay * decay * a[ch, k] + lam * b[t, k] * x[t, ch]
                grad_a[ch, k] += grad_decay * decay * delta[t, ch]
                grad_b[t, k] += lam * delta[t, ch] * x[t, ch]
                grad_x[t, ch] += lam * delta[t, ch] * b[t, k]
                carry[ch, k] = decay * lam
            grad_x[t, ch] += g * d_skip[ch]
            grad_d[ch] += g * x[t, ch]
    return grad_x, grad_delta, grad_a, grad_b, grad_c, grad_d


# ----------------------------------------------------------------------------------------------------------------------
# Parameters
@dataclasses.dataclass
class SSMParams(ParamGroup):
    """Parameters of one branch: the causal convolution and the selective scan"""
    a_log: np.ndarray  # [d, d_state]
    delta_weight: np.ndarray  # [d]
    delta_bias: np.ndarray  # [d]
    b_weight: np.ndarray  # [d, d_state]
    b_bias: np.ndarray  # [d_state]
    c_weight: np.ndarray  # [d, d_state]
    c_bias: np.ndarray  # [d_state]
    d_skip: np.ndarray  # [d]
    conv_kernel: np.ndarray  # [d, w], column w-1 multiplies the current step
    conv_bias: np.ndarray  # [d]

    @property
    def d(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[1]

    @property
    def a(self) -> np.ndarray:
        return -np.exp(self.a_log)


@dataclasses.dataclass
class BiSSMParams(ParamGroup):
    forward: SSMParams
    backward: SSMParams
    merge_weight: np.ndarray
    merge_bias: np.ndarray
    norm_f_gain: np.ndarray
    norm_f_bias: np.ndarray
    norm_b_gain: np.ndarray
    norm_b_bias: np.ndarray
    norm_gain: np.ndarray
    norm_bias: np.ndarray


def init_ssm(rng: np.random.Generator, d: int, d_state: int = DEFAULT_D_STATE,
             conv_width: int = DEFAULT_CONV_WIDTH) -> SSMParams:
    assert_debug(conv_width >= 1 and d_state >= 1 and d >= 1)
    conv_bound = 1.0 / np.sqrt(conv_width)
    return SSMParams(
        a_log=np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d, 1)),
        delta_weight=rng.uniform(-0.1, 0.1, size=d),
        # softplus(bias) = INITIAL_DELTA
        delta_bias=np.full(d, np.log(np.expm1(INITIAL_DELTA))),
        b_weight=fan_uniform(rng, d, d_state),
        b_bias=np.zeros(d_state),
        c_weight=fan_uniform(rng, d, d_state),
        c_bias=np.zeros(d_state),
        d_skip=np.ones(d),
        conv_kernel=rng.uniform(-conv_bound, conv_bound, size=(d, conv_width)),
        conv_bias=np.zeros(d))


def init_bi_ssm(rng: np.random.Generator, d: int, d_state: int = DEFAULT_D_STATE,
                conv_width: int = DEFAULT_CONV_WIDTH) -> BiSSMParams:
    forward = init_ssm(rng, d, d_state, conv_width)
    backward = init_ssm(rng, d, d_state, conv_width)
    return BiSSMParams(forward, backward,
                       merge_weight=fan_uniform(rng, d, d), merge_bias=np.zeros(d),
                       norm_f_gain=np.ones(d), norm_f_bias=np.zeros(d),
                       norm_b_gain=np.ones(d), norm_b_bias=np.zeros(d),
                       norm_gain=np.ones(d), norm_bias=np.zeros(d))


# ----------------------------------------------------------------------------------------------------------------------
# Helpers on the valid prefix
def _valid_length(seq: np.ndarray, valid: np.ndarray) -> int:
    if seq.ndim != 2:
        raise DimensionError(f"A sequence is a matrix [N, d], got shape {seq.shape}")
    check_tensor(valid, [seq.shape[0]], DimensionError)
    length = int(valid.sum())
    if not np.all(valid[:length]):
        raise StructuralError("The valid positions of a sequence must form a prefix")
    return length


def _pad(prefix: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, prefix.shape[1]))
    out[:prefix.shape[0]] = prefix
    return out


@dataclasses.dataclass
class ConvCache:
    x: np.ndarray
    kernel: np.ndarray
    pre_activation: np.ndarray


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, ConvCache]:
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[1] or bias.shape != (x.shape[1],):
        raise DimensionError(f"Convolution kernel {kernel.shape} / bias {bias.shape} for {x.shape[1]} channels")
    pre = _conv_forward_kernel(np.ascontiguousarray(x), np.ascontiguousarray(kernel), bias)
    flops.record("conv1d", flops.conv1d_flops(x.shape[0], x.shape[1], kernel.shape[1]))
    return silu(pre), ConvCache(x, kernel, pre)


def conv_backward(cache: ConvCache, grad_out: np.ndarray):
    grad_pre = grad_out * silu_grad(cache.pre_activation)
    return _conv_backward_kernel(np.ascontiguousarray(cache.x), np.ascontiguousarray(cache.kernel),
                                 np.ascontiguousarray(grad_pre))


@dataclasses.dataclass
class ScanCache:
    x: np.ndarray
    delta_pre: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    states: np.ndarray
    p: SSMParams


def scan_forward(x: np.ndarray, p: SSMParams) -> Tuple[np.ndarray, ScanCache]:
    length, d = x.shape
    if p.d != d:
        raise DimensionError(f"Scan parameters of width {p.d} for a sequence of width {d}")
    delta_pre = x * p.delta_weight + p.delta_bias
    delta = softplus(delta_pre)
    b = matmul(x, p.b_weight) + p.b_bias
    c = matmul(x, p.c_weight) + p.c_bias
    a = p.a
    y, states = _scan_forward_kernel(np.ascontiguousarray(x), delta, a, b, c, p.d_skip)
    finite_rows = np.isfinite(y).all(axis=1)
    if not np.all(finite_rows):
        step = int(np.argmin(finite_rows))
        raise NumericalError(f"Non finite selective scan output at step {step}", step=step)
    flops.record("selective_scan", flops.selective_scan_flops(length, d, p.d_state))
    return y, ScanCache(x, delta_pre, delta, a, b, c, states, p)


def scan_backward(cache: ScanCache, grad_y: np.ndarray) -> Tuple[np.ndarray, SSMParams]:
    p = cache.p
    grad_x, grad_delta, grad_a, grad_b, grad_c, grad_d = _scan_backward_kernel(
        np.ascontiguousarray(cache.x), cache.delta, cache.a, cache.b, cache.c, p.d_skip, cache.states,
        np.ascontiguousarray(grad_y))
    grads = p.zeros_like()
    # A = -exp(a_log)
    grads.a_log = grad_a * cache.a
    grads.d_skip = grad_d
    grad_delta_pre = grad_delta * (1.0 / (1.0 + np.exp(-cache.delta_pre)))
    grads.delta_weight = (grad_delta_pre * cache.x).sum(axis=0)
    grads.delta_bias = grad_delta_pre.sum(axis=0)
    grads.b_weight = cache.x.T @ grad_b
    grads.b_bias = grad_b.sum(axis=0)
    grads.c_weight = cache.x.T @ grad_c
    grads.c_bias = grad_c.sum(axis=0)
    grad_x = grad_x + grad_delta_pre * p.delta_weight + grad_b @ p.b_weight.T + grad_c @ p.c_weight.T
    return grad_x, grads


# ----------------------------------------------------------------------------------------------------------------------
# Public sequence operations
def causal_conv1d(seq: np.ndarray, valid: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Depthwise causal convolution followed by SiLU: position t sees the inputs t-w+1..t (zeros before 0)

    `kernel` is [d, w] with column w-1 applied to the current step. Padding rows are zero in the output.
    """
    length = _valid_length(seq, valid)
    out, _ = conv_forward(seq[:length], kernel, bias)
    return _pad(out, seq.shape[0])


def selective_scan(seq: np.ndarray, valid: np.ndarray, p: SSMParams) -> np.ndarray:
    """
    Selective scan over the valid prefix, for every channel c and state k:
        Δ_t = softplus(w_c x_{t,c} + b_c),  h_t = exp(Δ_t A_{c,k}) h_{t-1} + Δ_t B_t[k] x_{t,c}
        y_{t,c} = Σ_k C_t[k] h_{t,k} + D_c x_{t,c}
    with B_t, C_t the affine projections of x_t to d_state values, h_{-1} = 0.
    """
    length = _valid_length(seq, valid)
    y, _ = scan_forward(seq[:length], p)
    return _pad(y, seq.shape[0])


@dataclasses.dataclass
class BranchCache:
    conv: ConvCache
    scan: ScanCache
    norm: LayerNormCache


def _branch(x: np.ndarray, p: SSMParams, gain: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, BranchCache]:
    conv_out, conv_cache = conv_forward(x, p.conv_kernel, p.conv_bias)
    y, scan_cache = scan_forward(conv_out, p)
    z, norm_cache = layer_norm(y, gain, bias)
    flops.record("merge_norm", flops.layer_norm_flops(*x.shape))
    return z, BranchCache(conv_cache, scan_cache, norm_cache)


def _branch_backward(cache: BranchCache, grad_z: np.ndarray) -> Tuple[np.ndarray, SSMParams, np.ndarray, np.ndarray]:
    grad_y, grad_gain, grad_bias = layer_norm_backward(cache.norm, grad_z)
    grad_conv_out, grads = scan_backward(cache.scan, grad_y)
    grad_x, grads.conv_kernel, grads.conv_bias = conv_backward(cache.conv, grad_conv_out)
    return grad_x, grads, grad_gain, grad_bias


@dataclasses.dataclass
class BiSSMCache:
    n: int
    length: int
    residual_variant: str
    forward: BranchCache
    backward: Optional[BranchCache]
    merged_input: np.ndarray
    norm: LayerNormCache
    p: BiSSMParams


def bi_ssm_forward(seq: np.ndarray, valid: np.ndarray, p: BiSSMParams, residual_variant: str = "input",
                   bidirectional: bool = True) -> Tuple[np.ndarray, BiSSMCache]:
    """
    out = LN((z_f + z_b [+ seq]) W_m + b_m) on the valid prefix, zero on padding rows

    z_f = LN(scan(conv(seq))) and z_b is the same computation with the backward branch parameters
    on the reversed valid prefix, reversed back. `residual_variant` selects whether the input is part
    of the residual sum (`input`) or only the two branches (`branches`).
    """
    assert_debug(residual_variant in RESIDUAL_VARIANTS, f"Unknown residual variant `{residual_variant}`")
    n = seq.shape[0]
    length = _valid_length(seq, valid)
    if length == 0:
        raise StructuralError("bi_ssm_forward needs at least one valid token")
    x = seq[:length]

    z_f, forward_cache = _branch(x, p.forward, p.norm_f_gain, p.norm_f_bias)
    merged = z_f.copy()
    backward_cache = None
    n_terms = 1
    if bidirectional:
        z_b_reversed, backward_cache = _branch(x[::-1], p.backward, p.norm_b_gain, p.norm_b_bias)
        merged += z_b_reversed[::-1]
        n_terms += 1
    if residual_variant == "input":
        merged += x
        n_terms += 1

    out, norm_cache = layer_norm(matmul(merged, p.merge_weight) + p.merge_bias, p.norm_gain, p.norm_bias)
    flops.record("merge_norm", flops.merge_flops(length, x.shape[1], n_terms))
    cache = BiSSMCache(n, length, residual_variant, forward_cache, backward_cache, merged, norm_cache, p)
    return _pad(out, n), cache


def bi_ssm_backward(cache: Optional[BiSSMCache], grad_out: np.ndarray) -> Tuple[np.ndarray, BiSSMParams]:
    """Gradients of `bi_ssm_forward` with respect to the sequence and the parameters (zero on padding)"""
    if cache is None:
        raise UsageError("bi_ssm_backward requires the cache of a forward pass")
    check_tensor(grad_out, [cache.n, -1])
    p = cache.p
    grads = p.zeros_like()
    g = grad_out[:cache.length]

    grad_pre, grads.norm_gain, grads.norm_bias = layer_norm_backward(cache.norm, g)
    grads.merge_weight = cache.merged_input.T @ grad_pre
    grads.merge_bias = grad_pre.sum(axis=0)
    grad_merged = grad_pre @ p.merge_weight.T

    grad_x = grad_merged.copy() if cache.residual_variant == "input" else np.zeros_like(grad_merged)
    grad_xf, grads.forward, grads.norm_f_gain, grads.norm_f_bias = _branch_backward(cache.forward, grad_merged)
    grad_x += grad_xf
    if cache.backward is not None:
        grad_xb, grads.backward, grads.norm_b_gain, grads.norm_b_bias = _branch_backward(cache.backward,
                                                                                         grad_merged[::-1])
        grad_x += grad_xb[::-1]
    return _pad(grad_x, cache.n), grads


# ----------------------------------------------------------------------------------------------------------------------
# Token aggregation
def _check_membership(outputs: List[np.ndarray], scan: ScanSet):
    if len(outputs) != scan.n_sequences:
        raise StructuralError(f"{len(outputs)} sequence outputs for {scan.n_sequences} scan sequences")
    recount = np.zeros(scan.n_nodes, dtype=np.int64)
    for sequence in scan.sequences:
        np.add.at(recount, sequence.nodes, 1)
    if not np.array_equal(recount, scan.counts):
        raise StructuralError("The membership index is inconsistent with the scan sequences")


def aggregate_tokens(outputs: List[np.ndarray], scan: ScanSet, fallback: np.ndarray) -> np.ndarray:
    """
    Every node takes the mean of its tokens over all the sequences where it is valid.
    Nodes without any token take their `fallback` row.
    """
    _check_membership(outputs, scan)
    check_tensor(fallback, [scan.n_nodes, -1])
    d = fallback.shape[1]
    total = np.zeros((scan.n_nodes, d))
    # Sequences are reduced in order, so the sum does not depend on the evaluation order
    for sequence, output in zip(scan.sequences, outputs):
        check_tensor(output, [scan.n_nodes, d], DimensionError)
        total[sequence.nodes] += output[:sequence.length]
    counts = scan.counts
    covered = counts > 0
    z = fallback.copy()
    z[covered] = total[covered] / counts[covered, None]
    flops.record("aggregation", flops.aggregation_flops(scan.total_tokens, scan.n_nodes, d))
    return z


def aggregate_backward(scan: ScanSet, grad_z: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Gradients of `aggregate_tokens` for the sequence outputs and the fallback"""
    counts = scan.counts
    covered = counts > 0
    scale = np.zeros(scan.n_nodes)
    scale[covered] = 1.0 / counts[covered]
    scaled = grad_z * scale[:, None]
    grad_outputs = []
    for sequence in scan.sequences:
        grad = np.zeros_like(grad_z)
        grad[:sequence.length] = scaled[sequence.nodes]
        grad_outputs.append(grad)
    grad_fallback = np.where(covered[:, None], 0.0, grad_z)
    return grad_outputs, grad_fallback
