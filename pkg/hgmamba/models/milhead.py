"""
Attention based MIL pooling (gated), linear classifier and cross-entropy
"""
import dataclasses
from typing import Optional, Tuple

import numpy as np

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import DimensionError, UsageError
from hgmamba.common.numkit import ParamGroup, fan_uniform, log_softmax, matmul, sigmoid, softmax
from hgmamba.common.utils import assert_debug, check_tensor

POOLINGS = ("abmil", "mean")
DEFAULT_ATTENTION_HIDDEN = 128


@dataclasses.dataclass
class ABMILParams(ParamGroup):
    v_proj: np.ndarray  # [d, h]
    u_proj: np.ndarray  # [d, h], gate
    w_att: np.ndarray  # [h]
    cls_weight: np.ndarray  # [d, C]
    cls_bias: np.ndarray  # [C]


def init_abmil(rng: np.random.Generator, d: int, n_classes: int, hidden: int = DEFAULT_ATTENTION_HIDDEN) -> ABMILParams:
    assert_debug(hidden >= 1 and n_classes >= 2, f"Invalid head (hidden={hidden}, classes={n_classes})")
    return ABMILParams(v_proj=fan_uniform(rng, d, hidden),
                       u_proj=fan_uniform(rng, d, hidden),
                       w_att=fan_uniform(rng, hidden, 1)[:, 0],
                       cls_weight=fan_uniform(rng, d, n_classes),
                       cls_bias=np.zeros(n_classes))


@dataclasses.dataclass
class PoolCache:
    z: np.ndarray
    attention: np.ndarray
    tanh_v: Optional[np.ndarray] = None
    gate: Optional[np.ndarray] = None


def abmil_pool(z: np.ndarray, p: ABMILParams) -> Tuple[np.ndarray, np.ndarray, PoolCache]:
    """
    e_i = w_attᵀ(tanh(V z_i) ⊙ sigmoid(U z_i)), attention = softmax(e), bag = Σ_i attention_i z_i

    Returns the bag embedding [d], the attention [N] and the cache for `pool_backward`
    """
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimensionError(f"abmil_pool expects a non empty matrix [N, d], got shape {z.shape}")
    check_tensor(p.v_proj, [z.shape[1], -1])
    n, d = z.shape
    hidden = p.v_proj.shape[1]
    tanh_v = np.tanh(matmul(z, p.v_proj))
    gate = sigmoid(matmul(z, p.u_proj))
    scores = (tanh_v * gate) @ p.w_att
    attention = softmax(scores)
    bag = attention @ z
    flops.record("mil_head", flops.attention_pool_flops(n, d, hidden))
    return bag, attention, PoolCache(z, attention, tanh_v, gate)


def mean_pool(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, PoolCache]:
    """Uniform attention over the instances"""
    if z.ndim != 2 or z.shape[0] < 1:
        raise DimensionError(f"mean_pool expects a non empty matrix [N, d], got shape {z.shape}")
    n, d = z.shape
    attention = np.full(n, 1.0 / n)
    flops.record("mil_head", n * d + d)
    return z.mean(axis=0), attention, PoolCache(z, attention)


def pool_backward(cache: Optional[PoolCache], grad_bag: np.ndarray, p: ABMILParams) -> Tuple[np.ndarray, ABMILParams]:
    """Gradients of the pooling for z and the attention parameters (zero for mean pooling)"""
    if cache is None:
        raise UsageError("pool_backward requires the cache of a forward pass")
    grads = p.zeros_like()
    z, attention = cache.z, cache.attention
    grad_z = np.outer(attention, grad_bag)
    if cache.tanh_v is None:
        return grad_z, grads

    grad_attention = z @ grad_bag
    # softmax jacobian
    grad_scores = attention * (grad_attention - attention @ grad_attention)
    gated = cache.tanh_v * cache.gate
    grads.w_att = gated.T @ grad_scores
    grad_gated = np.outer(grad_scores, p.w_att)
    grad_v = grad_gated * cache.gate * (1.0 - cache.tanh_v ** 2)
    grad_u = grad_gated * cache.tanh_v * cache.gate * (1.0 - cache.gate)
    grads.v_proj = z.T @ grad_v
    grads.u_proj = z.T @ grad_u
    grad_z += grad_v @ p.v_proj.T + grad_u @ p.u_proj.T
    return grad_z, grads


def classify(bag: np.ndarray, p: ABMILParams) -> np.ndarray:
    """logits = cls_weightᵀ bag + cls_bias"""
    check_tensor(bag, [p.cls_weight.shape[0]], DimensionError)
    n_classes = p.cls_weight.shape[1]
    flops.record("mil_head", flops.classifier_flops(bag.shape[0], n_classes))
    return bag @ p.cls_weight + p.cls_bias


def classify_backward(bag: np.ndarray, grad_logits: np.ndarray, p: ABMILParams) -> Tuple[np.ndarray, ABMILParams]:
    grads = p.zeros_like()
    grads.cls_weight = np.outer(bag, grad_logits)
    grads.cls_bias = grad_logits.copy()
    return p.cls_weight @ grad_logits, grads


def cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """-log softmax(logits)[label] and its gradient softmax(logits) - onehot(label)"""
    n_classes = logits.shape[0]
    if not (0 <= int(label) < n_classes):
        raise UsageError(f"Label {label} out of range for {n_classes} classes")
    log_probs = log_softmax(logits)
    grad = np.exp(log_probs)
    grad[int(label)] -= 1.0
    return float(-log_probs[int(label)]), grad
