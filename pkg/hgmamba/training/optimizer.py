"""
Adam with decoupled weight decay and the multi-step learning rate schedule, on ParamGroups
"""
import dataclasses
from typing import TYPE_CHECKING, Dict, Iterable, Tuple

import numpy as np

# Project Imports
from hgmamba.common.numkit import ParamGroup
from hgmamba.common.utils import assert_debug

if TYPE_CHECKING:
    from hgmamba.training.trainer import TrainConfig


@dataclasses.dataclass
class AdamState:
    """First and second moment estimates of every named tensor, and the number of steps taken"""
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)


def adam_step(params: ParamGroup, grads: ParamGroup, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1.e-8, frozen: Iterable[str] = ()):
    """
    Updates `params` in place with one bias-corrected Adam step:
        p ← p - lr·wd·p
        p ← p - lr / (1 - β1^t) · m / (sqrt(v) / sqrt(1 - β2^t) + eps)

    Tensors whose name ends with one of `frozen` are left untouched.
    """
    beta1, beta2 = betas
    state.step += 1
    bias_correction1 = 1.0 - beta1 ** state.step
    bias_correction2 = 1.0 - beta2 ** state.step
    frozen = tuple(frozen)

    named_grads = grads.named_arrays()
    for name, param in params.named_arrays().items():
        if frozen and name.endswith(frozen):
            continue
        grad = named_grads[name]
        assert_debug(grad.shape == param.shape, f"Gradient of `{name}` has shape {grad.shape}, expected {param.shape}")
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(param)
            state.exp_avg_sq[name] = np.zeros_like(param)
        exp_avg, exp_avg_sq = state.exp_avg[name], state.exp_avg_sq[name]

        param *= 1.0 - lr * weight_decay
        exp_avg *= beta1
        exp_avg += (1.0 - beta1) * grad
        exp_avg_sq *= beta2
        exp_avg_sq += (1.0 - beta2) * grad * grad
        denom = np.sqrt(exp_avg_sq) / np.sqrt(bias_correction2) + eps
        param -= (lr / bias_correction1) * exp_avg / denom


def lr_schedule(epoch: int, cfg: "TrainConfig") -> float:
    """lr = cfg.lr · gamma^(number of milestones ≤ epoch)"""
    assert_debug(0 <= epoch < cfg.epochs, f"Epoch {epoch} outside of [0, {cfg.epochs})")
    n_passed = sum(1 for milestone in cfg.milestones if milestone <= epoch)
    return cfg.lr * cfg.gamma ** n_passed
