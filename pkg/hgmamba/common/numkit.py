"""
Dense numerical kernel of the toolbox

Matrices are float64 numpy arrays. Every learnable tensor lives in a `ParamGroup` dataclass,
whose gradients are a `ParamGroup` of the same type. Backward passes are written by hand for each
composite operation and verified with `finite_difference_gradient`.
"""
import dataclasses
import zlib
from typing import Callable, Dict, Optional, Tuple, TypeVar

import numpy as np
from scipy.special import expit, logsumexp

# Project Imports
from hgmamba.common import flops
from hgmamba.common.errors import DimensionError, NumericalError
from hgmamba.common.utils import check_finite

LAYER_NORM_EPS = 1.e-5
FD_STEP = 1.e-5


# ----------------------------------------------------------------------------------------------------------------------
# Random number generation
def make_rng(seed: int) -> np.random.Generator:
    """Returns the generator used everywhere in the toolbox: numpy's PCG64 seeded with `seed`"""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(master_seed: int, component: str, epoch: int = 0) -> int:
    """
    Derives the sub-seed of a stochastic component from (master_seed, component, epoch)

    The component name is hashed with crc32 (stable across processes and platforms),
    and the three integers are mixed by numpy's SeedSequence.
    """
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(component.encode("utf-8")), int(epoch) & 0xFFFFFFFF]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


# ----------------------------------------------------------------------------------------------------------------------
# Matrix operations
def matmul(a: np.ndarray, b: np.ndarray, component: Optional[str] = None) -> np.ndarray:
    """
    Matrix product of `a` [r, k] and `b` [k, c], accounted as 2·r·k·c FLOPs under `component`
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply matrices of shapes {a.shape} and {b.shape}")
    if component is not None:
        flops.record(component, flops.matmul_flops(a.shape[0], a.shape[1], b.shape[1]))
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax of a vector, computed with max subtraction"""
    check_finite(x, "softmax input")
    shifted = x - np.max(x)
    exps = np.exp(shifted)
    return exps / exps.sum()


def log_softmax(x: np.ndarray) -> np.ndarray:
    check_finite(x, "log_softmax input")
    return x - logsumexp(x)


# ----------------------------------------------------------------------------------------------------------------------
# Layer Norm
@dataclasses.dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LAYER_NORM_EPS) -> Tuple[np.ndarray, LayerNormCache]:
    """
    Standardizes every row of `x` [n, c] and applies the affine map (gain, bias)

    Returns the normalized rows and the cache needed by `layer_norm_backward`
    """
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layer_norm expects a matrix with non empty rows, got shape {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"gain / bias of shape {gain.shape} / {bias.shape} for rows of length {x.shape[1]}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, LayerNormCache(x_hat, inv_std, gain)


def layer_norm_backward(cache: LayerNormCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns the gradients (x, gain, bias) of `layer_norm`"""
    grad_gain = (grad_out * cache.x_hat).sum(axis=0)
    grad_bias = grad_out.sum(axis=0)
    g_hat = grad_out * cache.gain
    mean_g = g_hat.mean(axis=1, keepdims=True)
    mean_gx = (g_hat * cache.x_hat).mean(axis=1, keepdims=True)
    grad_x = cache.inv_std * (g_hat - mean_g - cache.x_hat * mean_gx)
    return grad_x, grad_gain, grad_bias


# ----------------------------------------------------------------------------------------------------------------------
# Initialization
def fan_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform initialization in ±sqrt(6 / (fan_in + fan_out))"""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ----------------------------------------------------------------------------------------------------------------------
# Parameters and gradients
@dataclasses.dataclass
class GradSlot:
    """A value and its additively accumulated gradient"""
    value: np.ndarray
    gradient: np.ndarray = None

    def __post_init__(self):
        if self.gradient is None:
            self.gradient = np.zeros_like(self.value)
        if self.gradient.shape != self.value.shape:
            raise DimensionError(f"Gradient of shape {self.gradient.shape} for a value of shape {self.value.shape}")

    def accumulate(self, gradient: np.ndarray):
        if gradient.shape != self.value.shape:
            raise DimensionError(f"Gradient of shape {gradient.shape} for a value of shape {self.value.shape}")
        self.gradient += gradient

    def zero(self):
        self.gradient[...] = 0.0


P = TypeVar("P", bound="ParamGroup")


class ParamGroup:
    """
    Mixin for dataclasses holding arrays (or nested groups, or lists of groups)

    Gradients of a group are instances of the same dataclass, which allows to address every
    tensor by a dotted name (like a state dict) for the optimizer and the checkpoints.
    """

    def named_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        arrays = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            name = f"{prefix}{field.name}"
            if isinstance(value, ParamGroup):
                arrays.update(value.named_arrays(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    arrays.update(item.named_arrays(f"{name}.{idx}."))
            elif isinstance(value, np.ndarray):
                arrays[name] = value
        return arrays

    def map(self: P, fn: Callable[[np.ndarray], np.ndarray]) -> P:
        """Returns a new group of the same structure, with `fn` applied to every array"""
        changes = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, ParamGroup):
                changes[field.name] = value.map(fn)
            elif isinstance(value, (list, tuple)):
                changes[field.name] = type(value)(item.map(fn) for item in value)
            elif isinstance(value, np.ndarray):
                changes[field.name] = fn(value)
        return dataclasses.replace(self, **changes)

    def zeros_like(self: P) -> P:
        return self.map(np.zeros_like)

    def copy(self: P) -> P:
        return self.map(np.copy)

    def add_(self: P, other: P, scale: float = 1.0) -> P:
        """In place accumulation of another group of the same structure"""
        other_arrays = other.named_arrays()
        for name, array in self.named_arrays().items():
            array += scale * other_arrays[name]
        return self

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        """Copies in place the arrays of a flat dictionary (same names and shapes)"""
        own = self.named_arrays()
        for name, array in own.items():
            if name not in arrays:
                raise KeyError(f"Missing tensor `{name}`")
            if arrays[name].shape != array.shape:
                raise DimensionError(f"Tensor `{name}` has shape {arrays[name].shape}, expected {array.shape}")
            array[...] = arrays[name]

    def num_parameters(self) -> int:
        return int(sum(array.size for array in self.named_arrays().values()))


# ----------------------------------------------------------------------------------------------------------------------
# Verification
def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """
    Central difference estimate of the gradient of the scalar function `f` at `x`

    `x` is perturbed in place entry by entry (and restored), so `f` can close over it.
    """
    if not (1.e-7 <= h <= 1.e-4):
        raise ValueError(f"Finite difference step {h} outside of [1e-7, 1e-4]")
    grad = np.zeros(x.shape, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        original = x[idx]
        x[idx] = original + h
        f_plus = f(x)
        x[idx] = original - h
        f_minus = f(x)
        x[idx] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"Non finite function value while perturbing entry {idx}")
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1.e-8) -> float:
    """max |a - n| / max(|a|_inf, |n|_inf, floor)"""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale
