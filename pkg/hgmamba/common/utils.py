import subprocess
from typing import Optional, Sequence

import numpy as np
from typeguard import check_type


def get_git_hash() -> Optional[str]:
    """
    Safely retrieves the hash of the last commit

    If any failure, returns None
    """
    try:
        process = subprocess.Popen(['git', 'rev-parse', '--short', 'HEAD'],
                                   stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
        stdout = process.communicate()[0]
        if process.returncode != 0:
            return None
        # Remove the last '\n'
        return stdout.decode(encoding="utf-8")[:-1]
    except (OSError, ValueError):
        return None


def assert_debug(condition: bool, message: str = ""):
    """
    Debug Friendly assertion

    Allows to put a breakpoint, and catch any assertion error in debug
    """
    if not condition:
        raise AssertionError(message)


def sizes_match(array: np.ndarray, sizes: Sequence[int]) -> bool:
    """
    Returns True if the sizes matches the array shape
    """
    shape = list(array.shape)
    if len(shape) != len(sizes):
        return False
    for i in range(len(sizes)):
        if sizes[i] != -1 and sizes[i] != shape[i]:
            return False
    return True


def check_tensor(array: np.ndarray, sizes: Sequence[int], error_type: type = None):
    """
    Checks the size of an array along all its dimensions, against a list of sizes

    The array must have the same number of dimensions as the list sizes
    For each dimension, the array must have the same size as the corresponding entry in the list
    A size of -1 in the list matches all sizes

    Any Failure raises `error_type` (a DimensionError by default)

    >>> check_tensor(np.zeros((10, 3, 4)), [10, 3, 4])
    >>> check_tensor(np.zeros((10, 3, 4)), [-1, 3, 4])
    """
    check_type(array, np.ndarray)
    if not sizes_match(array, sizes):
        if error_type is None:
            from hgmamba.common.errors import DimensionError
            error_type = DimensionError
        raise error_type(f"[BAD TENSOR SHAPE] Wrong shape got {array.shape} expected {list(sizes)}")


def check_finite(array: np.ndarray, what: str = "array"):
    """Raises a NumericalError if the array contains a NaN or an infinite value"""
    if not np.all(np.isfinite(array)):
        from hgmamba.common.errors import NumericalError
        raise NumericalError(f"Non finite values found in {what}")
