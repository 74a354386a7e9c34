"""Op instrumentation: multiply-accumulate counts for conv2d, matmul and linear, and branch
patterns of the piecewise ops (used by gradcheck to spot kink crossings)."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

_stack: list[list[int]] = []
_branch_stack: list[list[np.ndarray]] = []


def record_macs(n: int) -> None:
    for box in _stack:
        box[0] += n


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count MACs issued inside the block; read ``box[0]`` afterwards."""
    box = [0]
    _stack.append(box)
    try:
        yield box
    finally:
        _stack.pop()


def tracing_branches() -> bool:
    return bool(_branch_stack)


def record_branch(pattern: np.ndarray) -> None:
    """Log which linear piece each element of a piecewise op fell on."""
    for trace in _branch_stack:
        trace.append(pattern)


@contextlib.contextmanager
def trace_branches() -> Iterator[list[np.ndarray]]:
    """Collect the branch patterns of every piecewise op run inside the block, in call order."""
    trace: list[np.ndarray] = []
    _branch_stack.append(trace)
    try:
        yield trace
    finally:
        _branch_stack.pop()


def same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
