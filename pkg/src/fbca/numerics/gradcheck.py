"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .counters import same_branches, trace_branches
from .rng import RngStream
from .tensor import NonFiniteError, Tensor, no_grad

ABS_FLOOR = 1e-10
# largest share of probed coordinates allowed to straddle a kink
MAX_KINK_FRACTION = 0.05


@dataclass
class GradReport:
    tol: float
    h: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def kink_fraction(self) -> float:
        total = sum(self.checked.values()) + sum(self.kinks.values())
        return sum(self.kinks.values()) / total if total else 0.0

    @property
    def passed(self) -> bool:
        if any(self.checked.get(k, 0) == 0 and self.kinks.get(k, 0) > 0 for k in self.errors):
            return False
        return all(e <= self.tol for e in self.errors.values()) and self.kink_fraction <= MAX_KINK_FRACTION

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|), with differences below ``ABS_FLOOR`` counted as exact."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return np.where(diff <= ABS_FLOOR, 0.0, rel)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    items = list(params)
    if items and isinstance(items[0], Tensor):
        return [(f"p{i}", t) for i, t in enumerate(items)]
    return items


def _central_difference(forward_fn, input, flat: np.ndarray, i: int, step: float, base) -> float | None:
    """(f(x + step) - f(x - step)) / 2 step at coordinate i, or None if a kink lies in between."""
    orig = flat[i]
    flat[i] = orig + step
    with trace_branches() as up_trace:
        up = forward_fn(input).item()
    flat[i] = orig - step
    with trace_branches() as down_trace:
        down = forward_fn(input).item()
    flat[i] = orig
    if not (same_branches(base, up_trace) and same_branches(base, down_trace)):
        return None
    return (up - down) / (2.0 * step)


def gradcheck(
    forward_fn: Callable[[Tensor | None], Tensor],
    params: Mapping[str, Tensor] | Iterable,
    input: Tensor | None = None,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: RngStream | None = None,
) -> GradReport:
    """Compare backward() gradients with central differences, per parameter.

    ``forward_fn(input)`` must return a scalar Tensor. ``input`` is checked as
    well when it requires grad. With ``max_coords`` only that many coordinates
    per tensor are probed, chosen by ``rng``.

    A coordinate whose +-h perturbation moves any piecewise op (LeakyReLU,
    abs, h-swish) onto another linear piece has no central difference at this
    step. It is retried once at h/10 (when that is still >= 1e-6); if it still
    straddles a kink it is counted in ``kinks`` instead of ``errors``, and a
    sampled coordinate is replaced by the next candidate.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    named = _named(params)
    if input is not None and input.requires_grad:
        named = named + [("input", input)]
    for name, t in named:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 tensors; {name} is {t.dtype}")
        t.grad = None

    with trace_branches() as base:
        loss = forward_fn(input)
    if loss.size != 1:
        raise ValueError("forward_fn must return a scalar")
    if loss.requires_grad:
        loss.backward()

    report = GradReport(tol=tol, h=h)
    rng = rng or RngStream(0)
    with no_grad():
        for name, t in named:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError(f"{name}: gradcheck needs contiguous parameter storage")
            n = flat.size
            if max_coords is not None and n > max_coords:
                candidates = rng.permutation(n).tolist()
                want = max_coords
            else:
                candidates = list(range(n))
                want = n
            worst, checked, kinks = 0.0, 0, 0
            for i in candidates:
                if checked == want:
                    break
                numeric = None
                for step in (h, h / 10.0):
                    if step < 1e-6:
                        break
                    numeric = _central_difference(forward_fn, input, flat, i, step, base)
                    if numeric is not None:
                        break
                if numeric is None:
                    kinks += 1
                    continue
                if not np.isfinite(numeric):
                    raise NonFiniteError(f"non-finite finite difference for {name}[{i}]")
                err = float(relative_error(np.array(analytic.reshape(-1)[i]), np.array(numeric)))
                worst = max(worst, err)
                checked += 1
            report.errors[name] = worst
            report.checked[name] = checked
            report.kinks[name] = kinks
    return report
