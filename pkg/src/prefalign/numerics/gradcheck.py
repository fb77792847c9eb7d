from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, reset_tape


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    floor: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and reads ``params`` in place.  The relative
    error of each entry is ``|a - n| / max(|a|, |n|, floor)``; the report
    keeps the maximum per parameter block.  ``max_entries`` subsamples large
    blocks.  A non-deterministic ``fn`` is a contract violation and raises.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    for p in params.values():
        p.grad = None
    loss = fn()
    if loss.size != 1:
        raise ValueError(f"finite_diff_check: fn must return a scalar, got shape {loss.shape}")
    base = loss.item()
    backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def value() -> float:
        v = fn().item()
        reset_tape()
        return v

    again = value()
    if again != base:
        raise ValueError(f"finite_diff_check: fn is not deterministic ({base!r} then {again!r})")

    report = GradCheckReport(tol=tol)
    for k, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            num[j] = (fp - fm) / (2 * h)
        a = analytic[k].reshape(-1)[idx]
        report.max_rel_error[k] = float(_rel_err(a, num, floor).max()) if idx.size else 0.0
    return report
