from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import kernels
from .tensor import NumericError, Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0 or self.t < 0:
            raise ValueError("Adam requires lr > 0, eps > 0, t >= 0")


def adam_step(params: Mapping[str, Tensor], state: AdamState, max_grad_norm: float | None = None) -> float:
    """Apply one bias-corrected Adam update in place; returns the pre-clip grad norm.

    Parameters without a gradient are skipped.  All gradients are checked for
    NaN/Inf before anything is mutated.
    """
    live = [(k, p) for k, p in params.items() if p.grad is not None]
    sq = 0.0
    for k, p in live:
        if p.grad.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {p.grad.shape} != param shape {p.shape} for {k}")
        if not kernels.K.all_finite(p.grad.reshape(-1)):
            raise NumericError(f"adam_step: non-finite gradient for {k}")
        sq += float(np.vdot(p.grad, p.grad))
    norm = sq**0.5
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / (norm + 1e-12)

    state.t += 1
    for k, p in live:
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        g = p.grad if scale == 1.0 else p.grad * scale
        kernels.K.adam_update(
            p.data.reshape(-1),
            np.ascontiguousarray(g).reshape(-1),
            state.m[k].reshape(-1),
            state.v[k].reshape(-1),
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.t,
        )
    return norm


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
