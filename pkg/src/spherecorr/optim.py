"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

Array = np.ndarray


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one param list."""

    m: list[Array]
    v: list[Array]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: list[Tensor], grads: list[Array], state: AdamState,
              lr_scale: float = 1.0) -> AdamState:
    """One Adam update, in place on the parameter tensors.

    ``lr_scale`` multiplies the stored learning rate for this step only
    (used for warmup schedules).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have matching lengths")
    for p, g, m in zip(params, grads, state.m):
        if p.value.shape != np.shape(g) or p.value.shape != m.shape:
            raise ValueError(
                f"shape mismatch: param {p.value.shape} vs grad {np.shape(g)}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    lr = state.lr * lr_scale
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def clip_global_norm(grads: list[Array], max_norm: float) -> tuple[list[Array], float]:
    """Scale the whole gradient list so its joint l2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads, total
    s = max_norm / total
    return [g * s for g in grads], total
