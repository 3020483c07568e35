"""Adam update semantics and gradient clipping."""

import numpy as np
import pytest

from spherecorr import autodiff as ad
from spherecorr.optim import AdamState, adam_step, clip_global_norm


def make(vals, lr=1e-3):
    params = [ad.parameter(v) for v in vals]
    return params, AdamState.for_params(params, lr=lr)


def test_zero_gradient_is_a_fixed_point_and_moments_decay():
    params, state = make([np.array([1.0, -2.0])])
    state.m[0][:] = 1.0
    state.v[0][:] = 1.0
    before = params[0].value.copy()
    adam_step(params, [np.zeros(2)], state)
    # moments shrink by their decay rates; the tiny bias-corrected kick from
    # stale moments is bounded by lr
    assert np.allclose(state.m[0], 0.9)
    assert np.allclose(state.v[0], 0.999)
    assert np.abs(params[0].value - before).max() <= state.lr * 1.01
    params, state = make([np.array([1.0, -2.0])])
    adam_step(params, [np.zeros(2)], state)
    assert np.array_equal(params[0].value, np.array([1.0, -2.0]))


def test_first_step_moves_by_learning_rate():
    params, state = make([np.array([0.0])], lr=1e-3)
    adam_step(params, [np.array([1.0])], state)
    # bias-corrected ratio is exactly 1, so the step is lr/(1 + eps)
    assert abs(params[0].value[0] + 1e-3) < 1e-9
    assert state.step == 1


def test_constant_gradient_approaches_learning_rate_steps():
    # independent oracle: iterate the closed-form recurrence
    g, lr, b1, b2, eps = 0.7, 1e-3, 0.9, 0.999, 1e-8
    m = v = 0.0
    x_oracle = 0.0
    updates = []
    for t in range(1, 1001):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        x_oracle -= step
        updates.append(step)
    assert abs(updates[-1] - lr) < 1e-6  # magnitude approaches lr

    params, state = make([np.array([0.0])], lr=lr)
    for _ in range(1000):
        adam_step(params, [np.array([g])], state)
    assert abs(params[0].value[0] - x_oracle) < 1e-12


def test_shape_mismatch_and_nonfinite_rejected():
    params, state = make([np.zeros(3)])
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, [np.zeros(4)], state)
    with pytest.raises(FloatingPointError):
        adam_step(params, [np.array([np.nan, 0.0, 0.0])], state)


def test_clip_global_norm():
    grads = [np.array([3.0, 0.0]), np.array([4.0])]
    clipped, norm = clip_global_norm(grads, 10.0)
    assert norm == 5.0
    assert clipped is grads  # under the cap: untouched
    clipped, norm = clip_global_norm(grads, 2.5)
    total = np.sqrt(sum((g**2).sum() for g in clipped))
    assert abs(total - 2.5) < 1e-12
