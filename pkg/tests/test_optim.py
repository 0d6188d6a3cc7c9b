import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from trafficlstm.errors import NumericError, StateError, UsageError
from trafficlstm.nn import Parameter
from trafficlstm.optim import (
    ClipPolicy,
    OptimizerState,
    adam_step,
    clip_gradients,
    init_optimizer,
    reduce_lr_on_plateau,
    sgd_step,
)


def param(value, grad, name="w"):
    p = Parameter(np.array(value, dtype=float).reshape(1, -1), name=name)
    p.grad[...] = np.array(grad, dtype=float).reshape(1, -1)
    return p


def test_clip_below_threshold():
    p = param([0, 0], [3, 4])
    assert clip_gradients([p], ClipPolicy(10.0)) == 1.0
    np.testing.assert_array_equal(p.grad, [[3, 4]])


def test_clip_above_threshold():
    p = param([0, 0], [3, 4])
    assert clip_gradients([p], ClipPolicy(1.0)) == pytest.approx(0.2, rel=1e-15)
    np.testing.assert_allclose(p.grad, [[0.6, 0.8]], rtol=1e-15)


def test_clip_zero_gradient():
    p = param([0, 0], [0, 0])
    assert clip_gradients([p], ClipPolicy(1e-3)) == 1.0
    assert not p.grad.any()


def test_clip_is_global_across_parameters():
    a, b = param([0], [3], "a"), param([0], [4], "b")
    clip_gradients([a, b], ClipPolicy(1.0))
    assert a.grad[0, 0] == pytest.approx(0.6) and b.grad[0, 0] == pytest.approx(0.8)


def test_clip_disabled_and_nonfinite():
    p = param([0], [100.0])
    assert clip_gradients([p], ClipPolicy(1.0, enabled=False)) == 1.0
    assert p.grad[0, 0] == 100.0
    bad = param([0, 0], [1.0, np.nan], "lstm0.W")
    with pytest.raises(NumericError, match="lstm0.W"):
        clip_gradients([bad], ClipPolicy(1.0))
    with pytest.raises(UsageError):
        ClipPolicy(0.0)


grad_sets = st.lists(
    hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4
)


@settings(max_examples=200)
@given(grad_sets, st.floats(1e-3, 1e3))
def test_clip_properties(grads, tau):
    params = [param(np.zeros_like(g), g, f"p{k}") for k, g in enumerate(grads)]
    before = np.concatenate([p.grad.ravel() for p in params])
    clip_gradients(params, ClipPolicy(tau))
    after = np.concatenate([p.grad.ravel() for p in params])
    assert np.linalg.norm(after) <= tau + 1e-12
    nb, na = np.linalg.norm(before), np.linalg.norm(after)
    if nb > 0:
        assert abs(float(before @ after) / (nb * na) - 1.0) <= 1e-12
    # idempotence
    clip_gradients(params, ClipPolicy(tau))
    again = np.concatenate([p.grad.ravel() for p in params])
    np.testing.assert_allclose(again, after, rtol=1e-12, atol=0)


def test_sgd_step_example():
    p = param([1.0], [0.5])
    state = init_optimizer([p], "sgd", 0.1)
    sgd_step([p], state)
    assert p.value[0, 0] == pytest.approx(0.95, abs=1e-15)
    np.testing.assert_array_equal(p.grad, [[0.5]])  # gradients untouched


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_is_fixed_point(kind):
    p = param([1.5, -2.0], [0.0, 0.0])
    before = p.value.tobytes()
    state = init_optimizer([p], kind, 0.1, momentum=0.0)
    for _ in range(3):
        (adam_step if kind == "adam" else sgd_step)([p], state)
    assert p.value.tobytes() == before


def _scalar_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a Python float, written independently."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_first_step_moves_by_lr_against_gradient():
    p = param([1.0], [-0.3])
    state = init_optimizer([p], "adam", 0.01)
    adam_step([p], state)
    assert p.value[0, 0] == pytest.approx(1.0 + 0.01 * 0.3 / (0.3 + 1e-8), rel=1e-15)
    assert p.value[0, 0] == pytest.approx(_scalar_adam(1.0, [-0.3], 0.01), rel=1e-15)


def test_adam_matches_scalar_oracle_over_steps():
    grads = [0.5, -0.2, 0.05, 1.3, -0.7]
    p = param([0.25], [0.0])
    state = init_optimizer([p], "adam", 0.05)
    for g in grads:
        p.grad[...] = g
        adam_step([p], state)
    assert p.value[0, 0] == pytest.approx(_scalar_adam(0.25, grads, 0.05), rel=1e-13)
    assert state.step == len(grads)


def test_uninitialized_state():
    p = param([1.0], [1.0])
    with pytest.raises(StateError):
        adam_step([p], OptimizerState(learning_rate=0.1, kind="adam"))
    with pytest.raises(StateError):
        sgd_step([p], init_optimizer([p], "adam", 0.1))


def test_sgd_momentum():
    p = param([0.0], [1.0])
    state = init_optimizer([p], "sgd", 0.1, momentum=0.9)
    sgd_step([p], state)
    sgd_step([p], state)
    # buf: 1, then 1.9 -> w = -0.1 - 0.19
    assert p.value[0, 0] == pytest.approx(-0.29, abs=1e-15)


def test_plateau_examples():
    state = OptimizerState(learning_rate=0.1)
    history = []
    for loss in [5, 4, 3, 2, 1]:
        history.append(loss)
        assert reduce_lr_on_plateau(state, history, 0.5, 3, 1e-4) == 0.1

    state = OptimizerState(learning_rate=0.1)
    flat = [1.0] * 4  # patience + 1
    lrs = [reduce_lr_on_plateau(state, flat[:k], 0.5, 3, 1e-4) for k in range(1, 5)]
    assert lrs == [0.1, 0.1, 0.1, 0.05]

    state = OptimizerState(learning_rate=1e-4)
    assert reduce_lr_on_plateau(state, [1.0] * 4, 0.5, 3, 1e-4) == 1e-4


def test_plateau_argument_checks():
    with pytest.raises(UsageError):
        reduce_lr_on_plateau(OptimizerState(0.1), [1.0], 1.0, 3)
    with pytest.raises(UsageError):
        reduce_lr_on_plateau(OptimizerState(0.1), [1.0], 0.5, 0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.integers(1, 5), st.floats(0.1, 0.9))
def test_plateau_lr_non_increasing(history, patience, factor):
    state = OptimizerState(learning_rate=0.1)
    prev = state.learning_rate
    for k in range(1, len(history) + 1):
        lr = reduce_lr_on_plateau(state, history[:k], factor, patience, 1e-3)
        assert lr <= prev
        assert lr >= 1e-3 or lr == prev
        prev = lr
