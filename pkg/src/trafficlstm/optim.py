"""Gradient clipping, SGD/Adam updates, and a reduce-on-plateau schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, StateError, UsageError
from .linalg import l2_norm
from .nn import Parameter

# improvements smaller than this do not count (shared with early stopping)
IMPROVEMENT_TOL = 1e-9


@dataclass
class ClipPolicy:
    threshold: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not self.threshold > 0:
            raise UsageError(f"clip threshold must be positive, got {self.threshold}")


def clip_gradients(params: Sequence[Parameter], policy: ClipPolicy) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most the threshold.

    Returns the scale that was applied (1.0 when nothing changed).
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    if not policy.enabled or not params:
        return 1.0
    norm = l2_norm([p.grad for p in params])
    if norm <= policy.threshold:
        return 1.0
    scale = policy.threshold / norm
    for p in params:
        p.grad *= scale
    return scale


@dataclass
class OptimizerState:
    learning_rate: float
    kind: str = "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict = field(default_factory=dict)  # name -> momentum buffer, or (m, v) for adam


def init_optimizer(params: Sequence[Parameter], kind: str = "adam", learning_rate: float = 1e-3, **kw) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise UsageError(f"optimizer must be 'sgd' or 'adam', got {kind!r}")
    if learning_rate < 0:
        raise UsageError("learning rate must be non-negative")
    state = OptimizerState(learning_rate=learning_rate, kind=kind, **kw)
    for p in params:
        if kind == "adam":
            state.buffers[p.name] = (np.zeros_like(p.value), np.zeros_like(p.value))
        else:
            state.buffers[p.name] = np.zeros_like(p.value)
    return state


def _buffers(params, state, kind):
    if state.kind != kind:
        raise StateError(f"state was initialised for {state.kind}, not {kind}")
    try:
        return [state.buffers[p.name] for p in params]
    except KeyError as exc:
        raise StateError(f"no optimizer state for parameter {exc.args[0]!r}") from None


def sgd_step(params: Sequence[Parameter], state: OptimizerState):
    """w <- w - lr * (momentum * buf + grad), with buf updated in place."""
    bufs = _buffers(params, state, "sgd")
    lr = state.learning_rate
    for p, buf in zip(params, bufs):
        if state.momentum:
            buf *= state.momentum
            buf += p.grad
            p.value -= lr * buf
        else:
            p.value -= lr * p.grad
    state.step += 1


def adam_step(params: Sequence[Parameter], state: OptimizerState):
    bufs = _buffers(params, state, "adam")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, (m, v) in zip(params, bufs):
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def optimizer_step(params: Sequence[Parameter], state: OptimizerState):
    if state.kind == "adam":
        adam_step(params, state)
    else:
        sgd_step(params, state)


def epochs_since_improvement(history: Sequence[float], tol: float = IMPROVEMENT_TOL) -> int:
    """How many trailing entries of ``history`` failed to beat the running best by more than ``tol``."""
    best = np.inf
    since = 0
    for loss in history:
        if loss < best - tol:
            best = loss
            since = 0
        else:
            since += 1
    return since


def reduce_lr_on_plateau(
    state: OptimizerState,
    val_loss_history: Sequence[float],
    factor: float = 0.5,
    patience: int = 3,
    min_lr: float = 0.0,
) -> float:
    """Multiply the learning rate by ``factor`` after every ``patience`` stale epochs.

    Meant to be called once per epoch with the full history so far. The rate
    never drops below ``min_lr``.
    """
    if not 0.0 < factor < 1.0:
        raise UsageError(f"factor must lie in (0, 1), got {factor}")
    if patience < 1:
        raise UsageError(f"patience must be >= 1, got {patience}")
    stale = epochs_since_improvement(val_loss_history)
    if stale > 0 and stale % patience == 0:
        # a rate already below the floor is left alone rather than raised
        state.learning_rate = min(state.learning_rate, max(state.learning_rate * factor, min_lr))
    return state.learning_rate
