import numpy as np
import pytest

from trafficlstm import nn

ACCEPTANCE_RESULTS = []


def numeric_grad(loss_fn, arr, step=1e-5):
    """Central differences of ``loss_fn()`` with respect to every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + step
        lp = loss_fn()
        arr[idx] = old - step
        lm = loss_fn()
        arr[idx] = old
        out[idx] = (lp - lm) / (2 * step)
    return out


def rel_err(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def model_loss(model, x, y):
    return lambda: nn.mse_loss(model.predict(x), y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
