import os
import subprocess
import sys

import numpy as np
import pytest

from trafficlstm import _kernels

pytestmark = pytest.mark.skipif(not _kernels.JIT_KERNELS, reason="numba not installed")


def _lstm_case(seed, H=4, I=3, B=5, T=7):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4 * H, H + I))
    b = rng.normal(size=(4 * H, 1))
    xs = rng.normal(size=(T, I, B))
    h0, c0 = rng.normal(size=(H, B)), rng.normal(size=(H, B))
    dhs = rng.normal(size=(T, H, B))
    dc = rng.normal(size=(H, B))
    return W, b, xs, h0, c0, dhs, dc


@pytest.mark.parametrize("seed", range(3))
def test_lstm_jit_matches_numpy(seed):
    W, b, xs, h0, c0, dhs, dc = _lstm_case(seed)
    outs = {}
    for name, table in (("py", _kernels.PY_KERNELS), ("jit", _kernels.JIT_KERNELS)):
        hs, cs, gates = table["lstm_seq_forward"](W, b, xs, h0, c0)
        dW, db = np.zeros_like(W), np.zeros_like(b)
        back = table["lstm_seq_backward"](W, gates, hs, cs, xs, dhs, dc, dW, db)
        outs[name] = (hs, cs, gates, dW, db) + tuple(back)
    for a, j in zip(outs["py"], outs["jit"]):
        np.testing.assert_allclose(a, j, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_rnn_jit_matches_numpy(seed):
    W, _, xs, h0, _, dhs, _ = _lstm_case(seed)
    W = W[:4]  # (H, H + I)
    outs = {}
    for name, table in (("py", _kernels.PY_KERNELS), ("jit", _kernels.JIT_KERNELS)):
        hs = table["rnn_seq_forward"](W, xs, h0)
        dW = np.zeros_like(W)
        back = table["rnn_seq_backward"](W, hs, xs, dhs, dW)
        outs[name] = (hs, dW) + tuple(back)
    for a, j in zip(outs["py"], outs["jit"]):
        np.testing.assert_allclose(a, j, rtol=1e-12, atol=1e-14)


def _backend_with(flag):
    env = dict(os.environ)
    env.pop("TRAFFICLSTM_DISABLE_NUMBA", None)
    if flag is not None:
        env["TRAFFICLSTM_DISABLE_NUMBA"] = flag
    out = subprocess.run(
        [sys.executable, "-c", "import trafficlstm._kernels as k; print(k.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    return out.stdout.strip()


def test_env_flag_selects_backend():
    assert _backend_with(None) == "numba"
    assert _backend_with("0") == "numba"
    assert _backend_with("1") == "numpy"


def test_selected_kernels_follow_backend():
    expected = _kernels.JIT_KERNELS if _kernels.USE_NUMBA else _kernels.PY_KERNELS
    assert _kernels.lstm_seq_forward is expected["lstm_seq_forward"]
    assert _kernels.rnn_seq_backward is expected["rnn_seq_backward"]
