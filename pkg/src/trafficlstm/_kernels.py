"""Sequence-level recurrent kernels.

Each kernel is written once in the numpy subset numba understands. At import
time they are compiled with ``numba.njit`` unless numba is missing or the
environment variable ``TRAFFICLSTM_DISABLE_NUMBA`` is set to a non-empty value
other than ``0``; in that case the same functions run as ordinary numpy code.

The uncompiled originals stay reachable through ``PY_KERNELS`` so tests and the
benchmark can compare both paths in one process.

Layouts: a sequence is ``(T, features, batch)``; fused weights have the
recurrent block first, i.e. ``W @ [h_prev; x]``; LSTM gate rows are ordered
i, f, o, g.
"""
import os
import types

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_flag = os.environ.get("TRAFFICLSTM_DISABLE_NUMBA", "")
USE_NUMBA = numba is not None and _flag in ("", "0")
BACKEND = "numba" if USE_NUMBA else "numpy"


def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def lstm_seq_forward(W, b, xs, h0, c0):
    """Run one LSTM layer over a whole sequence.

    Returns ``hs`` and ``cs`` of shape ``(T+1, H, B)`` (index 0 is the initial
    state) and the activated gates ``(T, 4H, B)``.
    """
    T, n_in, B = xs.shape
    H = h0.shape[0]
    hs = np.zeros((T + 1, H, B))
    cs = np.zeros((T + 1, H, B))
    gates = np.zeros((T, 4 * H, B))
    hs[0] = h0
    cs[0] = c0
    hx = np.zeros((H + n_in, B))
    for t in range(T):
        hx[:H] = hs[t]
        hx[H:] = xs[t]
        z = np.dot(W, hx) + b
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        o = _sigmoid(z[2 * H:3 * H])
        g = np.tanh(z[3 * H:])
        c = f * cs[t] + i * g
        cs[t + 1] = c
        hs[t + 1] = o * np.tanh(c)
        gates[t, :H] = i
        gates[t, H:2 * H] = f
        gates[t, 2 * H:3 * H] = o
        gates[t, 3 * H:] = g
    return hs, cs, gates


def lstm_seq_backward(W, gates, hs, cs, xs, dhs_out, dc_last, dW, db):
    """Backpropagate through one LSTM layer.

    ``dhs_out[t]`` is the gradient flowing into ``h_{t+1}`` from outside the
    recurrence; ``dc_last`` seeds the final cell state. ``dW``/``db`` are
    accumulated in place. Returns ``(dxs, dh0, dc0, dh_total)`` where
    ``dh_total[t]`` is the full gradient with respect to ``h_{t+1}``.
    """
    T, n_in, B = xs.shape
    H = hs.shape[1]
    WT = np.ascontiguousarray(W.T)
    dxs = np.zeros((T, n_in, B))
    dh_total = np.zeros((T, H, B))
    dh_next = np.zeros((H, B))
    dc_next = dc_last.copy()
    dz = np.zeros((4 * H, B))
    hx = np.zeros((H + n_in, B))
    for t in range(T - 1, -1, -1):
        dh = dhs_out[t] + dh_next
        dh_total[t] = dh
        i = gates[t, :H]
        f = gates[t, H:2 * H]
        o = gates[t, 2 * H:3 * H]
        g = gates[t, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:H] = dc * g * i * (1.0 - i)
        dz[H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[2 * H:3 * H] = dh * tc * o * (1.0 - o)
        dz[3 * H:] = dc * i * (1.0 - g * g)
        hx[:H] = hs[t]
        hx[H:] = xs[t]
        dW += np.dot(dz, np.ascontiguousarray(hx.T))
        db += dz.sum(axis=1).reshape(4 * H, 1)
        dhx = np.dot(WT, dz)
        dh_next = dhx[:H].copy()
        dxs[t] = dhx[H:]
        dc_next = dc * f
    return dxs, dh_next, dc_next, dh_total


def rnn_seq_forward(W, xs, h0):
    """Vanilla tanh RNN over a sequence; returns ``hs`` of shape ``(T+1, H, B)``."""
    T, n_in, B = xs.shape
    H = h0.shape[0]
    hs = np.zeros((T + 1, H, B))
    hs[0] = h0
    hx = np.zeros((H + n_in, B))
    for t in range(T):
        hx[:H] = hs[t]
        hx[H:] = xs[t]
        hs[t + 1] = np.tanh(np.dot(W, hx))
    return hs


def rnn_seq_backward(W, hs, xs, dhs_out, dW):
    """Backpropagate through a vanilla RNN; accumulates ``dW`` in place.

    Returns ``(dxs, dh0, dh_total)``.
    """
    T, n_in, B = xs.shape
    H = hs.shape[1]
    WT = np.ascontiguousarray(W.T)
    dxs = np.zeros((T, n_in, B))
    dh_total = np.zeros((T, H, B))
    dh_next = np.zeros((H, B))
    hx = np.zeros((H + n_in, B))
    for t in range(T - 1, -1, -1):
        dh = dhs_out[t] + dh_next
        dh_total[t] = dh
        h = hs[t + 1]
        da = dh * (1.0 - h * h)
        hx[:H] = hs[t]
        hx[H:] = xs[t]
        dW += np.dot(da, np.ascontiguousarray(hx.T))
        dhx = np.dot(WT, da)
        dh_next = dhx[:H].copy()
        dxs[t] = dhx[H:]
    return dxs, dh_next, dh_total


PY_KERNELS = {
    "lstm_seq_forward": lstm_seq_forward,
    "lstm_seq_backward": lstm_seq_backward,
    "rnn_seq_forward": rnn_seq_forward,
    "rnn_seq_backward": rnn_seq_backward,
}


def _compile():
    # compile copies bound to a jitted sigmoid so PY_KERNELS stay pure numpy
    jit = numba.njit(cache=True)
    scope = dict(globals(), _sigmoid=jit(_sigmoid))
    return {
        name: jit(types.FunctionType(fn.__code__, scope, name))
        for name, fn in PY_KERNELS.items()
    }


JIT_KERNELS = _compile() if numba is not None else {}

if USE_NUMBA:
    lstm_seq_forward = JIT_KERNELS["lstm_seq_forward"]
    lstm_seq_backward = JIT_KERNELS["lstm_seq_backward"]
    rnn_seq_forward = JIT_KERNELS["rnn_seq_forward"]
    rnn_seq_backward = JIT_KERNELS["rnn_seq_backward"]
