"""Layers and models with hand-written backward passes.

Column convention throughout: features run down the rows, batch across the
columns. A sequence is an array of shape ``(T, features, batch)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DimensionError, StateError, UsageError
from .linalg import Matrix, as_matrix, concat_rows, hadamard, matmul, relu, sigmoid, tanh

TRAIN = "train"
INFER = "infer"


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class LstmState:
    h: Matrix
    c: Matrix

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise DimensionError(f"LstmState h {self.h.shape} and c {self.c.shape} differ")

    @classmethod
    def zeros(cls, hidden: int, batch: int = 1) -> "LstmState":
        return cls(np.zeros((hidden, batch)), np.zeros((hidden, batch)))


@dataclass
class TapeEntry:
    """Forward intermediates of one cell application, consumed by its backward."""

    x: Matrix
    h_prev: Matrix
    c_prev: Optional[Matrix] = None
    i: Optional[Matrix] = None
    f: Optional[Matrix] = None
    o: Optional[Matrix] = None
    g: Optional[Matrix] = None
    c: Optional[Matrix] = None
    h: Optional[Matrix] = None


def _check_mode(mode: str):
    if mode not in (TRAIN, INFER):
        raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")


# ---------------------------------------------------------------------------
# functional cell ops


def dense_forward(p: Parameter, bias: Parameter, x: Matrix, activation: str = "linear") -> Matrix:
    x = as_matrix(x)
    if p.value.shape[1] != x.shape[0]:
        raise DimensionError(f"dense {p.name or 'W'} {p.value.shape} cannot consume input {x.shape}")
    if bias.value.shape != (p.value.shape[0], 1):
        raise DimensionError(f"dense bias shape {bias.value.shape} != ({p.value.shape[0]}, 1)")
    z = matmul(p.value, x) + bias.value
    if activation == "linear":
        return z
    if activation == "relu":
        return relu(z)
    raise UsageError(f"unknown activation {activation!r}")


def _check_fused(p: Parameter, h_prev: Matrix, x: Matrix, blocks: int):
    hidden = h_prev.shape[0]
    expected = (blocks * hidden, hidden + x.shape[0])
    if p.value.shape != expected:
        raise DimensionError(
            f"{p.name or 'W'} has shape {p.value.shape}, expected {expected} for "
            f"hidden={hidden}, input={x.shape[0]}"
        )
    if h_prev.shape[1] != x.shape[1]:
        raise DimensionError(f"batch mismatch: h_prev {h_prev.shape} vs x {x.shape}")


def rnn_cell_forward(p: Parameter, h_prev: Matrix, x: Matrix, tape: Optional[list] = None) -> Matrix:
    """h_t = tanh(W [h_prev; x]). Appends a TapeEntry to ``tape`` when given."""
    h_prev, x = as_matrix(h_prev), as_matrix(x)
    _check_fused(p, h_prev, x, 1)
    h = tanh(matmul(p.value, concat_rows(h_prev, x)))
    if tape is not None:
        tape.append(TapeEntry(x=x, h_prev=h_prev, h=h))
    return h


def rnn_cell_backward(p: Parameter, entry: Optional[TapeEntry], dh: Matrix):
    if entry is None or entry.h is None:
        raise StateError("rnn_cell_backward called without a matching forward tape entry")
    da = hadamard(dh, 1.0 - entry.h * entry.h)
    p.grad += matmul(da, concat_rows(entry.h_prev, entry.x).T)
    dhx = matmul(p.value.T, da)
    hidden = entry.h_prev.shape[0]
    return dhx[:hidden], dhx[hidden:]


def lstm_cell_forward(
    p: Parameter, bias: Parameter, state_prev: LstmState, x: Matrix, tape: Optional[list] = None
) -> LstmState:
    x = as_matrix(x)
    h_prev, c_prev = state_prev.h, state_prev.c
    _check_fused(p, h_prev, x, 4)
    H = h_prev.shape[0]
    if bias.value.shape != (4 * H, 1):
        raise DimensionError(f"{bias.name or 'bias'} has shape {bias.value.shape}, expected {(4 * H, 1)}")
    z = matmul(p.value, concat_rows(h_prev, x)) + bias.value
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    g = tanh(z[3 * H:])
    c = hadamard(f, c_prev) + hadamard(i, g)
    h = hadamard(o, tanh(c))
    if tape is not None:
        tape.append(TapeEntry(x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, o=o, g=g, c=c, h=h))
    return LstmState(h, c)


def lstm_cell_backward(
    p: Parameter, tape: Optional[TapeEntry], dh: Matrix, dc: Matrix, bias: Optional[Parameter] = None
):
    """Chain rule through one LSTM step.

    Accumulates into ``p.grad`` (and ``bias.grad`` when given); returns
    ``(dh_prev, dc_prev, dx)``.
    """
    if tape is None or tape.c is None:
        raise StateError("lstm_cell_backward called without a matching forward tape entry")
    e = tape
    tc = tanh(e.c)
    dc_total = dc + dh * e.o * (1.0 - tc * tc)
    dz = np.vstack([
        dc_total * e.g * e.i * (1.0 - e.i),
        dc_total * e.c_prev * e.f * (1.0 - e.f),
        dh * tc * e.o * (1.0 - e.o),
        dc_total * e.i * (1.0 - e.g * e.g),
    ])
    p.grad += matmul(dz, concat_rows(e.h_prev, e.x).T)
    if bias is not None:
        bias.grad += dz.sum(axis=1, keepdims=True)
    dhx = matmul(p.value.T, dz)
    H = e.h_prev.shape[0]
    return dhx[:H], hadamard(dc_total, e.f), dhx[H:]


def dropout_forward(x: Matrix, p: float, mode: str = TRAIN, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries the 1/(1-p) scale."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if mode == INFER or p == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise UsageError("train-mode dropout with p > 0 needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def mse_loss(pred: Matrix, target: Matrix) -> float:
    pred, target = as_matrix(pred), as_matrix(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    r = pred - target
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# layers


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, n_in: int, n_out: int, activation: str = "linear", rng=None, name: str = "dense"):
        if activation not in ("linear", "relu"):
            raise UsageError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.W = Parameter(_uniform(rng, (n_out, n_in), n_in), name=f"{name}.W")
        self.b = Parameter(np.zeros((n_out, 1)), name=f"{name}.b")
        self.activation = activation
        self._cache = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        y = dense_forward(self.W, self.b, x, self.activation)
        self._cache = (as_matrix(x), y)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise StateError(f"{self.W.name}: backward without forward")
        x, y = self._cache
        if self.activation == "relu":
            dy = dy * (y > 0.0)
        self.W.grad += dy @ x.T
        self.b.grad += dy.sum(axis=1, keepdims=True)
        self._cache = None
        return self.W.value.T @ dy


class LSTMLayer:
    def __init__(self, n_in: int, hidden: int, rng=None, name: str = "lstm", forget_bias: float = 1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.hidden = n_in, hidden
        fan_in = hidden + n_in
        self.W = Parameter(_uniform(rng, (4 * hidden, fan_in), fan_in), name=f"{name}.W")
        b = np.zeros((4 * hidden, 1))
        b[hidden:2 * hidden] = forget_bias
        self.b = Parameter(b, name=f"{name}.b")
        self._tape = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, xs: np.ndarray) -> np.ndarray:
        if xs.ndim != 3 or xs.shape[1] != self.n_in:
            raise DimensionError(f"{self.W.name}: expected (T, {self.n_in}, batch) input, got {xs.shape}")
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        B = xs.shape[2]
        h0 = np.zeros((self.hidden, B))
        hs, cs, gates = _kernels.lstm_seq_forward(self.W.value, self.b.value, xs, h0, h0.copy())
        self._tape = (xs, hs, cs, gates)
        return hs[1:]

    def backward(self, dhs: np.ndarray) -> np.ndarray:
        if self._tape is None:
            raise StateError(f"{self.W.name}: backward without forward")
        xs, hs, cs, gates = self._tape
        dc_last = np.zeros((self.hidden, xs.shape[2]))
        dxs, _, _, _ = _kernels.lstm_seq_backward(
            self.W.value, gates, hs, cs, xs, np.ascontiguousarray(dhs), dc_last, self.W.grad, self.b.grad
        )
        self._tape = None
        return dxs


class RNNLayer:
    def __init__(self, n_in: int, hidden: int, rng=None, name: str = "rnn"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in, self.hidden = n_in, hidden
        fan_in = hidden + n_in
        self.W = Parameter(_uniform(rng, (hidden, fan_in), fan_in), name=f"{name}.W")
        self._tape = None

    def parameters(self):
        return [self.W]

    def forward(self, xs):
        if xs.ndim != 3 or xs.shape[1] != self.n_in:
            raise DimensionError(f"{self.W.name}: expected (T, {self.n_in}, batch) input, got {xs.shape}")
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        hs = _kernels.rnn_seq_forward(self.W.value, xs, np.zeros((self.hidden, xs.shape[2])))
        self._tape = (xs, hs)
        return hs[1:]

    def backward(self, dhs):
        if self._tape is None:
            raise StateError(f"{self.W.name}: backward without forward")
        xs, hs = self._tape
        dxs, _, _ = _kernels.rnn_seq_backward(self.W.value, hs, xs, np.ascontiguousarray(dhs), self.W.grad)
        self._tape = None
        return dxs


# ---------------------------------------------------------------------------
# models


class Model:
    """Shared plumbing: parameter bookkeeping, tape tracking, state dicts."""

    kind = "model"

    def __init__(self):
        self._last = None  # (x_seq, prediction) of the pending forward pass

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def has_tape(self) -> bool:
        return self._last is not None

    def clear_tape(self):
        self._last = None

    def n_params(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise DimensionError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            v = np.asarray(state[name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise DimensionError(f"layer {name}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value[...] = v

    def predict(self, x_seq: np.ndarray) -> np.ndarray:
        """Inference pass that leaves no tape behind."""
        out = self.forward(x_seq, INFER)
        self.clear_tape()
        return out

    def forward(self, x_seq, mode=INFER, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dpred: np.ndarray):
        raise NotImplementedError


def _check_seq(x_seq) -> np.ndarray:
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 3:
        raise DimensionError(f"sequence must have shape (T, features, batch), got {x_seq.shape}")
    if x_seq.shape[0] < 1:
        raise UsageError("sequence must contain at least one time step")
    return x_seq


class StackedLSTM(Model):
    """LSTM layers stacked bottom-up, final top hidden state fed to a 1-unit linear head."""

    kind = "lstm"

    def __init__(self, input_size: int, hidden_sizes, dropout_p: float = 0.0, rng=None):
        super().__init__()
        hidden_sizes = list(hidden_sizes)
        if not hidden_sizes:
            raise UsageError("StackedLSTM needs at least one layer")
        if not 0.0 <= dropout_p < 1.0:
            raise UsageError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_size = input_size
        self.hidden_sizes = hidden_sizes
        self.dropout_p = dropout_p
        self.layers = []
        n_in = input_size
        for k, h in enumerate(hidden_sizes):
            self.layers.append(LSTMLayer(n_in, h, rng, name=f"lstm{k}"))
            n_in = h
        self.head = Dense(n_in, 1, "linear", rng, name="head")

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out + self.head.parameters()

    def forward(self, x_seq, mode=INFER, rng=None):
        _check_mode(mode)
        x_seq = _check_seq(x_seq)
        masks = []
        hs = x_seq
        for k, layer in enumerate(self.layers):
            hs = layer.forward(hs)
            if k < len(self.layers) - 1:
                hs, mask = dropout_forward(hs, self.dropout_p, mode, rng)
                masks.append(mask)
        self._hs_top = hs
        self._masks = masks
        pred = self.head.forward(hs[-1])
        self._last = (x_seq, pred)
        return pred

    def backward(self, dpred):
        if self._last is None:
            raise StateError("backward called before forward")
        dtop = self.head.backward(dpred)
        dhs = np.zeros_like(self._hs_top)
        dhs[-1] = dtop
        for k in range(len(self.layers) - 1, -1, -1):
            dhs = self.layers[k].backward(dhs)
            if k > 0:
                dhs = dhs * self._masks[k - 1]
        self._last = None
        return dhs


class DenseBaseline(Model):
    """Feed-forward baseline on the flattened window; ReLU hidden layers, linear 1-unit head."""

    kind = "baseline"

    def __init__(self, window_len: int, input_size: int, hidden_sizes, dropout_p: float = 0.0, rng=None):
        super().__init__()
        if not 0.0 <= dropout_p < 1.0:
            raise UsageError(f"dropout_p must lie in [0, 1), got {dropout_p}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.window_len = window_len
        self.input_size = input_size
        self.hidden_sizes = list(hidden_sizes)
        self.dropout_p = dropout_p
        self.layers = []
        n_in = window_len * input_size
        for k, h in enumerate(self.hidden_sizes):
            self.layers.append(Dense(n_in, h, "relu", rng, name=f"dense{k}"))
            n_in = h
        self.head = Dense(n_in, 1, "linear", rng, name="head")

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out + self.head.parameters()

    def forward(self, x_seq, mode=INFER, rng=None):
        _check_mode(mode)
        x_seq = _check_seq(x_seq)
        T, F, B = x_seq.shape
        if (T, F) != (self.window_len, self.input_size):
            raise DimensionError(f"baseline expects windows of shape ({self.window_len}, {self.input_size}), got {(T, F)}")
        a = x_seq.reshape(T * F, B)
        masks = []
        for layer in self.layers:
            a, mask = dropout_forward(layer.forward(a), self.dropout_p, mode, rng)
            masks.append(mask)
        self._masks = masks
        pred = self.head.forward(a)
        self._last = (x_seq, pred)
        return pred

    def backward(self, dpred):
        if self._last is None:
            raise StateError("backward called before forward")
        shape = self._last[0].shape
        d = self.head.backward(dpred)
        for layer, mask in zip(reversed(self.layers), reversed(self._masks)):
            d = layer.backward(d * mask)
        self._last = None
        return d.reshape(shape)


class RNNRegressor(Model):
    """Single vanilla RNN layer plus linear head; used for diagnostics and gradient checks."""

    kind = "rnn"

    def __init__(self, input_size: int, hidden: int, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.input_size = input_size
        self.hidden_sizes = [hidden]
        self.rnn = RNNLayer(input_size, hidden, rng, name="rnn0")
        self.head = Dense(hidden, 1, "linear", rng, name="head")

    def parameters(self):
        return self.rnn.parameters() + self.head.parameters()

    def forward(self, x_seq, mode=INFER, rng=None):
        _check_mode(mode)
        x_seq = _check_seq(x_seq)
        hs = self.rnn.forward(x_seq)
        self._hs = hs
        pred = self.head.forward(hs[-1])
        self._last = (x_seq, pred)
        return pred

    def backward(self, dpred):
        if self._last is None:
            raise StateError("backward called before forward")
        dhs = np.zeros_like(self._hs)
        dhs[-1] = self.head.backward(dpred)
        self._last = None
        return self.rnn.backward(dhs)


class DenseRegressor(Model):
    """Dense stack over the flattened sequence with a configurable head activation."""

    kind = "dense"

    def __init__(self, n_in: int, hidden_sizes=(), activation: str = "relu", rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers = []
        for k, h in enumerate(hidden_sizes):
            self.layers.append(Dense(n_in, h, activation, rng, name=f"dense{k}"))
            n_in = h
        self.head = Dense(n_in, 1, "linear", rng, name="head")

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out + self.head.parameters()

    def forward(self, x_seq, mode=INFER, rng=None):
        _check_mode(mode)
        x_seq = _check_seq(x_seq)
        T, F, B = x_seq.shape
        a = x_seq.reshape(T * F, B)
        for layer in self.layers:
            a = layer.forward(a)
        pred = self.head.forward(a)
        self._last = (x_seq, pred)
        return pred

    def backward(self, dpred):
        if self._last is None:
            raise StateError("backward called before forward")
        shape = self._last[0].shape
        d = self.head.backward(dpred)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        self._last = None
        return d.reshape(shape)


def bptt(model: Model, x_seq, target) -> float:
    """MSE loss of the pending forward pass, backpropagated through time.

    ``model.forward`` must have been called on ``x_seq`` first. Gradients are
    accumulated into every ``Parameter.grad``; the tape is cleared.
    """
    if not model.has_tape:
        raise StateError("bptt called without a preceding forward pass")
    seen, pred = model._last
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if seen.shape != x_seq.shape or not np.array_equal(seen, x_seq):
        raise StateError("bptt input does not match the recorded forward pass")
    target = np.asarray(target, dtype=np.float64)
    if target.size != pred.size:
        raise DimensionError(f"target has {target.size} entries, prediction has {pred.size}")
    target = target.reshape(pred.shape)
    loss = mse_loss(pred, target)
    dpred = 2.0 * (pred - target) / pred.size
    model.backward(dpred)
    model.clear_tape()
    return loss


# ---------------------------------------------------------------------------
# vanishing / exploding diagnostics


def _scaled_orthogonal(rng, n: int, scale: float) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    return scale * q


def rnn_gradient_norm_profile(
    cell: str,
    spectral_scale: float,
    T: int,
    hidden: int = 16,
    forget_bias: float = 3.0,
    input_scale: float = 1e-6,
    seed: int = 0,
) -> np.ndarray:
    """Norms of dloss/dh_t for t = T, T-1, ..., 1 from one backward pass.

    The recurrent weight is a scaled orthogonal matrix, so its largest singular
    value equals ``spectral_scale``. Inputs are tiny so the recurrence is probed
    near its linear regime; the loss is a random projection of ``h_T``.
    """
    if T < 2:
        raise UsageError("profile needs T >= 2")
    rng = np.random.default_rng(seed)
    xs = input_scale * rng.normal(size=(T, 1, 1))
    v = rng.normal(size=(hidden, 1))
    v /= np.linalg.norm(v)
    dhs_out = np.zeros((T, hidden, 1))
    dhs_out[-1] = v
    if cell == "rnn":
        W = np.hstack([_scaled_orthogonal(rng, hidden, spectral_scale), rng.normal(size=(hidden, 1))])
        hs = _kernels.rnn_seq_forward(W, xs, np.zeros((hidden, 1)))
        _, _, dh_total = _kernels.rnn_seq_backward(W, hs, xs, dhs_out, np.zeros_like(W))
    elif cell == "lstm":
        # scale the whole (4H, H) recurrent block so its top singular value is spectral_scale
        rec = rng.normal(size=(4 * hidden, hidden))
        rec *= spectral_scale / np.linalg.norm(rec, 2)
        W = np.hstack([rec, rng.normal(size=(4 * hidden, 1))])
        b = np.zeros((4 * hidden, 1))
        b[hidden:2 * hidden] = forget_bias
        z = np.zeros((hidden, 1))
        hs, cs, gates = _kernels.lstm_seq_forward(W, b, xs, z, z.copy())
        _, _, _, dh_total = _kernels.lstm_seq_backward(
            W, gates, hs, cs, xs, dhs_out, np.zeros((hidden, 1)), np.zeros_like(W), np.zeros_like(b)
        )
    else:
        raise UsageError(f"cell must be 'rnn' or 'lstm', got {cell!r}")
    norms = np.sqrt((dh_total ** 2).sum(axis=(1, 2)))
    return norms[::-1].copy()
