"""Training loop, early stopping, metrics, gradient checking and checkpoints."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nn
from .data import NormStats, WindowedDataset, denormalize
from .errors import (
    ChecksumError,
    CorruptCheckpointError,
    DimensionError,
    NumericError,
    UsageError,
    VersionMismatchError,
)
from .optim import (
    IMPROVEMENT_TOL,
    ClipPolicy,
    clip_gradients,
    init_optimizer,
    optimizer_step,
    reduce_lr_on_plateau,
)


@dataclass
class TrainConfig:
    model: str = "lstm"
    hidden_sizes: tuple = (32, 32)
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.0
    dropout_p: float = 0.0
    clip_threshold: float = 1.0
    clip_enabled: bool = True
    patience: int = 5
    lr_schedule: str = "plateau"
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-5
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        problems = []
        for name in ("epochs", "batch_size", "patience", "plateau_patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not self.hidden_sizes and self.model != "baseline":
            problems.append("hidden_sizes must name at least one layer")
        if any(h < 1 for h in self.hidden_sizes):
            problems.append("hidden_sizes entries must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append("dropout_p must lie in [0, 1)")
        if self.model not in ("lstm", "baseline"):
            problems.append(f"model must be 'lstm' or 'baseline', got {self.model!r}")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr_schedule not in ("plateau", "none"):
            problems.append(f"lr_schedule must be 'plateau' or 'none', got {self.lr_schedule!r}")
        if self.learning_rate < 0:
            problems.append("learning_rate must be >= 0")
        if self.clip_enabled and not self.clip_threshold > 0:
            problems.append("clip_threshold must be > 0 when clipping is enabled")
        if not 0.0 < self.plateau_factor < 1.0:
            problems.append("plateau_factor must lie in (0, 1)")
        if problems:
            raise UsageError("; ".join(problems))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    clip_scale_min: float = 1.0


@dataclass
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    n: int


@dataclass
class Checkpoint:
    params: dict
    norm: Optional[NormStats]
    config: TrainConfig
    epoch: int
    best_val_loss: float
    window_len: int = 12
    input_size: int = 1
    fractions: tuple = (0.8, 0.1, 0.1)


# ---------------------------------------------------------------------------
# models and metrics


def build_model(config: TrainConfig, window_len: int = 12, input_size: int = 1) -> nn.Model:
    rng = np.random.default_rng(config.seed)
    if config.model == "lstm":
        return nn.StackedLSTM(input_size, config.hidden_sizes, config.dropout_p, rng)
    return nn.DenseBaseline(window_len, input_size, config.hidden_sizes, config.dropout_p, rng)


def compute_metrics(pred, target) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise UsageError("cannot compute metrics on an empty split")
    if pred.shape != target.shape:
        raise DimensionError(f"{pred.size} predictions vs {target.size} targets")
    r = pred - target
    mse = float(np.mean(r * r))
    return MetricsReport(mae=float(np.mean(np.abs(r))), mse=mse, rmse=math.sqrt(mse), n=int(r.size))


def predict_split(model: nn.Model, ds: WindowedDataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    x, y = ds.arrays(split)
    if x.shape[2] == 0:
        raise UsageError(f"split {split!r} is empty")
    return model.predict(x).ravel(), y.ravel()


def evaluate(model: nn.Model, ds: WindowedDataset, split: str = "test", space: str = "normalized") -> MetricsReport:
    if space not in ("normalized", "original"):
        raise UsageError(f"space must be 'normalized' or 'original', got {space!r}")
    pred, y = predict_split(model, ds, split)
    if space == "original" and ds.norm is not None:
        pred, y = denormalize(pred, ds.norm), denormalize(y, ds.norm)
    return compute_metrics(pred, y)


# ---------------------------------------------------------------------------
# training


def batch_order(n: int, batch_size: int, shuffle: bool, rng: np.random.Generator) -> list:
    idx = rng.permutation(n) if shuffle else np.arange(n)
    return [idx[k:k + batch_size] for k in range(0, n, batch_size)]


def train_epoch(model: nn.Model, opt_state, x, y, config: TrainConfig, rng: np.random.Generator) -> tuple[float, float]:
    """One pass over ``(x, y)``; returns (sample-weighted mean loss, smallest clip scale)."""
    policy = ClipPolicy(config.clip_threshold, config.clip_enabled)
    params = model.parameters()
    total, count, clip_min = 0.0, 0, 1.0
    for idx in batch_order(x.shape[2], config.batch_size, config.shuffle, rng):
        xb = np.ascontiguousarray(x[:, :, idx])
        yb = y[:, idx]
        model.zero_grad()
        model.forward(xb, nn.TRAIN, rng)
        loss = nn.bptt(model, xb, yb)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss {loss} on a batch of {len(idx)} samples")
        clip_min = min(clip_min, clip_gradients(params, policy))
        optimizer_step(params, opt_state)
        total += loss * len(idx)
        count += len(idx)
    model.zero_grad()
    return total / count, clip_min


def split_loss(model: nn.Model, ds: WindowedDataset, split: str) -> float:
    pred, y = predict_split(model, ds, split)
    return compute_metrics(pred, y).mse


def fit(
    model: nn.Model,
    ds: WindowedDataset,
    config: TrainConfig,
    val_loss_fn: Optional[Callable[[nn.Model], float]] = None,
) -> tuple[Checkpoint, list]:
    """Train with early stopping and return the best-validation checkpoint plus history.

    ``val_loss_fn`` replaces the default validation-MSE computation.
    """
    if ds.sizes is None:
        raise UsageError("dataset must be split before fitting")
    x, y = ds.arrays("train")
    opt = init_optimizer(model.parameters(), config.optimizer, config.learning_rate, momentum=config.momentum)
    rng = np.random.default_rng([config.seed, 1])
    val_loss_fn = val_loss_fn or (lambda m: split_loss(m, ds, "val"))

    history = []
    best_loss, best_epoch, best_state = math.inf, 0, model.state_dict()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        lr = opt.learning_rate
        try:
            train_loss, clip_min = train_epoch(model, opt, x, y, config, rng)
            val_loss = float(val_loss_fn(model))
            if not math.isfinite(val_loss):
                raise NumericError(f"non-finite validation loss {val_loss}")
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        history.append(EpochRecord(epoch, train_loss, val_loss, lr, clip_min))
        if val_loss < best_loss - IMPROVEMENT_TOL:
            best_loss, best_epoch, best_state = val_loss, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
        if config.lr_schedule == "plateau":
            reduce_lr_on_plateau(opt, [r.val_loss for r in history], config.plateau_factor,
                                 config.plateau_patience, config.min_lr)
        if stale >= config.patience:
            break
    model.load_state_dict(best_state)
    input_size = getattr(model, "input_size", 1)
    window_len = getattr(model, "window_len", ds.window_len)
    ckpt = Checkpoint(best_state, ds.norm, config, best_epoch, best_loss, window_len, input_size)
    return ckpt, history


def write_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}\n")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)   # parameter name -> max relative error
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(a, b, floor: float = 1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(model_factory: Callable, tolerance: float = 1e-4, step: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of the MSE loss with central differences.

    ``model_factory()`` returns ``(model, x_seq, target)``. Both passes run in
    inference mode so dropout is inactive.
    """
    model, x, target = model_factory()
    model.zero_grad()
    model.forward(x, nn.INFER)
    nn.bptt(model, x, target)
    report = GradCheckReport(tolerance=tolerance)
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    for p in model.parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + step
            lp = nn.mse_loss(model.predict(x), target)
            p.value[idx] = old - step
            lm = nn.mse_loss(model.predict(x), target)
            p.value[idx] = old
            numeric[idx] = (lp - lm) / (2.0 * step)
        report.errors[p.name] = float(relative_error(analytic, numeric, floor).max())
    model.zero_grad()
    return report


def gradcheck_case(layer: str, seed: int = 0, activation: str = "relu", T: int = 4, batch: int = 3):
    """Factory for the standard small gradient-check models."""

    def factory():
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(T, 2, batch))
        target = rng.normal(size=(1, batch))
        if layer == "dense":
            hidden = () if activation == "linear" else (5, 4)
            model = nn.DenseRegressor(T * 2, hidden, "relu", rng)
            # zero biases can park a unit exactly on the ReLU kink
            for p in model.parameters():
                if p.name.endswith(".b"):
                    p.value += rng.normal(scale=0.5, size=p.value.shape)
        elif layer == "rnn":
            model = nn.RNNRegressor(2, 4, rng)
        elif layer == "lstm":
            model = nn.StackedLSTM(2, (3, 3), 0.0, rng)
            # non-trivial biases so every gate term is exercised
            for lstm_layer in model.layers:
                lstm_layer.b.value += rng.normal(scale=0.5, size=lstm_layer.b.value.shape)
        else:
            raise UsageError(f"unknown gradient-check layer {layer!r}")
        return model, x, target

    return factory


# ---------------------------------------------------------------------------
# checkpoint file


MAGIC = b"TFCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _config_to_kv(config: TrainConfig) -> dict:
    out = {}
    for k, v in asdict(config).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        out[f"config.{k}"] = str(v)
    return out


def _config_from_kv(kv: dict) -> TrainConfig:
    from .config import coerce_fields

    raw = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    values, errors = coerce_fields(TrainConfig, raw)
    if errors:
        raise CorruptCheckpointError("bad config in checkpoint: " + "; ".join(errors))
    return TrainConfig(**values)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    kv = _config_to_kv(ckpt.config)
    if ckpt.norm is not None:
        kv.update(ckpt.norm.to_dict())
    kv.update({
        "meta.epoch": str(ckpt.epoch),
        "meta.best_val_loss": repr(float(ckpt.best_val_loss)),
        "meta.window_len": str(ckpt.window_len),
        "meta.input_size": str(ckpt.input_size),
        "data.fractions": ",".join(repr(float(f)) for f in ckpt.fractions),
    })
    parts = [struct.pack("<I", len(kv))]
    for k in sorted(kv):
        parts += [_pack_str(k), _pack_str(kv[k])]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, value in ckpt.params.items():
        value = np.asarray(value, dtype="<f8")
        if value.ndim != 2:
            raise DimensionError(f"parameter {name} must be 2-D, got shape {value.shape}")
        parts += [_pack_str(name), struct.pack("<II", *value.shape), np.ascontiguousarray(value).tobytes()]
    payload = b"".join(parts)
    body = _HEADER.pack(MAGIC, VERSION, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint payload is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _HEADER.size:
        raise CorruptCheckpointError("checkpoint is truncated (incomplete header)")
    magic, version, length = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint file (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    end = _HEADER.size + length
    if len(buf) < end + 4:
        raise CorruptCheckpointError(f"checkpoint is truncated ({len(buf)} of {end + 4} bytes)")
    if len(buf) > end + 4:
        raise CorruptCheckpointError("trailing bytes after checkpoint checksum")
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(buf[_HEADER.size:end])
    try:
        kv = {}
        for _ in range(r.u32()):
            k = r.string()
            kv[k] = r.string()
        params = {}
        for _ in range(r.u32()):
            name = r.string()
            rows, cols = r.u32(), r.u32()
            params[name] = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        if r.pos != len(r.buf):
            raise CorruptCheckpointError("unparsed bytes at end of checkpoint payload")
        norm = NormStats.from_dict(kv) if "norm.center" in kv else None
        return _build_checkpoint(kv, params, norm)
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint payload: {exc}") from None


def _build_checkpoint(kv, params, norm) -> Checkpoint:
    return Checkpoint(
        params=params,
        norm=norm,
        config=_config_from_kv(kv),
        epoch=int(kv["meta.epoch"]),
        best_val_loss=float(kv["meta.best_val_loss"]),
        window_len=int(kv["meta.window_len"]),
        input_size=int(kv["meta.input_size"]),
        fractions=tuple(float(f) for f in kv["data.fractions"].split(",")),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> nn.Model:
    model = build_model(ckpt.config, ckpt.window_len, ckpt.input_size)
    model.load_state_dict(ckpt.params)
    return model
