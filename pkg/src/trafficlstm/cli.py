"""``trafficlstm`` command-line interface.

Exit codes: 0 success, 1 data or numeric error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import data, train
from .config import CONFIG_ENV, describe_defaults, resolve_config
from .errors import TrafficLSTMError, UsageError

CHECKPOINT_NAME = "checkpoint.tfck"


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, max_help_position=32)


_formatter = _Formatter


# ---------------------------------------------------------------------------
# helpers


def forecast(model, stats: data.NormStats, tail, horizon: int = 1, window_len: int = 12) -> np.ndarray:
    """Predict ``horizon`` bins after ``tail`` (original units).

    Horizons beyond one feed each prediction back in as the newest input, so
    errors compound.
    """
    tail = np.asarray(tail, dtype=np.float64).ravel()
    if len(tail) < window_len:
        raise UsageError(f"need at least {window_len} trailing bins to predict, got {len(tail)}")
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    window = list(data.apply_norm(tail[-window_len:], stats))
    out = []
    for _ in range(horizon):
        x = np.array(window[-window_len:]).reshape(window_len, 1, 1)
        y = float(model.predict(x)[0, 0])
        out.append(y)
        window.append(y)
    return data.denormalize(np.array(out), stats)


def format_table(columns: dict) -> str:
    """Aligned MAE/MSE/RMSE table; ``columns`` maps a header to a MetricsReport."""
    names = list(columns)
    width = max(10, *(len(n) for n in names))
    lines = ["metric".ljust(8) + "".join(n.rjust(width + 2) for n in names)]
    for key in ("mae", "mse", "rmse"):
        lines.append(key.upper().ljust(8) + "".join(f"{getattr(columns[n], key):.{6}f}".rjust(width + 2) for n in names))
    lines.append("n".ljust(8) + "".join(str(columns[n].n).rjust(width + 2) for n in names))
    return "\n".join(lines)


def write_metrics_csv(columns: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model,split,mae,mse,rmse,n\n")
        for name, (split, m) in columns.items():
            fh.write(f"{name},{split},{m.mae!r},{m.mse!r},{m.rmse!r},{m.n}\n")


def dataset_for_checkpoint(ckpt: train.Checkpoint, series_path) -> data.WindowedDataset:
    series = data.read_series_csv(series_path)
    scheme = ckpt.norm.scheme if ckpt.norm else "zscore"
    scope = ckpt.norm.fit_scope if ckpt.norm else "train_only"
    ds = data.prepare_dataset(series, ckpt.window_len, ckpt.fractions, scheme, scope)
    if ckpt.norm is not None and not _same_stats(ds.norm, ckpt.norm):
        raise TrafficLSTMError(
            f"normalization mismatch: series gives center={ds.norm.center!r}, scale={ds.norm.scale!r}; "
            f"checkpoint has center={ckpt.norm.center!r}, scale={ckpt.norm.scale!r}"
        )
    return ds


def _same_stats(a: data.NormStats, b: data.NormStats) -> bool:
    return (a.scheme, a.fit_scope) == (b.scheme, b.fit_scope) and np.allclose(
        [a.center, a.scale], [b.center, b.scale], rtol=1e-12, atol=0.0
    )


def _check_manifest(ckpt: train.Checkpoint, manifest_path) -> None:
    entries = data.read_manifest(manifest_path)
    if ckpt.norm is None or "norm.center" not in entries:
        return
    if not _same_stats(data.NormStats.from_dict(entries), ckpt.norm):
        raise TrafficLSTMError(f"dataset manifest {manifest_path} does not match checkpoint normalization stats")
    if int(entries.get("window_len", ckpt.window_len)) != ckpt.window_len:
        raise TrafficLSTMError(f"dataset manifest {manifest_path} window_len differs from checkpoint")


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    src = Path(args.raw_csv)
    if not src.is_file():
        raise UsageError(f"input file not found: {src}")
    columns = {}
    for item in args.column or []:
        if "=" not in item:
            raise UsageError(f"--column expects canonical=source, got {item!r}")
        k, v = item.split("=", 1)
        columns[k] = v
    records = data.parse_raw(src, columns or None)
    series = data.aggregate(records, args.bin_minutes, args.intersection)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_series_csv(series, out / "series.csv")
    data.write_gap_report(series, out / "gaps.csv")
    fmt = data.TIMESTAMP_FORMAT
    data.write_manifest(out / "ingest_manifest.txt", {
        "source": src.name,
        "intersection_id": series.intersection_id,
        "bin_minutes": series.bin_minutes,
        "n_records": sum(1 for r in records if args.intersection in (None, r.intersection_id)),
        "n_bins": len(series),
        "n_gaps": len(series.gaps),
        "first_bin": series.bin_start[0].strftime(fmt),
        "last_bin": series.bin_start[-1].strftime(fmt),
    })
    print(f"{len(series)} bins ({len(series.gaps)} gap bins) for intersection "
          f"{series.intersection_id} -> {out / 'series.csv'}")
    return 0


def run_training(cfg):
    """series -> dataset -> fit. Returns (checkpoint, history, dataset, model)."""
    series = data.read_series_csv(cfg.series)
    ds = data.prepare_dataset(series, cfg.window_len, cfg.fractions, cfg.norm_scheme, cfg.norm_scope)
    model = train.build_model(cfg.train, cfg.window_len)
    ckpt, history = train.fit(model, ds, cfg.train)
    ckpt = dataclasses.replace(ckpt, fractions=cfg.fractions)
    return ckpt, history, ds, model


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in ("series", "out", "model", "seed", "epochs") if hasattr(args, k)}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = resolve_config(args.config, overrides)
    if not Path(cfg.series).is_file():
        raise UsageError(f"series file not found: {cfg.series}")
    ckpt, history, ds, model = run_training(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train.save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    train.write_history_csv(history, out / "history.csv")
    manifest = data.dataset_manifest(ds)
    manifest.update({f"split.{k}_frac": repr(v) for k, v in zip(data.SPLIT_NAMES, cfg.fractions)})
    data.write_manifest(out / "manifest.txt", manifest)
    report = train.evaluate(model, ds, "val")
    write_metrics_csv({cfg.train.model: ("val", report)}, out / "val_metrics.csv")
    print(f"trained {cfg.train.model} for {len(history)} epochs; best epoch {ckpt.epoch} "
          f"(val loss {ckpt.best_val_loss:.6f})")
    print(format_table({f"{cfg.train.model} (val)": report}))
    return 0


def cmd_eval(args) -> int:
    paths = args.compare if args.compare else [args.checkpoint]
    if not paths or paths[0] is None:
        raise UsageError("give a checkpoint path or --compare A B")
    if not Path(args.series).is_file():
        raise UsageError(f"series file not found: {args.series}")
    columns, rows = {}, {}
    for path in paths:
        ckpt = train.load_checkpoint(path)
        if args.manifest:
            _check_manifest(ckpt, args.manifest)
        ds = dataset_for_checkpoint(ckpt, args.series)
        model = train.model_from_checkpoint(ckpt)
        report = train.evaluate(model, ds, args.split, args.space)
        name = ckpt.config.model
        if name in columns:
            name = Path(path).parent.name or Path(path).stem
        columns[name] = report
        rows[name] = (args.split, report)
    print(f"split: {args.split} ({args.space} space)")
    print(format_table(columns))
    csv_path = Path(args.csv) if args.csv else Path(paths[0]).parent / f"metrics_{args.split}.csv"
    write_metrics_csv(rows, csv_path)
    return 0


def cmd_predict(args) -> int:
    ckpt = train.load_checkpoint(args.checkpoint)
    if args.values:
        try:
            tail = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    elif args.series:
        if not Path(args.series).is_file():
            raise UsageError(f"series file not found: {args.series}")
        tail = data.read_series_csv(args.series).volume
    else:
        raise UsageError("give --series or --values")
    model = train.model_from_checkpoint(ckpt)
    if ckpt.norm is None:
        raise TrafficLSTMError("checkpoint carries no normalization statistics")
    preds = forecast(model, ckpt.norm, tail, args.horizon, ckpt.window_len)
    for k, v in enumerate(preds, 1):
        print(f"{k},{float(v)!r}")
    return 0


def cmd_gradcheck(args) -> int:
    layers = ["dense", "rnn", "lstm"] if args.layer == "all" else [args.layer]
    ok = True
    for layer in layers:
        worst = 0.0
        for seed in range(args.seeds):
            report = train.gradient_check(train.gradcheck_case(layer, seed, args.activation), args.tolerance)
            worst = max(worst, report.max_error)
        passed = worst <= args.tolerance
        ok &= passed
        label = layer if layer != "dense" else f"dense[{args.activation}]"
        print(f"{'PASS' if passed else 'FAIL'} {label:<14} max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trafficlstm",
        description="Stacked-LSTM traffic volume forecasting.",
        formatter_class=_formatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ingest", help="aggregate raw counts into a binned series", formatter_class=_formatter)
    q.add_argument("raw_csv", help="raw CSV with intersection_id,timestamp,direction,vehicle_class,volume")
    q.add_argument("--out", default=".", help="output directory")
    q.add_argument("--intersection", default=None, help="keep only this intersection id")
    q.add_argument("--bin-minutes", type=int, default=data.BIN_MINUTES, help="bin width in minutes")
    q.add_argument("--column", action="append", metavar="CANONICAL=SOURCE", help="column remapping (repeatable)")
    q.set_defaults(func=cmd_ingest)

    q = sub.add_parser(
        "train", help="train a model on a processed series", formatter_class=_formatter,
        epilog=f"Config keys (file or --set) and their defaults:\n{describe_defaults()}",
    )
    # flags default to SUPPRESS so unset flags never shadow config-file values
    q.add_argument("--config", default=None, help=f"key=value config file (falls back to ${CONFIG_ENV})")
    q.add_argument("--series", default=argparse.SUPPRESS, help="processed series CSV (default: series.csv)")
    q.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: run)")
    q.add_argument("--model", choices=("lstm", "baseline"), default=argparse.SUPPRESS, help="model variant (default: lstm)")
    q.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default: 0)")
    q.add_argument("--epochs", type=int, default=argparse.SUPPRESS, help="maximum epochs (default: 30)")
    q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", help="report MAE/MSE/RMSE for a checkpoint", formatter_class=_formatter)
    q.add_argument("checkpoint", nargs="?", default=None, help="checkpoint file")
    q.add_argument("--series", required=True, help="processed series CSV the model was trained on")
    q.add_argument("--split", choices=data.SPLIT_NAMES, default="test", help="dataset split")
    q.add_argument("--space", choices=("normalized", "original"), default="normalized", help="metric space")
    q.add_argument("--compare", nargs=2, metavar=("A", "B"), default=None, help="two checkpoints side by side")
    q.add_argument("--manifest", default=None, help="dataset manifest to verify against the checkpoint")
    q.add_argument("--csv", default=None, help="metrics CSV path (default: next to the checkpoint)")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="forecast the next bin(s)", formatter_class=_formatter)
    q.add_argument("checkpoint", help="checkpoint file")
    q.add_argument("--series", default=None, help="series CSV; its last window_len bins are used")
    q.add_argument("--values", default=None, help="comma-separated trailing volumes")
    q.add_argument("--horizon", type=int, default=1, help="bins to forecast (>1 rolls predictions forward)")
    q.set_defaults(func=cmd_predict)

    q = sub.add_parser("gradcheck", help="finite-difference check of the backward passes", formatter_class=_formatter)
    q.add_argument("--layer", choices=("all", "dense", "rnn", "lstm"), default="all", help="layer type")
    q.add_argument("--activation", choices=("relu", "linear"), default="relu", help="dense hidden activation")
    q.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    q.add_argument("--seeds", type=int, default=3, help="random instances per layer")
    q.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrafficLSTMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
