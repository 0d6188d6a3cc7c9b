"""Time the numba kernels against the pure-numpy ones.

    python benchmarks/bench_kernels.py [--hidden 32] [--batch 32] [--steps 12] [--repeat 50]

Both tables are importable in one process, so the environment flag does not
matter here. The first JIT call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from trafficlstm import _kernels


def lstm_case(rng, H, I, B, T):
    W = rng.uniform(-0.2, 0.2, size=(4 * H, H + I))
    b = np.zeros((4 * H, 1))
    xs = rng.normal(size=(T, I, B))
    h0, c0 = np.zeros((H, B)), np.zeros((H, B))
    dhs = np.zeros((T, H, B))
    dhs[-1] = rng.normal(size=(H, B))
    return W, b, xs, h0, c0, dhs


def bench(table, W, b, xs, h0, c0, dhs, repeat):
    fwd, bwd = table["lstm_seq_forward"], table["lstm_seq_backward"]
    rfwd, rbwd = table["rnn_seq_forward"], table["rnn_seq_backward"]
    H = h0.shape[0]
    Wr = W[:H].copy()

    hs, cs, gates = fwd(W, b, xs, h0, c0)
    rhs = rfwd(Wr, xs, h0)

    def lstm_backward():
        bwd(W, gates, hs, cs, xs, dhs, np.zeros_like(h0), np.zeros_like(W), np.zeros_like(b))

    def rnn_backward():
        rbwd(Wr, rhs, xs, dhs, np.zeros_like(Wr))

    cases = {
        "lstm forward": lambda: fwd(W, b, xs, h0, c0),
        "lstm backward": lstm_backward,
        "rnn forward": lambda: rfwd(Wr, xs, h0),
        "rnn backward": rnn_backward,
    }
    out = {}
    for name, fn in cases.items():
        fn()  # warm-up
        out[name] = min(timeit.repeat(fn, number=repeat, repeat=5)) / repeat
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--inputs", type=int, default=1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--steps", type=int, default=12)
    p.add_argument("--repeat", type=int, default=50)
    args = p.parse_args()
    if not _kernels.JIT_KERNELS:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    case = lstm_case(rng, args.hidden, args.inputs, args.batch, args.steps)
    py = bench(_kernels.PY_KERNELS, *case, args.repeat)
    jit = bench(_kernels.JIT_KERNELS, *case, args.repeat)

    print(f"H={args.hidden} I={args.inputs} B={args.batch} T={args.steps}  (best of 5, per call)")
    print(f"{'kernel':<16}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name in py:
        print(f"{name:<16}{py[name] * 1e6:>10.1f}us{jit[name] * 1e6:>10.1f}us{py[name] / jit[name]:>9.2f}x")


if __name__ == "__main__":
    main()
