"""Time the numba and numpy convolution backends on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat N] [--batch B] [--size S]

Each backend is warmed up (numba compiles on first call), then forward,
backward and a full MiniNet training step are timed as the median of N runs.
Outputs of the two backends are checked for agreement before any timing.
"""
import argparse
import statistics
import time

import numpy as np

from cbfocal.losses import loss_gradient
from cbfocal.nn import MiniNet, NetConfig, available_backends, set_backend
from cbfocal.nn import _kernels
from cbfocal.weights import WeightTable


def median_seconds(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "numba" not in backends:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    b, s, c = args.batch, args.size, args.channels
    x = rng.standard_normal((b, s, s, c)).astype(np.float32)
    w = (rng.standard_normal((3, 3, c, c)) * 0.1).astype(np.float32)
    bias = rng.standard_normal(c).astype(np.float32)
    dout = rng.standard_normal((b, s, s, c)).astype(np.float32)

    net = MiniNet.init(NetConfig(in_channels=1, num_classes=6), seed=0)
    images = rng.standard_normal((b, s, s, 1)).astype(np.float32)
    labels = (rng.random((b, 6)) < 0.2).astype(float)
    weights = WeightTable.uniform(6)

    def train_step():
        probs, cache = net.forward(images)
        net.backward(cache, loss_gradient(probs, labels, weights))

    outputs, rows = {}, []
    for name in ("numpy", "numba"):
        set_backend(name)
        y, saved = _kernels.conv_forward(x, w, bias, 1)
        grads = _kernels.conv_backward(dout, saved, w, x.shape, 1)
        outputs[name] = (y, *grads)
        train_step()  # warm-up
        fwd = median_seconds(lambda: _kernels.conv_forward(x, w, bias, 1), args.repeat)
        bwd = median_seconds(lambda: _kernels.conv_backward(dout, saved, w, x.shape, 1), args.repeat)
        step = median_seconds(train_step, args.repeat)
        rows.append((name, fwd, bwd, step))

    worst = max(float(np.max(np.abs(a - b_) / (1 + np.abs(b_))))
                for a, b_ in zip(outputs["numpy"], outputs["numba"]))
    print(f"conv 3x3 {c}->{c} on {b}x{s}x{s}, float32, median of {args.repeat}")
    print(f"backends agree: max scaled difference {worst:.1e}")
    if worst > 1e-5:
        raise SystemExit("backends disagree")
    print(f"{'backend':<8}{'forward ms':>12}{'backward ms':>13}{'train step ms':>15}")
    for name, fwd, bwd, step in rows:
        print(f"{name:<8}{fwd * 1e3:>12.2f}{bwd * 1e3:>13.2f}{step * 1e3:>15.2f}")
    base = rows[0]
    for name, fwd, bwd, step in rows[1:]:
        print(f"{name} speedup: forward {base[1] / fwd:.2f}x, backward {base[2] / bwd:.2f}x, "
              f"step {base[3] / step:.2f}x")


if __name__ == "__main__":
    main()
