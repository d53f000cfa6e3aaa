"""Benchmark the numba and numpy kernel backends on desk-scale shapes.

Each hot kernel is timed in isolation on the two convolution-block shapes
the default model actually runs (8 channels over 28x28, 16 over 14x14),
followed by one end-to-end training epoch through the autodiff tape. Before
timing, the backends are checked against each other: forward kernels must
agree bitwise, backward kernels to 1e-12.

Run:  python3 benchmarks/bench_kernels.py [--batch 128] [--repeats 5]
"""

import argparse
import time

import numpy as np

from gradmask import data, nn
from gradmask import kernels
from gradmask.kernels import available_backends, backend_name, set_backend


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_cases(batch):
    """(name, zero-arg callable) pairs on the default model's shapes."""
    rng = np.random.default_rng(0)
    cases = []
    for channels, side in ((8, 28), (16, 14)):
        xp = rng.normal(size=(batch, channels, side + 2, side + 2))
        w = rng.normal(size=(channels, channels, 3, 3))
        b = rng.normal(size=channels)
        g = rng.normal(size=(batch, channels, side, side))
        tag = f"{channels}ch {side}px"
        cases.append((f"conv2d_forward    {tag}",
                      lambda xp=xp, w=w, b=b: kernels.conv2d_forward(xp, w, b)))
        cases.append((f"conv2d_backward_x {tag}",
                      lambda g=g, w=w, side=side:
                      kernels.conv2d_backward_x(g, w, side + 2, side + 2)))
        cases.append((f"conv2d_backward_w {tag}",
                      lambda g=g, xp=xp: kernels.conv2d_backward_w(g, xp, 3)))
    x = rng.normal(size=(batch, 8, 28, 28))
    _, idx = kernels.maxpool2x2_forward(x)
    gp = rng.normal(size=(batch, 8, 14, 14))
    cases.append(("maxpool2x2_forward  8ch 28px",
                  lambda x=x: kernels.maxpool2x2_forward(x)))
    cases.append(("maxpool2x2_backward 8ch 28px",
                  lambda gp=gp, idx=idx:
                  kernels.maxpool2x2_backward(gp, idx, 28, 28)))
    return cases


def end_to_end_case(batch):
    train = data.synthetic_digits(4 * batch, seed=3)
    spec = nn.conv_stack_spec((1, 28, 28), "linear", 1.0,
                              (8, 8, 16, 16), (50, 50), 0.25)
    cfg = nn.TrainConfig(epochs=1, batch_size=batch, seed=0)
    return ("train epoch (4 batches)",
            lambda: nn.train(spec, train.images, train.labels, cfg))


def check_agreement(batch):
    """The two backends must compute the same numbers before being raced."""
    rng = np.random.default_rng(1)
    xp = rng.normal(size=(batch, 8, 16, 16))
    w = rng.normal(size=(16, 8, 3, 3))
    b = rng.normal(size=16)
    g = rng.normal(size=(batch, 16, 14, 14))
    x = rng.normal(size=(batch, 8, 28, 28))
    gp = rng.normal(size=(batch, 8, 14, 14))
    results = {}
    for name in available_backends():
        set_backend(name)
        pooled, idx = kernels.maxpool2x2_forward(x)
        results[name] = {
            "conv_fw": kernels.conv2d_forward(xp, w, b),
            "conv_gx": kernels.conv2d_backward_x(g, w, 16, 16),
            "conv_gw": kernels.conv2d_backward_w(g, xp, 3),
            "pool_fw": pooled,
            "pool_idx": idx,
            "pool_bw": kernels.maxpool2x2_backward(gp, idx, 28, 28),
        }
    if len(results) < 2:
        return
    a, b_ = (results[n] for n in sorted(results))
    assert np.array_equal(a["conv_fw"], b_["conv_fw"]), "conv forward differs"
    assert np.array_equal(a["pool_fw"], b_["pool_fw"]), "pool forward differs"
    assert np.array_equal(a["pool_idx"], b_["pool_idx"]), "pool indices differ"
    assert np.array_equal(a["pool_bw"], b_["pool_bw"]), "pool backward differs"
    for key in ("conv_gx", "conv_gw"):
        assert np.allclose(a[key], b_[key], rtol=1e-12, atol=1e-12), \
            f"{key} differs beyond 1e-12"
    print(f"backend agreement check passed (batch {batch})")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    default = backend_name()
    backends = available_backends()
    print(f"backends: {', '.join(backends)} (default {default})")
    check_agreement(min(args.batch, 32))

    cases = kernel_cases(args.batch) + [end_to_end_case(args.batch)]
    timings = {}
    for backend in backends:
        set_backend(backend)
        for name, fn in cases:
            fn()  # warm-up: triggers JIT compilation on the numba backend
            timings[(backend, name)] = _time(fn, args.repeats)
    set_backend(default)

    header = f"{'case':<34}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'fastest':>16}"
    print()
    print(header)
    print("-" * len(header))
    for name, _ in cases:
        row = f"{name:<34}"
        per_backend = [timings[(b, name)] for b in backends]
        for t in per_backend:
            row += f"{t * 1e3:>10.2f}ms"
        if len(backends) == 2:
            slow, fast = max(per_backend), min(per_backend)
            winner = backends[per_backend.index(fast)]
            row += f"{winner:>10} {slow / fast:>4.1f}x"
        print(row)


if __name__ == "__main__":
    main()
