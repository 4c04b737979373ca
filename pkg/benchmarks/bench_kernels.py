"""Time each hot kernel on both backends.

Run as a script:

    python3 benchmarks/bench_kernels.py [--repeats 5]

The numba path is exercised regardless of PROMPTMOE_NUMBA (the flag only
picks the package-wide default); a warmup call absorbs JIT compilation so
the table reflects steady-state cost.
"""

import argparse
import time

import numpy as np

from promptmoe import kernels


def _time(fn, args_fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        args = args_fn()
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    def jacobi_args():
        m = rng.normal(size=(48, 48))
        sym = m @ m.T
        return sym.copy(), np.eye(48), 30, 1e-12

    def softmax_args():
        # rows = batch*heads*query flattened, the shape the model hands over
        scores = rng.normal(size=(8 * 4 * 96, 96))
        valid = np.tile(np.tril(np.ones((96, 96))), (8 * 4, 1))
        return scores, valid

    def nll_args():
        logits = rng.normal(size=(16 * 96, 258))
        targets = rng.integers(0, 258, 16 * 96)
        mask = (rng.random(16 * 96) < 0.5).astype(np.float64)
        return logits, targets, mask

    def adamw_args():
        n = 100_000
        return (
            rng.normal(size=n), rng.normal(size=n),
            np.zeros(n), np.zeros(n),
            3, 1e-3, 0.9, 0.999, 1e-8, 0.01,
        )

    return [
        ("jacobi_sweeps 48x48", "jacobi_sweeps", jacobi_args),
        ("masked_softmax 3072x96", "masked_softmax", softmax_args),
        ("nll_fwd_bwd 1536x258", "nll_fwd_bwd", nll_args),
        ("adamw_update 100k", "adamw_update", adamw_args),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    backends = [("numpy", kernels.numpy_impl)]
    if kernels.numba_impl is not None:
        backends.append(("numba", kernels.numba_impl))
    else:
        print("numba unavailable; timing the numpy path only")

    print(f"active package backend: {kernels.active_backend()}")
    head = f"{'kernel':>26} | " + " | ".join(f"{name:>10}" for name, _ in backends)
    if len(backends) == 2:
        head += " | speedup"
    print(head)
    print("-" * len(head))
    for label, attr, args_fn in cases(rng):
        times = []
        for _, impl in backends:
            fn = getattr(impl, attr)
            fn(*args_fn())  # warmup (JIT compile on the numba path)
            times.append(_time(fn, args_fn, args.repeats))
        row = f"{label:>26} | " + " | ".join(f"{t * 1e3:>8.2f}ms" for t in times)
        if len(times) == 2:
            row += f" | {times[0] / times[1]:>6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
