"""The state-space scan three ways: recurrence, parallel scan, convolution.

A discretized linear state-space layer can be evaluated step by step, as
an associative parallel scan, or (when its parameters do not vary over
time) as a causal convolution with an unrolled kernel.  This script checks
all three against each other on random systems and times the two scan
evaluators as the sequence grows.
"""

import argparse
import time

import numpy as np

from rangeloop import ssm
from rangeloop import tensor as tt


def equivalence_demo(rng):
    print("selective scan: parallel vs sequential")
    for m in (4, 64, 900):
        e, n = 4, 8
        delta = tt.Tensor(rng.uniform(1e-3, 1e-1, size=(1, m, e)))
        a = tt.Tensor(-rng.uniform(0.2, 2.0, size=(e, n)))
        b = rng.standard_normal((1, m, n))
        c = rng.standard_normal((1, m, n))
        d = rng.standard_normal(e)
        x = rng.standard_normal((1, m, e))
        dssm = ssm.discretize(delta, a, b, mode="zoh")
        seq = ssm.scan_sequential(dssm, c, d, x).data
        par = ssm.scan_parallel(dssm, c, d, x).data
        print(f"  length {m:4d}: max |seq - par| = {np.max(np.abs(seq - par)):.2e}")


def duality_demo(rng):
    print("\ntime-invariant system: recurrence vs unrolled convolution kernel")
    e, n, m = 2, 6, 48
    delta = rng.uniform(0.05, 0.5, size=e)
    a = -np.exp(rng.standard_normal((e, n)) * 0.5)
    b = rng.standard_normal(n)
    c = rng.standard_normal(n)
    d = rng.standard_normal(e)
    x = rng.standard_normal((1, m, e))

    abar = np.exp(delta[:, None] * a)
    bbar = delta[:, None] * b[None, :]
    kern = ssm.lti_kernel(abar, bbar, c, m)
    y_conv = ssm.causal_conv(x, kern) + d * x

    dssm = ssm.discretize(tt.Tensor(np.broadcast_to(delta, (1, m, e)).copy()),
                          tt.Tensor(a), tt.Tensor(b), mode="euler")
    y_scan = ssm.scan_sequential(dssm, tt.Tensor(c), tt.Tensor(d), tt.Tensor(x)).data
    print(f"  kernel shape {kern.shape}, max |scan - conv| = "
          f"{np.max(np.abs(y_scan - y_conv)):.2e}")


def timing_demo(rng, reps):
    print(f"\nwall time per evaluation (median of {reps}):")
    e, n = 4, 8
    for m in (64, 256, 900):
        delta = tt.Tensor(rng.uniform(1e-3, 1e-1, size=(1, m, e)))
        a = tt.Tensor(-rng.uniform(0.2, 2.0, size=(e, n)))
        b = rng.standard_normal((1, m, n))
        c = rng.standard_normal((1, m, n))
        d = rng.standard_normal(e)
        x = rng.standard_normal((1, m, e))
        dssm = ssm.discretize(delta, a, b, mode="zoh")
        times = {}
        for name, fn in (("sequential", ssm.scan_sequential),
                         ("parallel", ssm.scan_parallel)):
            fn(dssm, c, d, x)  # warm-up
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                fn(dssm, c, d, x)
                samples.append(time.perf_counter() - t0)
            times[name] = sorted(samples)[len(samples) // 2]
        ratio = times["sequential"] / times["parallel"]
        print(f"  length {m:4d}: sequential {times['sequential'] * 1e3:7.2f} ms, "
              f"parallel {times['parallel'] * 1e3:6.2f} ms  ({ratio:.1f}x)")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    equivalence_demo(rng)
    duality_demo(rng)
    timing_demo(rng, args.reps)


if __name__ == "__main__":
    main()
